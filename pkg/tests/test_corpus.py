"""Synthetic corpus: round-trip labeling, determinism, statistics."""

import filecmp
import os

import numpy as np
import pytest

from jointvl.corpus import (Study, compose_report, default_finding_spec,
                            default_marginals, gen_dataset, gen_study, gen_vqa,
                            load_dataset, region_box, region_intensity_gaps,
                            render_image, rule_labeler, swap_surface_forms)
from jointvl.errors import DataError
from jointvl.pgm import read_pgm, write_pgm
from jointvl.rng import derive_rng

SPEC = default_finding_spec()


class TestFindingSpec:
    def test_fourteen_findings_with_unique_surface_forms(self):
        assert len(SPEC.findings) == 14
        all_forms = [s for f in SPEC for s in f.synonyms]
        assert len(set(all_forms)) == len(all_forms)

    def test_regions_disjoint(self):
        boxes = [region_box(f, 32) for f in SPEC]
        cells = {(r, c) for r, c, _ in boxes}
        assert len(cells) == 14


class TestRuleLabeler:
    def test_affirmative_mention_sets_bit(self):
        labels = rule_labeler("there is consolidation.", SPEC)
        assert labels[2] == 1 and labels.sum() == 1

    def test_negated_mention_is_clear(self):
        assert rule_labeler("no focal consolidation.", SPEC).sum() == 0
        assert rule_labeler("without enlarged heart.", SPEC).sum() == 0

    def test_negation_is_sentence_local(self):
        # the cue ends the previous sentence, so the mention is affirmed
        labels = rule_labeler("there is no change. consolidation is seen.", SPEC)
        assert labels[2] == 1

    def test_negation_window_is_two_tokens(self):
        # cue 3 tokens before the mention no longer negates it
        labels = rule_labeler("no acute evidence of consolidation.", SPEC)
        assert labels[2] == 1

    def test_all_surface_forms_equivalent(self):
        for finding in SPEC:
            for syn in finding.synonyms:
                labels = rule_labeler(f"{syn} is seen.", SPEC)
                assert labels[finding.index] == 1, syn
                assert labels.sum() == 1

    def test_round_trip_on_generated_studies(self):
        for i in range(300):
            study = gen_study(SPEC, default_marginals(), derive_rng(21, "rt", i),
                              study_id=f"s{i}")
            assert np.array_equal(rule_labeler(study.report, SPEC), study.labels)


class TestRendering:
    def test_empty_labels_is_blank_noise(self):
        image = render_image(np.zeros(14, dtype=np.int8), SPEC,
                             derive_rng(0, "img"), image_size=32)
        assert image.max() < 0.1

    def test_single_finding_confined_to_its_region(self):
        for idx in (0, 5, 13):
            labels = np.zeros(14, dtype=np.int8)
            labels[idx] = 1
            image = render_image(labels, SPEC, derive_rng(1, "img", idx))
            bright = image > 0.5
            r0, c0, cell = region_box(SPEC[idx], 32)
            outside = bright.copy()
            outside[r0 : r0 + cell, c0 : c0 + cell] = False
            assert not outside.any()
            assert bright[r0 : r0 + cell, c0 : c0 + cell].any()

    def test_quantized_to_8bit_lattice(self):
        study = gen_study(SPEC, default_marginals(), derive_rng(2, "q"))
        scaled = study.image * 255.0
        np.testing.assert_allclose(scaled, np.rint(scaled), atol=1e-9)


class TestReports:
    def test_empty_labels_negative_sentence(self):
        report = compose_report(np.zeros(14, dtype=np.int8), SPEC,
                                derive_rng(3, "rep"))
        assert "no acute findings" in report
        assert rule_labeler(report, SPEC).sum() == 0

    def test_single_label_mentions_exactly_that_finding(self):
        labels = np.zeros(14, dtype=np.int8)
        labels[3] = 1
        report = compose_report(labels, SPEC, derive_rng(4, "rep"))
        recovered = rule_labeler(report, SPEC)
        assert recovered[3] == 1 and recovered.sum() == 1

    def test_swap_surface_forms_preserves_labels(self):
        for i in range(120):
            study = gen_study(SPEC, default_marginals(), derive_rng(5, "swap", i))
            swapped = swap_surface_forms(study.report, SPEC)
            assert np.array_equal(rule_labeler(swapped, SPEC), study.labels)

    def test_swap_changes_surface_when_nondefault_form_present(self):
        report = "there is cmg. enlarged heart is seen."
        swapped = swap_surface_forms(report, SPEC)
        assert "enlarged heart" in swapped.split(".")[0]
        assert "cmg" in swapped.split(".")[1]


class TestVqa:
    def test_closed_answer_tracks_label_bit(self):
        study = gen_study(SPEC, np.full(14, 0.5), derive_rng(6, "vqa"))
        for i in range(40):
            item = gen_vqa(study, SPEC, derive_rng(7, "vqa-item", i))
            if item.qtype == "closed":
                finding = next(f for f in SPEC if f.name in item.question)
                expected = "yes" if study.labels[finding.index] else "no"
                assert item.answer == expected
            else:
                sector = int(item.question.rsplit(" ", 1)[1].rstrip("?"))
                finding = next(f for f in SPEC
                               if f.cell[0] * 4 + f.cell[1] == sector)
                expected = finding.name if study.labels[finding.index] else "none"
                assert item.answer == expected

    def test_answer_distribution_tracks_marginals(self):
        marginals = default_marginals()
        yes = closed = 0
        for i in range(10_000):
            study = gen_study(SPEC, marginals, derive_rng(8, "vqa-dist", i))
            item = gen_vqa(study, SPEC, derive_rng(9, "vqa-dist-item", i))
            if item.qtype == "closed":
                closed += 1
                yes += item.answer == "yes"
        # a closed question picks a finding uniformly: P(yes) = mean marginal
        assert abs(yes / closed - marginals.mean()) < 0.015


class TestMarginals:
    def test_positive_rates_match_configuration(self):
        marginals = np.full(14, 0.1)
        counts = np.zeros(14)
        n = 10_000
        for i in range(n):
            labels = (derive_rng(10, "marg", i).random(14) < marginals)
            counts += labels
        # direct sanity of the sampling rule used by gen_study
        assert np.all(np.abs(counts / n - 0.1) < 0.01)

    def test_gen_study_rates(self):
        marginals = np.full(14, 0.1)
        counts = np.zeros(14)
        n = 4000
        for i in range(n):
            study = gen_study(SPEC, marginals, derive_rng(11, "marg2", i))
            counts += study.labels
        assert np.all(np.abs(counts / n - 0.1) < 0.02)


class TestDataset:
    def test_manifest_counts_and_round_trip(self, tmp_path):
        corpus = gen_dataset(tmp_path / "d", {"train": 30, "valid": 5, "test": 6},
                             seed=3)
        assert len(corpus.split("train")) == 30
        assert len(corpus.split("valid")) == 5
        assert len(corpus.split("test")) == 6
        loaded = load_dataset(tmp_path / "d")
        assert len(loaded.studies) == 41
        for a, b in zip(corpus.studies, loaded.studies):
            assert a.report == b.report
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.labels, b.labels)

    def test_same_seed_is_byte_identical(self, tmp_path):
        gen_dataset(tmp_path / "a", {"train": 20, "test": 4}, seed=9)
        gen_dataset(tmp_path / "b", {"train": 20, "test": 4}, seed=9)
        for name in ("manifest.jsonl", "vqa.jsonl", "vocab.tsv"):
            assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name,
                               shallow=False), name
        images = sorted(os.listdir(tmp_path / "a" / "images"))
        assert images == sorted(os.listdir(tmp_path / "b" / "images"))
        for image in images:
            assert filecmp.cmp(tmp_path / "a" / "images" / image,
                               tmp_path / "b" / "images" / image, shallow=False)

    def test_single_study_split_rejected(self, tmp_path):
        with pytest.raises(DataError):
            gen_dataset(tmp_path / "x", {"train": 1}, seed=0)

    def test_two_label_sets_guaranteed(self, tmp_path):
        # all-zero marginals would make every label set identical
        corpus = gen_dataset(tmp_path / "z", {"train": 4}, seed=1,
                             marginals=np.zeros(14))
        keys = {s.label_key() for s in corpus.split("train")}
        assert len(keys) >= 2

    def test_learnability_witness(self, tmp_path):
        corpus = gen_dataset(tmp_path / "w", {"train": 300}, seed=5,
                             marginals=np.full(14, 0.3))
        gaps = region_intensity_gaps(corpus.split("train"), SPEC)
        assert np.all(gaps > 0.2)


class TestPgm:
    def test_round_trip_exact(self, tmp_path):
        rng = derive_rng(12, "pgm")
        image = np.rint(rng.random((16, 24)) * 255) / 255.0
        path = tmp_path / "img.pgm"
        write_pgm(path, image)
        np.testing.assert_array_equal(read_pgm(path), image)

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
        with pytest.raises(DataError):
            read_pgm(path)

    def test_rejects_truncated(self, tmp_path):
        path = tmp_path / "trunc.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(DataError):
            read_pgm(path)
