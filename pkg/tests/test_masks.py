"""Mask construction against an independent per-entry rule oracle."""

import numpy as np
import pytest

from jointvl.errors import ConfigError
from jointvl.masks import (DEFAULT_NEG, AttentionMask, MaskScheme,
                           MixedSchedule, build_layout, build_mask,
                           mask_to_csv, sample_scheme)
from jointvl.rng import derive_rng

ALL_SCHEMES = list(MaskScheme)


def oracle_entry(layout, scheme, q: int, k: int) -> bool:
    """Independent per-entry rule: is attention (query q -> key k) allowed?

    Written from the block definitions alone: query block, key block, and
    the positional comparison for causal rows. Deliberately scalar and
    unvectorized so it shares nothing with build_mask.
    """
    v_end = layout.n_visual + 1  # CLS..SEP_V inclusive
    q_is_vision = q <= v_end
    k_is_vision = k <= v_end
    if scheme is MaskScheme.BI:
        return True
    if scheme is MaskScheme.S2S:
        if q_is_vision:
            return k_is_vision
        return k_is_vision or k <= q
    if scheme is MaskScheme.BAR:
        if q_is_vision:
            return True
        return k_is_vision or k <= q
    if scheme is MaskScheme.NON_CROSSING:
        return q_is_vision == k_is_vision
    raise AssertionError(scheme)


def oracle_matrix(layout, scheme) -> np.ndarray:
    size = layout.seq_len
    out = np.full((size, size), DEFAULT_NEG)
    for q in range(size):
        for k in range(size):
            if oracle_entry(layout, scheme, q, k):
                out[q, k] = 0.0
    return out


class TestLayout:
    def test_bi_small(self):
        layout = build_layout(2, 2, MaskScheme.BI)
        assert layout.seq_len == 7
        assert list(layout.visual_positions) == [1, 2]
        assert layout.sep_v_pos == 3
        assert list(layout.language_positions) == [4, 5]
        assert layout.sep_l_pos == 6
        assert layout.v_block().tolist() == [True] * 4 + [False] * 3

    def test_paper_scale_length(self):
        # 16x16 grid with 253-token reports: S = 512
        assert build_layout(256, 253, MaskScheme.BI).seq_len == 512

    def test_non_crossing_adds_language_cls(self):
        layout = build_layout(1, 1, MaskScheme.NON_CROSSING)
        assert layout.seq_len == 6
        assert layout.language_cls_pos == 3
        assert list(layout.language_positions) == [4]

    def test_positions_partition_the_sequence(self):
        for scheme in ALL_SCHEMES:
            layout = build_layout(3, 4, scheme)
            positions = [layout.cls_pos, *layout.visual_positions,
                         layout.sep_v_pos]
            if layout.has_language_cls:
                positions.append(layout.language_cls_pos)
            positions += [*layout.language_positions, layout.sep_l_pos]
            assert sorted(positions) == list(range(layout.seq_len))

    @pytest.mark.parametrize("k,n", [(0, 1), (1, 0), (0, 0)])
    def test_degenerate_rejected(self, k, n):
        with pytest.raises(ConfigError):
            build_layout(k, n, MaskScheme.BI)


class TestBuildMask:
    def test_bi_is_all_zero(self):
        layout = build_layout(2, 2, MaskScheme.BI)
        mask = build_mask(layout, MaskScheme.BI)
        assert mask.matrix.shape == (7, 7)
        assert np.all(mask.matrix == 0.0)

    def test_s2s_hand_enumerated(self):
        # K=1, N=2: positions CLS=0, v1=1, SEP_V=2, w1=3, w2=4, SEP_L=5
        layout = build_layout(1, 2, MaskScheme.S2S)
        allowed = build_mask(layout, MaskScheme.S2S).allowed()
        expected = np.array([
            [1, 1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0, 0],
            [1, 1, 1, 1, 0, 0],
            [1, 1, 1, 1, 1, 0],
            [1, 1, 1, 1, 1, 1],
        ], dtype=bool)
        assert np.array_equal(allowed, expected)

    def test_bar_hand_enumerated(self):
        # identical to the S2S case except vision rows are fully open
        layout = build_layout(1, 2, MaskScheme.BAR)
        allowed = build_mask(layout, MaskScheme.BAR).allowed()
        expected = np.array([
            [1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 0, 0],
            [1, 1, 1, 1, 1, 0],
            [1, 1, 1, 1, 1, 1],
        ], dtype=bool)
        assert np.array_equal(allowed, expected)

    def test_quadrant_oracle_all_small_layouts(self):
        for scheme in ALL_SCHEMES:
            for k in range(1, 7):
                for n in range(1, 7):
                    layout = build_layout(k, n, scheme)
                    mask = build_mask(layout, scheme)
                    assert np.array_equal(mask.matrix, oracle_matrix(layout, scheme)), \
                        f"scheme={scheme} K={k} N={n}"

    def test_entries_binary_and_rows_nonempty(self):
        for scheme in ALL_SCHEMES:
            mask = build_mask(build_layout(4, 5, scheme), scheme)
            assert np.all((mask.matrix == 0.0) | (mask.matrix == DEFAULT_NEG))
            assert (mask.matrix == 0.0).any(axis=1).all()

    def test_symmetry(self):
        for scheme, symmetric in [(MaskScheme.BI, True),
                                  (MaskScheme.NON_CROSSING, True),
                                  (MaskScheme.S2S, False),
                                  (MaskScheme.BAR, False)]:
            mask = build_mask(build_layout(3, 3, scheme), scheme)
            assert np.array_equal(mask.matrix, mask.matrix.T) == symmetric

    def test_bar_differs_from_s2s_only_in_vision_rows(self):
        for k, n in [(1, 2), (3, 4), (6, 6)]:
            s2s = build_mask(build_layout(k, n, MaskScheme.S2S), MaskScheme.S2S)
            bar = build_mask(build_layout(k, n, MaskScheme.BAR), MaskScheme.BAR)
            v = s2s.layout.v_block()
            assert np.array_equal(s2s.matrix[~v], bar.matrix[~v])
            assert np.all(bar.matrix[v] == 0.0)
            assert not np.array_equal(s2s.matrix[v], bar.matrix[v])

    def test_non_crossing_blocks_exactly_the_cross_quadrants(self):
        layout = build_layout(3, 4, MaskScheme.NON_CROSSING)
        mask = build_mask(layout, MaskScheme.NON_CROSSING)
        v = layout.v_block()
        blocked = mask.matrix == DEFAULT_NEG
        assert blocked[np.ix_(v, ~v)].all()
        assert blocked[np.ix_(~v, v)].all()
        assert not blocked[np.ix_(v, v)].any()
        assert not blocked[np.ix_(~v, ~v)].any()

    def test_layout_scheme_mismatch_rejected(self):
        bi_layout = build_layout(2, 2, MaskScheme.BI)
        with pytest.raises(ConfigError):
            build_mask(bi_layout, MaskScheme.NON_CROSSING)
        nc_layout = build_layout(2, 2, MaskScheme.NON_CROSSING)
        with pytest.raises(ConfigError):
            build_mask(nc_layout, MaskScheme.S2S)

    def test_custom_neg(self):
        mask = build_mask(build_layout(1, 2, MaskScheme.S2S), MaskScheme.S2S,
                          neg=-1e4)
        assert set(np.unique(mask.matrix)) == {-1e4, 0.0}
        with pytest.raises(ConfigError):
            build_mask(build_layout(1, 2, MaskScheme.S2S), MaskScheme.S2S, neg=1.0)


class TestSampleScheme:
    def test_extremes(self):
        rng = derive_rng(0, "schedule")
        assert all(sample_scheme(MixedSchedule(1.0), rng) is MaskScheme.S2S
                   for _ in range(50))
        assert all(sample_scheme(MixedSchedule(0.0), rng) is MaskScheme.BI
                   for _ in range(50))

    def test_default_rate(self):
        rng = derive_rng(7, "schedule")
        draws = [sample_scheme(MixedSchedule(), rng) for _ in range(100_000)]
        frac = sum(d is MaskScheme.S2S for d in draws) / len(draws)
        assert abs(frac - 0.75) < 0.01

    def test_deterministic_given_seed(self):
        a = [sample_scheme(MixedSchedule(), derive_rng(3, "s", i)) for i in range(64)]
        b = [sample_scheme(MixedSchedule(), derive_rng(3, "s", i)) for i in range(64)]
        assert a == b

    def test_bad_probability_rejected(self):
        with pytest.raises(ConfigError):
            MixedSchedule(1.5)


class TestCsvExport:
    def test_round_trip_text(self):
        mask = build_mask(build_layout(1, 2, MaskScheme.S2S), MaskScheme.S2S)
        text = mask_to_csv(mask)
        rows = [line.split(",") for line in text.strip().splitlines()]
        assert len(rows) == 6 and all(len(r) == 6 for r in rows)
        assert set(x for row in rows for x in row) == {"0", "-inf"}
        parsed = np.array([[0.0 if x == "0" else DEFAULT_NEG for x in row]
                           for row in rows])
        assert np.array_equal(parsed, mask.matrix)
