"""Deterministic synthetic image/report corpus.

Each study pairs a grayscale glyph image with a templated report over a
closed vocabulary of 14 findings. Every finding owns a distinct glyph
shape, a fixed image region (one cell of a 4x4 grid), and three surface
forms (canonical word, two-word expansion, abbreviation). Reports mention
exactly the present findings, so the rule labeler recovers the generating
label vector by construction, and the abbreviation/expansion pairs make
surface-form mismatch measurable without changing extracted labels.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .pgm import quantize, read_pgm, write_pgm
from .rng import derive_rng
from .vocab import Vocabulary, split_tokens

N_FINDINGS = 14
NEGATION_CUES = ("no", "without")
#: tokens this many places before a synonym (same sentence) negate it
NEGATION_WINDOW = 2


@dataclass(frozen=True)
class Finding:
    index: int
    name: str            # canonical single token
    expanded: str        # two-token long form
    abbrev: str          # single-token abbreviation
    shape: str
    cell: tuple          # (row, col) in the 4x4 region grid

    @property
    def synonyms(self) -> tuple:
        return (self.name, self.expanded, self.abbrev)


_SHAPES = (
    "square", "hollow_square", "cross_x", "plus", "h_bar", "v_bar",
    "diag", "anti_diag", "ring", "disk", "triangle", "checker",
    "corner", "double_bar",
)

_FINDING_ROWS = (
    ("cardiomegaly", "enlarged heart", "cmg"),
    ("edema", "vascular congestion", "edm"),
    ("consolidation", "airspace filling", "csd"),
    ("atelectasis", "collapsed lobe", "atl"),
    ("pneumonia", "infectious infiltrate", "pna"),
    ("pneumothorax", "apical air", "ptx"),
    ("effusion", "costophrenic fluid", "eff"),
    ("fracture", "broken rib", "frx"),
    ("opacity", "hazy shadow", "opc"),
    ("emphysema", "hyperinflated lung", "emp"),
    ("fibrosis", "reticular scarring", "fib"),
    ("nodule", "rounded mass", "ndl"),
    ("hernia", "diaphragmatic bulge", "hrn"),
    ("devices", "support hardware", "dvc"),
)

_OPENERS = (
    "frontal view compared to prior exam.",
    "routine single view study.",
    "image quality is stable.",
)

_TEMPLATES = (
    "there is {syn}.",
    "{syn} is seen.",
    "stable {syn} noted.",
    "the study shows {syn}.",
    "mild {syn} persistent since prior exam.",
)

_NEGATIVE_SENTENCE = "no acute findings."


@dataclass(frozen=True)
class FindingSpec:
    """The closed label space: 14 findings with regions and surface forms."""

    findings: tuple = ()

    def __post_init__(self):
        if len(self.findings) != N_FINDINGS:
            raise DataError(f"need exactly {N_FINDINGS} findings, "
                            f"got {len(self.findings)}")
        phrases = []
        cells = set()
        for f in self.findings:
            for syn in f.synonyms:
                phrases.append(tuple(split_tokens(syn)))
            if f.cell in cells:
                raise DataError(f"finding regions overlap at cell {f.cell}")
            cells.add(f.cell)
        if len(set(phrases)) != len(phrases):
            raise DataError("synonym phrases are not unique across findings")
        # no synonym phrase may appear inside another finding's phrase,
        # or the labeler round-trip breaks
        for i, a in enumerate(phrases):
            for j, b in enumerate(phrases):
                if i != j and len(a) < len(b):
                    if any(b[k : k + len(a)] == a for k in range(len(b) - len(a) + 1)):
                        raise DataError(f"synonym {a} embedded in {b}")

    def __iter__(self):
        return iter(self.findings)

    def __getitem__(self, index: int) -> Finding:
        return self.findings[index]

    def names(self) -> list:
        return [f.name for f in self.findings]


def default_finding_spec() -> FindingSpec:
    findings = tuple(
        Finding(index=i, name=name, expanded=expanded, abbrev=abbrev,
                shape=_SHAPES[i], cell=(i // 4, i % 4))
        for i, (name, expanded, abbrev) in enumerate(_FINDING_ROWS)
    )
    return FindingSpec(findings=findings)


def default_marginals() -> np.ndarray:
    """Skewed per-finding positive rates, ~13% down to ~1%."""
    return np.linspace(0.13, 0.01, N_FINDINGS)


@dataclass
class Study:
    """One synthetic image + report + 14-bit label vector."""

    study_id: str
    image: np.ndarray
    report: str
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.labels.shape != (N_FINDINGS,):
            raise DataError(f"labels must have shape ({N_FINDINGS},), "
                            f"got {self.labels.shape}")

    def label_key(self) -> bytes:
        """Hashable identity of the positive-label set."""
        return self.labels.tobytes()


@dataclass(frozen=True)
class VqaItem:
    study_id: str
    question: str
    answer: str
    qtype: str  # "closed" or "open"


# ---- glyph rendering --------------------------------------------------------

def _draw_glyph(canvas: np.ndarray, shape: str, r0: int, c0: int, size: int,
                value: float) -> None:
    s = size
    box = canvas[r0 : r0 + s, c0 : c0 + s]
    idx = np.arange(s)
    if shape == "square":
        box[:, :] = value
    elif shape == "hollow_square":
        box[0, :] = box[-1, :] = value
        box[:, 0] = box[:, -1] = value
    elif shape == "cross_x":
        box[idx, idx] = value
        box[idx, s - 1 - idx] = value
    elif shape == "plus":
        box[s // 2, :] = value
        box[:, s // 2] = value
    elif shape == "h_bar":
        box[s // 2 - 1 : s // 2 + 1, :] = value
    elif shape == "v_bar":
        box[:, s // 2 - 1 : s // 2 + 1] = value
    elif shape == "diag":
        box[idx, idx] = value
    elif shape == "anti_diag":
        box[idx, s - 1 - idx] = value
    elif shape == "ring":
        rr, cc = np.meshgrid(idx - (s - 1) / 2, idx - (s - 1) / 2, indexing="ij")
        dist = np.sqrt(rr * rr + cc * cc)
        box[(dist <= s / 2 - 0.5) & (dist >= s / 2 - 2.0)] = value
    elif shape == "disk":
        rr, cc = np.meshgrid(idx - (s - 1) / 2, idx - (s - 1) / 2, indexing="ij")
        box[rr * rr + cc * cc <= (s / 2 - 0.5) ** 2] = value
    elif shape == "triangle":
        rr, cc = np.meshgrid(idx, idx, indexing="ij")
        box[cc <= rr] = value
    elif shape == "checker":
        rr, cc = np.meshgrid(idx, idx, indexing="ij")
        box[((rr // 2) + (cc // 2)) % 2 == 0] = value
    elif shape == "corner":
        box[:, 0:2] = value
        box[-2:, :] = value
    elif shape == "double_bar":
        box[1:3, :] = value
        box[s - 3 : s - 1, :] = value
    else:  # pragma: no cover
        raise AssertionError(shape)


def region_box(finding: Finding, image_size: int) -> tuple:
    """Pixel bounding box (r0, c0, size) of a finding's cell."""
    cell = image_size // 4
    return finding.cell[0] * cell, finding.cell[1] * cell, cell


def render_image(labels: np.ndarray, spec: FindingSpec, rng: np.random.Generator,
                 image_size: int = 32, noise: float = 0.06) -> np.ndarray:
    """Draw present findings' glyphs with +/-1px jitter over uniform noise.

    The result lives on the 8-bit lattice so PGM round-trips are exact.
    """
    if image_size % 4 != 0 or image_size < 16:
        raise DataError(f"image size must be >= 16 and divisible by 4, "
                        f"got {image_size}")
    canvas = rng.uniform(0.0, noise, size=(image_size, image_size))
    cell = image_size // 4
    glyph = cell - 2
    for finding in spec:
        jr, jc = int(rng.integers(-1, 2)), int(rng.integers(-1, 2))
        value = float(rng.uniform(0.8, 1.0))
        if not labels[finding.index]:
            continue
        r0, c0, _ = region_box(finding, image_size)
        _draw_glyph(canvas, finding.shape, r0 + 1 + jr, c0 + 1 + jc, glyph, value)
    return quantize(canvas).astype(np.float64) / 255.0


# ---- report composition and labeling ----------------------------------------

def compose_report(labels: np.ndarray, spec: FindingSpec,
                   rng: np.random.Generator) -> str:
    sentences = [_OPENERS[int(rng.integers(len(_OPENERS)))]]
    present = [f for f in spec if labels[f.index]]
    if not present:
        sentences.append(_NEGATIVE_SENTENCE)
    for finding in present:
        template = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
        syn = finding.synonyms[int(rng.integers(len(finding.synonyms)))]
        sentences.append(template.format(syn=syn))
    return " ".join(sentences)


def rule_labeler(report: str, spec: FindingSpec) -> np.ndarray:
    """Extract the 14-bit label vector from report text.

    Bit i is set iff some synonym of finding i occurs as a contiguous
    token run with no negation cue in the NEGATION_WINDOW tokens before
    it within the same sentence.
    """
    labels = np.zeros(N_FINDINGS, dtype=np.int8)
    sentences = [split_tokens(s) for s in report.split(".")]
    for finding in spec:
        phrases = [tuple(split_tokens(s)) for s in finding.synonyms]
        for tokens in sentences:
            for phrase in phrases:
                n = len(phrase)
                for start in range(0, len(tokens) - n + 1):
                    if tuple(tokens[start : start + n]) != phrase:
                        continue
                    window = tokens[max(0, start - NEGATION_WINDOW) : start]
                    if not any(cue in window for cue in NEGATION_CUES):
                        labels[finding.index] = 1
    return labels


def swap_surface_forms(report: str, spec: FindingSpec) -> str:
    """Swap abbreviation <-> expansion mentions; labels are unaffected.

    Canonical single-word mentions are left alone; only the abbreviation
    and the two-word expansion trade places.
    """
    swaps = {}
    for finding in spec:
        expanded = tuple(split_tokens(finding.expanded))
        swaps[(finding.abbrev,)] = expanded
        swaps[expanded] = (finding.abbrev,)
    out_sentences = []
    for sentence in report.split("."):
        tokens = split_tokens(sentence)
        if not tokens:
            continue
        swapped = []
        i = 0
        while i < len(tokens):
            for length in (2, 1):
                phrase = tuple(tokens[i : i + length])
                if phrase in swaps:
                    swapped.extend(swaps[phrase])
                    i += length
                    break
            else:
                swapped.append(tokens[i])
                i += 1
        out_sentences.append(" ".join(swapped) + ".")
    return " ".join(out_sentences)


# ---- study / VQA generation --------------------------------------------------

def gen_study(spec: FindingSpec, marginals: np.ndarray, rng: np.random.Generator,
              study_id: str = "s0", image_size: int = 32) -> Study:
    marginals = np.asarray(marginals, dtype=np.float64)
    if marginals.shape != (N_FINDINGS,):
        raise DataError(f"marginals must have shape ({N_FINDINGS},)")
    labels = (rng.random(N_FINDINGS) < marginals).astype(np.int8)
    image = render_image(labels, spec, rng, image_size=image_size)
    report = compose_report(labels, spec, rng)
    return Study(study_id=study_id, image=image, report=report, labels=labels)


def gen_vqa(study: Study, spec: FindingSpec, rng: np.random.Generator) -> VqaItem:
    if rng.random() < 0.5:
        finding = spec[int(rng.integers(N_FINDINGS))]
        return VqaItem(
            study_id=study.study_id,
            question=f"is {finding.name} present in this study?",
            answer="yes" if study.labels[finding.index] else "no",
            qtype="closed",
        )
    finding = spec[int(rng.integers(N_FINDINGS))]
    sector = finding.cell[0] * 4 + finding.cell[1]
    return VqaItem(
        study_id=study.study_id,
        question=f"which finding is present in sector {sector}?",
        answer=finding.name if study.labels[finding.index] else "none",
        qtype="open",
    )


# ---- dataset on disk ---------------------------------------------------------

@dataclass
class Corpus:
    """In-memory view of a generated dataset directory."""

    studies: list
    vqa_items: list
    vocab: Vocabulary
    spec: FindingSpec = field(default_factory=default_finding_spec)

    def split(self, name: str) -> list:
        return [s for s in self.studies if s.split == name]

    def vqa_split(self, name: str) -> list:
        by_id = {s.study_id: s for s in self.studies}
        return [q for q in self.vqa_items if by_id[q.study_id].split == name]

    def by_id(self, study_id: str) -> Study:
        for s in self.studies:
            if s.study_id == study_id:
                return s
        raise DataError(f"unknown study id {study_id!r}")


def gen_dataset(out_dir, counts: dict, seed: int,
                spec: FindingSpec | None = None,
                marginals: np.ndarray | None = None,
                image_size: int = 32) -> Corpus:
    """Generate a full corpus (images, manifests, vocabulary) on disk.

    `counts` maps split name -> study count. Every used split is
    guaranteed at least two distinct label sets (the tail study is
    redrawn if needed), so matching/non-matching sampling is well-posed;
    a single-study split cannot satisfy that and is rejected.
    """
    spec = spec or default_finding_spec()
    marginals = default_marginals() if marginals is None else np.asarray(marginals)
    for split, count in counts.items():
        if count < 0 or split not in ("train", "valid", "test"):
            raise DataError(f"bad split spec {split}={count}")
        if count == 1:
            raise DataError(
                f"split {split!r} with a single study cannot contain two "
                f"distinct label sets")

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    studies = []
    for split in ("train", "valid", "test"):
        count = counts.get(split, 0)
        split_studies = []
        for i in range(count):
            rng = derive_rng(seed, f"study.{split}", i)
            study = gen_study(spec, marginals, rng,
                              study_id=f"{split}{i:06d}", image_size=image_size)
            study.split = split
            split_studies.append(study)
        # enforce >= 2 distinct label sets by redrawing the last study
        if count >= 2:
            keys = {s.label_key() for s in split_studies}
            bump = 0
            while len(keys) < 2:
                bump += 1
                rng = derive_rng(seed, f"study.{split}.redraw", bump)
                study = gen_study(spec, marginals, rng,
                                  study_id=split_studies[-1].study_id,
                                  image_size=image_size)
                study.split = split
                split_studies[-1] = study
                keys = {s.label_key() for s in split_studies}
        studies.extend(split_studies)

    vqa_items = [
        gen_vqa(s, spec, derive_rng(seed, "vqa", i))
        for i, s in enumerate(studies)
    ]

    # round-trip validation: labeler must recover every label vector
    for study in studies:
        recovered = rule_labeler(study.report, spec)
        if not np.array_equal(recovered, study.labels):
            raise DataError(
                f"round-trip labeler mismatch on {study.study_id}: "
                f"{recovered.tolist()} != {study.labels.tolist()}")

    train_texts = [s.report for s in studies if s.split == "train"]
    train_questions = [q.question for q, s in zip(vqa_items, studies)
                       if s.split == "train"]
    vocab = Vocabulary.build(train_texts + train_questions)

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w") as fh:
        for study in studies:
            rel = os.path.join("images", f"{study.study_id}.pgm")
            write_pgm(os.path.join(out_dir, rel), study.image)
            record = {
                "id": study.study_id,
                "image": rel,
                "report": study.report,
                "labels": [int(x) for x in study.labels],
                "split": study.split,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "vqa.jsonl"), "w") as fh:
        for item in vqa_items:
            record = {
                "id": item.study_id,
                "image": os.path.join("images", f"{item.study_id}.pgm"),
                "question": item.question,
                "answer": item.answer,
                "qtype": item.qtype,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    vocab.save(os.path.join(out_dir, "vocab.tsv"))
    return Corpus(studies=studies, vqa_items=vqa_items, vocab=vocab, spec=spec)


def load_dataset(data_dir) -> Corpus:
    manifest_path = os.path.join(data_dir, "manifest.jsonl")
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest.jsonl in {data_dir}")
    studies = []
    with open(manifest_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            image = read_pgm(os.path.join(data_dir, rec["image"]))
            studies.append(Study(study_id=rec["id"], image=image,
                                 report=rec["report"],
                                 labels=np.asarray(rec["labels"], dtype=np.int8),
                                 split=rec["split"]))
    vqa_items = []
    vqa_path = os.path.join(data_dir, "vqa.jsonl")
    if os.path.exists(vqa_path):
        with open(vqa_path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                vqa_items.append(VqaItem(study_id=rec["id"],
                                         question=rec["question"],
                                         answer=rec["answer"],
                                         qtype=rec["qtype"]))
    vocab = Vocabulary.load(os.path.join(data_dir, "vocab.tsv"))
    return Corpus(studies=studies, vqa_items=vqa_items, vocab=vocab)


def region_intensity_gaps(studies, spec: FindingSpec) -> np.ndarray:
    """Mean in-region intensity gap (positives minus negatives) per finding.

    The corpus is learnable by construction; this witnesses it.
    """
    gaps = np.zeros(N_FINDINGS)
    for finding in spec:
        image_size = studies[0].image.shape[0]
        r0, c0, cell = region_box(finding, image_size)
        pos, neg = [], []
        for s in studies:
            mean = float(s.image[r0 : r0 + cell, c0 : c0 + cell].mean())
            (pos if s.labels[finding.index] else neg).append(mean)
        if pos and neg:
            gaps[finding.index] = np.mean(pos) - np.mean(neg)
    return gaps
