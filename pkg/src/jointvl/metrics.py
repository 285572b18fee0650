"""Evaluation metrics and the statistical protocol.

Ranking metrics over 100-candidate trials, micro-averaged AUROC
(Mann-Whitney with ties counted half) and F1, teacher-forced perplexity,
corpus BLEU-4 with brevity penalty, clinical efficacy via the rule
labeler, bootstrap resampling (n=30) and Welch's unequal-variance t-test.
"""

import csv
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.special import stdtr
from scipy.stats import rankdata

from .corpus import N_FINDINGS, rule_labeler
from .errors import DataError
from .vocab import split_tokens

SIGNIFICANCE = 0.05  # decision threshold used by comparisons


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------

def ranking_metrics(trials, k: int = 5) -> dict:
    """MRR / Hit@K / Recall@K / Precision@K over ranked trial results.

    MRR uses the first positive's 1-based rank; Recall@K divides top-K
    positives by the trial's positive count; Precision@K divides by K.
    """
    if not trials:
        raise DataError("ranking_metrics needs at least one trial")
    mrr, hit, recall, precision = [], [], [], []
    for trial in trials:
        positives = np.asarray(trial.positives, dtype=bool)
        if not positives.any():
            raise DataError("trial without positives")
        first = int(np.flatnonzero(positives)[0]) + 1
        top = positives[:k]
        mrr.append(1.0 / first)
        hit.append(1.0 if top.any() else 0.0)
        recall.append(top.sum() / positives.sum())
        precision.append(top.sum() / k)
    return {"mrr": float(np.mean(mrr)), f"hit@{k}": float(np.mean(hit)),
            f"recall@{k}": float(np.mean(recall)),
            f"precision@{k}": float(np.mean(precision))}


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def micro_auroc(scores, truths) -> float:
    """P(random positive outscores random negative), ties counted half.

    Computed via the Mann-Whitney statistic on midranks over the flattened
    label-score pairs.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truths = np.asarray(truths).ravel().astype(bool)
    n_pos = int(truths.sum())
    n_neg = truths.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC undefined: only one class present")
    ranks = rankdata(scores, method="average")
    u = ranks[truths].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def micro_f1(probs, truths, threshold: float = 0.5) -> float:
    """Micro-pooled F1 at a probability threshold (prediction = p >= t)."""
    predictions = np.asarray(probs) >= threshold
    truths = np.asarray(truths).astype(bool)
    tp = int(np.sum(predictions & truths))
    fp = int(np.sum(predictions & ~truths))
    fn = int(np.sum(~predictions & truths))
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2.0 * tp / (2 * tp + fp + fn)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def perplexity(model, studies) -> float:
    """exp(mean per-token NLL) of reference reports under teacher forcing
    with the S2S mask, including each report's terminating SEP."""
    from .tasks import teacher_forced_nlls
    per_study = teacher_forced_nlls(model, studies)
    flat = [nll for nlls in per_study for nll in nlls]
    if not flat:
        raise DataError("no reference tokens to score")
    return float(np.exp(np.mean(flat)))


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypotheses, references, smooth: bool = False) -> float:
    """Corpus-level BLEU with uniform 1..4-gram weights.

    Inputs are aligned lists of token lists (or strings, tokenized here).
    Zero modified precision at any order gives score 0 unless `smooth`
    adds one to that order's numerator and denominator.
    """
    if len(hypotheses) != len(references):
        raise DataError("hypothesis/reference corpora must align")
    if not hypotheses:
        raise DataError("empty corpus")
    hyps = [split_tokens(h) if isinstance(h, str) else list(h) for h in hypotheses]
    refs = [split_tokens(r) if isinstance(r, str) else list(r) for r in references]
    clipped = np.zeros(4)
    totals = np.zeros(4)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(c, ref_counts[g]) for g, c in counts.items())
    precisions = []
    for n in range(4):
        num, den = clipped[n], totals[n]
        if smooth and num == 0:
            num, den = num + 1.0, den + 1.0
        if den == 0 or num == 0:
            return 0.0
        precisions.append(num / den)
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    return float(brevity * math.exp(np.mean(np.log(precisions))))


def clinical_efficacy(generated, references, spec) -> dict:
    """Label both report lists with the rule labeler and micro-pool the
    14-label confusion counts (reference labels are the truth)."""
    if len(generated) != len(references):
        raise DataError("generated/reference lists must align")
    gen_labels = np.stack([rule_labeler(r, spec) for r in generated])
    ref_labels = np.stack([rule_labeler(r, spec) for r in references])
    tp = int(np.sum((gen_labels == 1) & (ref_labels == 1)))
    tn = int(np.sum((gen_labels == 0) & (ref_labels == 0)))
    fp = int(np.sum((gen_labels == 1) & (ref_labels == 0)))
    fn = int(np.sum((gen_labels == 0) & (ref_labels == 1)))
    total = tp + tn + fp + fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": (tp + tn) / total if total else 0.0,
            "precision": precision, "recall": recall, "f1": f1}


# ---------------------------------------------------------------------------
# statistics protocol
# ---------------------------------------------------------------------------

@dataclass
class BootstrapResult:
    mean: float
    std: float
    values: np.ndarray


def bootstrap(metric_fn, items, n: int = 30,
              rng: np.random.Generator | None = None,
              max_retries: int = 100) -> BootstrapResult:
    """n resamples with replacement (same size); mean and population std.

    A resample on which the metric is undefined (raises ValueError or
    DataError) is redrawn up to `max_retries` times, then the error
    propagates.
    """
    items = list(items)
    if len(items) < 2:
        raise DataError("bootstrap needs at least 2 items")
    if rng is None:
        raise DataError("bootstrap needs an explicit rng for reproducibility")
    values = []
    for _ in range(n):
        last_error = None
        for _ in range(max_retries):
            idx = rng.integers(0, len(items), size=len(items))
            try:
                values.append(float(metric_fn([items[i] for i in idx])))
                break
            except (ValueError, DataError) as exc:
                last_error = exc
        else:
            raise DataError(f"metric undefined on {max_retries} consecutive "
                            f"resamples: {last_error}")
    values = np.asarray(values)
    return BootstrapResult(mean=float(values.mean()),
                           std=float(values.std(ddof=0)), values=values)


def t_test(sample_a, sample_b) -> float:
    """Two-sided Welch (unequal-variance) t-test p-value.

    Degenerate cases: both samples constant and equal -> error; both
    constant and unequal -> p = 0.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DataError("t_test needs >= 2 values per sample")
    var_a, var_b = a.var(ddof=1), b.var(ddof=1)
    if var_a == 0.0 and var_b == 0.0:
        if a.mean() == b.mean():
            raise DataError("p-value undefined: both samples constant and equal")
        return 0.0
    se2 = var_a / a.size + var_b / b.size
    t_stat = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2 ** 2 / (
        (var_a / a.size) ** 2 / (a.size - 1)
        + (var_b / b.size) ** 2 / (b.size - 1))
    # survival function of the t distribution, two-sided
    return float(2.0 * stdtr(df, -abs(t_stat)))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricEntry:
    value: float
    mean: float
    std: float
    resamples: np.ndarray
    p_value: float | None = None


@dataclass
class MetricReport:
    """Named metric values with bootstrap statistics and optional
    pairwise p-values against a comparison run."""

    entries: dict = field(default_factory=dict)

    def add(self, name: str, value: float, boot: BootstrapResult,
            p_value: float | None = None) -> None:
        self.entries[name] = MetricEntry(value=value, mean=boot.mean,
                                         std=boot.std, resamples=boot.values,
                                         p_value=p_value)

    def save(self, path_prefix: str) -> tuple:
        """Write `<prefix>.metrics.txt` (one record per metric) and
        `<prefix>.resamples.csv`; returns both paths."""
        text_path = f"{path_prefix}.metrics.txt"
        csv_path = f"{path_prefix}.resamples.csv"
        with open(text_path, "w") as fh:
            fh.write("name\tvalue\tmean\tstd\tp_value\n")
            for name, e in self.entries.items():
                p = "" if e.p_value is None else f"{e.p_value:.6g}"
                fh.write(f"{name}\t{e.value:.6f}\t{e.mean:.6f}\t{e.std:.6f}\t{p}\n")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            n_resamples = (len(next(iter(self.entries.values())).resamples)
                           if self.entries else 0)
            writer.writerow(["name"] + [f"resample_{i}" for i in range(n_resamples)])
            for name, e in self.entries.items():
                writer.writerow([name] + [f"{v:.8g}" for v in e.resamples])
        return text_path, csv_path


def parse_metric_report(path) -> dict:
    """Read back the line-delimited report as {name: {field: value}}."""
    out = {}
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            fields = line.rstrip("\n").split("\t")
            rec = dict(zip(header, fields))
            out[rec["name"]] = {
                "value": float(rec["value"]),
                "mean": float(rec["mean"]),
                "std": float(rec["std"]),
                "p_value": float(rec["p_value"]) if rec.get("p_value") else None,
            }
    return out
