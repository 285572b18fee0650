"""Task evaluation with the bootstrap/compare protocol.

Expensive per-item quantities (probabilities, trial rankings, per-token
NLLs, generated reports) are computed once; the 30 bootstrap resamples
then redraw items with replacement and recompute each metric. Under
--compare both models share the same derived resample streams, so paired
differences are not polluted by resampling noise, and each metric gets a
Welch p-value.
"""

from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, default_finding_spec
from .errors import ConfigError, DataError
from .metrics import (BootstrapResult, MetricReport, bleu4, bootstrap,
                      clinical_efficacy, micro_auroc, micro_f1, perplexity,
                      ranking_metrics, t_test)
from .model import JointModel
from .rng import derive_rng
from .tasks import (build_answer_table, build_trials, classify_probs,
                    generate_batch, run_trial, teacher_forced_nlls,
                    _token_matrix, _eval_forward)
from .vocab import detokenize

DEFAULT_BOOTSTRAP_N = 30


@dataclass
class TaskEvaluation:
    """Per-item caches plus the metric functions that consume them."""

    items: list
    metric_fns: dict = field(default_factory=dict)  # name -> fn(items)

    def into_report(self, n_boot: int, seed: int,
                    compare: "TaskEvaluation | None" = None) -> MetricReport:
        report = MetricReport()
        for name, fn in self.metric_fns.items():
            rng = derive_rng(seed, f"eval.boot.{name}")
            boot = bootstrap(fn, self.items, n=n_boot, rng=rng)
            p_value = None
            if compare is not None:
                rng_b = derive_rng(seed, f"eval.boot.{name}")
                boot_b = bootstrap(compare.metric_fns[name], compare.items,
                                   n=n_boot, rng=rng_b)
                p_value = t_test(boot.values, boot_b.values)
            report.add(name, float(fn(self.items)), boot, p_value)
        return report


# ---------------------------------------------------------------------------
# per-task evaluations
# ---------------------------------------------------------------------------

def prepare_cls(model: JointModel, corpus: Corpus, split: str = "test") -> TaskEvaluation:
    studies = corpus.split(split)
    if not studies:
        raise DataError(f"no studies in split {split!r}")
    probs = classify_probs(model, np.stack([s.image for s in studies]),
                           [s.report for s in studies])
    labels = np.stack([s.labels for s in studies])
    items = list(zip(probs, labels))
    return TaskEvaluation(items=items, metric_fns={
        "auroc": lambda it: micro_auroc([p for p, _ in it], [l for _, l in it]),
        "f1": lambda it: micro_f1(np.stack([p for p, _ in it]),
                                  np.stack([l for _, l in it])),
    })


def prepare_retrieval(model: JointModel, corpus: Corpus, direction: str,
                      split: str = "test", n_trials: int = 100,
                      n_candidates: int = 100, seed: int = 0) -> TaskEvaluation:
    studies = corpus.split(split)
    trials = build_trials(studies, direction, derive_rng(seed, f"trials.{direction}"),
                          n_candidates=n_candidates, n_trials=n_trials)
    results = [run_trial(model, trial, corpus) for trial in trials]

    def metric(name):
        return lambda items: ranking_metrics(items)[name]

    fns = {f"{direction}_{m}": metric(m)
           for m in ("mrr", "hit@5", "recall@5", "precision@5")}
    return TaskEvaluation(items=results, metric_fns=fns)


def prepare_vqa(model: JointModel, corpus: Corpus, split: str = "test") -> TaskEvaluation:
    items = corpus.vqa_split(split)
    if not items:
        raise DataError(f"no VQA items in split {split!r}")
    answers = build_answer_table(corpus.vqa_split("train"))
    index = {a: i for i, a in enumerate(answers)}
    images = np.stack([corpus.by_id(q.study_id).image for q in items])
    ids = _token_matrix(model, [q.question for q in items])
    ctx, _ = _eval_forward(model, images, ids, model.understanding_scheme())
    logits = model.vqa_logits(ctx).data
    pred = np.argmax(logits, axis=1)
    rows = [(q.qtype, index.get(q.answer) is not None
             and pred[i] == index[q.answer]) for i, q in enumerate(items)]

    def accuracy(qtype):
        def fn(rows_):
            hits = [ok for qt, ok in rows_ if qt == qtype]
            if not hits:
                raise ValueError(f"no {qtype} questions in resample")
            return float(np.mean(hits))
        return fn

    return TaskEvaluation(items=rows, metric_fns={
        "acc_closed": accuracy("closed"), "acc_open": accuracy("open")})


def prepare_gen(model: JointModel, corpus: Corpus, split: str = "test",
                max_len: int | None = None, chunk: int = 64) -> TaskEvaluation:
    studies = corpus.split(split)
    if not studies:
        raise DataError(f"no studies in split {split!r}")
    spec = corpus.spec or default_finding_spec()
    nll_lists = teacher_forced_nlls(model, studies)
    generated = []
    for start in range(0, len(studies), chunk):
        batch = studies[start : start + chunk]
        states = generate_batch(model, np.stack([s.image for s in batch]),
                                max_len=max_len)
        generated.extend(detokenize(st.ids, model.vocab) for st in states)
    items = [
        {"nlls": nll_lists[i], "generated": generated[i],
         "reference": studies[i].report}
        for i in range(len(studies))
    ]

    def ppl(items_):
        flat = [v for it in items_ for v in it["nlls"]]
        if not flat:
            raise ValueError("no reference tokens in resample")
        return float(np.exp(np.mean(flat)))

    def bleu(items_):
        return bleu4([it["generated"] for it in items_],
                     [it["reference"] for it in items_])

    def efficacy(key):
        return lambda items_: clinical_efficacy(
            [it["generated"] for it in items_],
            [it["reference"] for it in items_], spec)[key]

    return TaskEvaluation(items=items, metric_fns={
        "perplexity": ppl, "bleu4": bleu,
        "ce_accuracy": efficacy("accuracy"), "ce_precision": efficacy("precision"),
        "ce_recall": efficacy("recall"), "ce_f1": efficacy("f1")})


def evaluate_task(task: str, model: JointModel, corpus: Corpus,
                  split: str = "test", n_boot: int = DEFAULT_BOOTSTRAP_N,
                  seed: int = 0, compare_model: JointModel | None = None,
                  n_trials: int = 100, max_len: int | None = None) -> MetricReport:
    """Evaluate one task, optionally against a second checkpoint."""

    def prepare(m):
        if task == "cls":
            return [prepare_cls(m, corpus, split)]
        if task == "retrieval":
            return [prepare_retrieval(m, corpus, d, split, n_trials=n_trials,
                                      seed=seed) for d in ("r2i", "i2r")]
        if task == "vqa":
            return [prepare_vqa(m, corpus, split)]
        if task == "gen":
            return [prepare_gen(m, corpus, split, max_len=max_len)]
        raise ConfigError(f"unknown eval task {task!r}")

    evals = prepare(model)
    compare_evals = prepare(compare_model) if compare_model is not None else \
        [None] * len(evals)
    merged = MetricReport()
    for evaluation, other in zip(evals, compare_evals):
        report = evaluation.into_report(n_boot, seed, compare=other)
        merged.entries.update(report.entries)
    return merged


# `perplexity` is re-exported for callers that want the plain scalar
__all__ = ["TaskEvaluation", "evaluate_task", "prepare_cls", "prepare_gen",
           "prepare_retrieval", "prepare_vqa", "perplexity"]
