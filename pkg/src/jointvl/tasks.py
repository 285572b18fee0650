"""Downstream task adapters and their inference procedures.

Understanding tasks (classification, retrieval scoring, VQA) run under
unrestricted attention (non-crossing models keep their own layout);
generation always fine-tunes and decodes under the S2S mask. Decoding is
greedy: append MASK, run the full forward pass, take the argmax at the
MASK position, replace, repeat until SEP or the length cap.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .errors import ConfigError, DataError
from .masks import MaskScheme
from .model import JointModel, add_vqa_head
from .optim import AdamW
from .pretrain import IrmSampler, MlmPolicy, TrainLog, corrupt_mlm, loss_mlm
from .rng import derive_rng
from .vocab import MASK_ID, PAD_ID, SEP_ID, TokenSequence, tokenize

logger = logging.getLogger(__name__)

TASKS = ("cls", "retrieval", "vqa", "gen")


# ---------------------------------------------------------------------------
# shared batched inference helpers
# ---------------------------------------------------------------------------

def _eval_forward(model: JointModel, images, ids, scheme: MaskScheme):
    with ad.no_grad():
        return model.forward_batch(np.asarray(images), np.asarray(ids), scheme)


def _token_matrix(model: JointModel, reports, max_len=None) -> np.ndarray:
    max_len = max_len or model.config.max_len
    return np.stack([tokenize(r, model.vocab, max_len).ids for r in reports])


def classify_probs(model: JointModel, images, reports) -> np.ndarray:
    """Sigmoid probabilities [B, 14] for image/report batches."""
    ids = _token_matrix(model, reports)
    ctx, _ = _eval_forward(model, images, ids, model.understanding_scheme())
    with ad.no_grad():
        return ad.sigmoid(model.classify_logits(ctx)).data


def classify(model: JointModel, image: np.ndarray, report: str) -> np.ndarray:
    """Per-label probabilities for a single study."""
    return classify_probs(model, image[None], [report])[0]


def match_probs(model: JointModel, images, reports) -> np.ndarray:
    ids = _token_matrix(model, reports)
    ctx, layout = _eval_forward(model, images, ids, model.understanding_scheme())
    with ad.no_grad():
        return ad.sigmoid(model.match_logits(ctx, layout)).data


def score_pair(model: JointModel, image: np.ndarray, report: str) -> float:
    """Match probability of one (image, report) pair."""
    return float(match_probs(model, image[None], [report])[0])


# ---------------------------------------------------------------------------
# retrieval trials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalTrial:
    """One 100-candidate ranking problem."""

    query_id: str
    direction: str            # "i2r": image query, report candidates; "r2i" reverse
    candidate_ids: tuple
    positives: np.ndarray     # bool per candidate: label set equals the query's

    def __post_init__(self):
        if self.direction not in ("i2r", "r2i"):
            raise DataError(f"bad direction {self.direction!r}")
        if len(self.candidate_ids) != len(self.positives):
            raise DataError("candidate/positive length mismatch")
        if not bool(np.any(self.positives)):
            raise DataError("trial has no positive candidate")


@dataclass(frozen=True)
class RankedTrialResult:
    """Candidates sorted by descending score (ties: candidate id ascending)."""

    ranked_ids: tuple
    positives: np.ndarray     # aligned with ranked_ids
    scores: np.ndarray


def build_trials(studies, direction: str, rng: np.random.Generator,
                 n_candidates: int = 100, n_trials: int | None = None) -> list:
    """Build ranking trials over a study pool.

    Each query's true partner is always among the candidates; a candidate
    is positive iff its positive-label set equals the query's.
    """
    if len(studies) < n_candidates:
        raise DataError(f"need >= {n_candidates} studies for "
                        f"{n_candidates}-candidate trials, got {len(studies)}")
    keys = [s.label_key() for s in studies]
    queries = range(len(studies)) if n_trials is None else \
        rng.choice(len(studies), size=min(n_trials, len(studies)), replace=False)
    trials = []
    for q in queries:
        others = np.setdiff1d(np.arange(len(studies)), [q])
        chosen = rng.choice(others, size=n_candidates - 1, replace=False)
        pool = np.concatenate([[q], chosen])
        positives = np.array([keys[i] == keys[q] for i in pool])
        trials.append(RetrievalTrial(
            query_id=studies[q].study_id,
            direction=direction,
            candidate_ids=tuple(studies[i].study_id for i in pool),
            positives=positives))
    return trials


def run_trial(model: JointModel, trial: RetrievalTrial, corpus) -> RankedTrialResult:
    """Score all candidates and rank them deterministically."""
    query = corpus.by_id(trial.query_id)
    candidates = [corpus.by_id(cid) for cid in trial.candidate_ids]
    if trial.direction == "i2r":
        images = np.stack([query.image] * len(candidates))
        reports = [c.report for c in candidates]
    else:
        images = np.stack([c.image for c in candidates])
        reports = [query.report] * len(candidates)
    scores = match_probs(model, images, reports)
    order = np.lexsort((np.array(trial.candidate_ids), -scores))
    return RankedTrialResult(
        ranked_ids=tuple(trial.candidate_ids[i] for i in order),
        positives=trial.positives[order],
        scores=scores[order])


# ---------------------------------------------------------------------------
# VQA
# ---------------------------------------------------------------------------

def build_answer_table(vqa_items) -> list:
    """Sorted unique answers of a training split."""
    return sorted({item.answer for item in vqa_items})


def answer(model: JointModel, image: np.ndarray, question: str,
           answers: list) -> np.ndarray:
    """Distribution over the answer table for one question."""
    ids = _token_matrix(model, [question])
    ctx, _ = _eval_forward(model, image[None], ids, model.understanding_scheme())
    with ad.no_grad():
        logits = model.vqa_logits(ctx)
        if logits.shape[1] != len(answers):
            raise DataError(f"answer table size {len(answers)} does not match "
                            f"VQA head width {logits.shape[1]}")
        return ad.softmax(logits, axis=-1).data[0]


def vqa_accuracy(model: JointModel, vqa_items, corpus, answers: list) -> dict:
    """Accuracy split by question type; unseen gold answers count wrong."""
    index = {a: i for i, a in enumerate(answers)}
    correct = {"closed": 0, "open": 0}
    totals = {"closed": 0, "open": 0}
    images = np.stack([corpus.by_id(item.study_id).image for item in vqa_items])
    ids = _token_matrix(model, [item.question for item in vqa_items])
    ctx, _ = _eval_forward(model, images, ids, model.understanding_scheme())
    with ad.no_grad():
        pred = np.argmax(model.vqa_logits(ctx).data, axis=1)
    for i, item in enumerate(vqa_items):
        totals[item.qtype] += 1
        gold = index.get(item.answer)
        if gold is None:
            logger.warning("gold answer %r unseen in training; counted wrong",
                           item.answer)
            continue
        if pred[i] == gold:
            correct[item.qtype] += 1
    return {qtype: (correct[qtype] / totals[qtype] if totals[qtype] else float("nan"))
            for qtype in ("closed", "open")}


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class DecodeState:
    ids: list = field(default_factory=list)
    steps: int = 0
    stopped: bool = False
    stop_reason: str = ""


def generate_batch(model: JointModel, images: np.ndarray,
                   max_len: int | None = None) -> list:
    """Greedy decode for an image batch; returns DecodeStates.

    Every step reruns the full forward pass under the S2S mask with a
    MASK appended; the argmax replaces the MASK and SEP stops the row.
    """
    max_len = max_len or model.config.max_len
    if max_len > model.config.max_len:
        raise ConfigError(f"max_len {max_len} exceeds configured "
                          f"text.max_len {model.config.max_len}")
    b = images.shape[0]
    states = [DecodeState() for _ in range(b)]
    ids = np.full((b, 1), MASK_ID, dtype=np.int64)
    for step in range(max_len):
        ctx, layout = _eval_forward(model, images, ids, MaskScheme.S2S)
        pos = layout.language_positions.start + step
        with ad.no_grad():
            logits = model.mlm_head(ctx.hidden[:, pos]).data
        tokens = np.argmax(logits, axis=1)
        active = np.array([not s.stopped for s in states])
        for row in range(b):
            if not active[row]:
                continue
            states[row].steps += 1
            if tokens[row] == SEP_ID:
                states[row].stopped = True
                states[row].stop_reason = "sep"
                ids[row, step] = PAD_ID
            else:
                states[row].ids.append(int(tokens[row]))
                ids[row, step] = tokens[row]
        if all(s.stopped for s in states):
            break
        if step + 1 < max_len:
            ids = np.concatenate(
                [ids, np.full((b, 1), MASK_ID, dtype=np.int64)], axis=1)
    for state in states:
        if not state.stopped:
            state.stopped = True
            state.stop_reason = "length"
    return states


def generate(model: JointModel, image: np.ndarray,
             max_len: int | None = None) -> tuple:
    """Greedy decode one report; returns (TokenSequence, DecodeState)."""
    state = generate_batch(model, image[None], max_len=max_len)[0]
    ids = np.asarray(state.ids, dtype=np.int64)
    return TokenSequence(ids=ids, true_length=len(ids)), state


def teacher_forced_nlls(model: JointModel, studies, chunk_rows: int = 128) -> list:
    """Per-token reference NLLs under the S2S mask, study by study.

    For a reference of T tokens this builds T (+1 when the stop position
    exists) single-MASK variants — exactly the decode-time computation —
    and reads off -log p(token) at each MASK. The terminating SEP is
    scored at position T.
    """
    max_len = model.config.max_len
    rows = []  # (study_idx, prefix ids tuple, position, target)
    for s_idx, study in enumerate(studies):
        tokens = tokenize(study.report, model.vocab, max_len)
        t = tokens.true_length
        if t == 0:
            continue
        for i in range(t):
            rows.append((s_idx, tuple(tokens.ids[:i]), i, int(tokens.ids[i])))
        if t < max_len:
            rows.append((s_idx, tuple(tokens.ids[:t]), t, SEP_ID))
    nlls = [[] for _ in studies]
    for start in range(0, len(rows), chunk_rows):
        chunk = rows[start : start + chunk_rows]
        width = max(pos for _, _, pos, _ in chunk) + 1
        ids = np.full((len(chunk), width), PAD_ID, dtype=np.int64)
        for r, (_, prefix, pos, _) in enumerate(chunk):
            ids[r, : len(prefix)] = prefix
            ids[r, pos] = MASK_ID
        images = np.stack([studies[s].image for s, _, _, _ in chunk])
        ctx, layout = _eval_forward(model, images, ids, MaskScheme.S2S)
        positions = layout.language_positions.start + np.array(
            [pos for _, _, pos, _ in chunk])
        with ad.no_grad():
            logits = model.mlm_logits_at(ctx, np.arange(len(chunk)), positions)
            log_probs = ad.log_softmax(logits, axis=-1).data
        for r, (s_idx, _, _, target) in enumerate(chunk):
            nlls[s_idx].append(-float(log_probs[r, target]))
    return nlls


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def _trainable(model: JointModel, head_only: bool) -> dict:
    if not head_only:
        return dict(model.params)
    return {k: v for k, v in model.params.items() if k.startswith("head.")}


def _finetune_cls(model: JointModel, studies, config: RunConfig,
                  head_only: bool) -> TrainLog:
    scheme = model.understanding_scheme()
    optimizer = AdamW(_trainable(model, head_only), lr=config["optim.lr"],
                      weight_decay=config["optim.weight_decay"])
    token_cache = _token_matrix(model, [s.report for s in studies])
    labels = np.stack([s.labels for s in studies]).astype(model.config.model.dtype)
    log = TrainLog()
    batch, step = config["train.batch"], 0
    for epoch in range(config["train.epochs"]):
        order = derive_rng(config.seed, "finetune.cls.shuffle", epoch).permutation(
            len(studies))
        for start in range(0, len(studies), batch):
            rows = order[start : start + batch]
            images = np.stack([studies[i].image for i in rows])
            ctx, _ = model.forward_batch(
                images, token_cache[rows], scheme, train=True,
                drop_rng=derive_rng(config.seed, "finetune.cls.drop", step))
            loss = ad.bce_with_logits(model.classify_logits(ctx),
                                      labels[rows]).mean()
            loss.backward()
            optimizer.step({k: p.grad for k, p in optimizer.params.items()
                            if p.grad is not None})
            log.add(step, epoch, scheme, 0.0, float(loss.data))
            step += 1
    return log


def _finetune_retrieval(model: JointModel, studies, config: RunConfig,
                        head_only: bool) -> TrainLog:
    """Binary match classifier on the pooled representation, 1:1 pairs."""
    scheme = model.understanding_scheme()
    optimizer = AdamW(_trainable(model, head_only), lr=config["optim.lr"],
                      weight_decay=config["optim.weight_decay"])
    sampler = IrmSampler(studies)
    token_cache = [tokenize(s.report, model.vocab, config.max_len) for s in studies]
    by_id = {s.study_id: i for i, s in enumerate(studies)}
    log = TrainLog()
    batch, step = config["train.batch"], 0
    for epoch in range(config["train.epochs"]):
        order = derive_rng(config.seed, "finetune.ret.shuffle", epoch).permutation(
            len(studies))
        for start in range(0, len(studies), batch):
            rows = order[start : start + batch]
            rng = derive_rng(config.seed, "finetune.ret.step", step)
            images = np.stack([studies[i].image for i in rows])
            ids = np.empty((len(rows), config.max_len), dtype=np.int64)
            ys = np.empty(len(rows))
            for r, anchor in enumerate(rows):
                example = sampler.sample(rng, anchor_index=int(anchor))
                ys[r] = example.y
                ids[r] = token_cache[by_id[example.report_id]].ids
            ctx, layout = model.forward_batch(
                images, ids, scheme, train=True,
                drop_rng=derive_rng(config.seed, "finetune.ret.drop", step))
            loss = ad.bce_with_logits(model.match_logits(ctx, layout), ys).mean()
            loss.backward()
            optimizer.step({k: p.grad for k, p in optimizer.params.items()
                            if p.grad is not None})
            log.add(step, epoch, scheme, 0.0, float(loss.data))
            step += 1
    return log


def _finetune_vqa(model: JointModel, vqa_items, corpus, config: RunConfig,
                  head_only: bool) -> tuple:
    answers = build_answer_table(vqa_items)
    if "head.vqa.w" not in model.params:
        add_vqa_head(model.params, len(answers), config,
                     derive_rng(config.seed, "vqa-head"))
    scheme = model.understanding_scheme()
    optimizer = AdamW(_trainable(model, head_only), lr=config["optim.lr"],
                      weight_decay=config["optim.weight_decay"])
    index = {a: i for i, a in enumerate(answers)}
    ids_all = _token_matrix(model, [q.question for q in vqa_items])
    gold = np.array([index[q.answer] for q in vqa_items])
    images_all = np.stack([corpus.by_id(q.study_id).image for q in vqa_items])
    log = TrainLog()
    batch, step = config["train.batch"], 0
    for epoch in range(config["train.epochs"]):
        order = derive_rng(config.seed, "finetune.vqa.shuffle", epoch).permutation(
            len(vqa_items))
        for start in range(0, len(vqa_items), batch):
            rows = order[start : start + batch]
            ctx, _ = model.forward_batch(
                images_all[rows], ids_all[rows], scheme, train=True,
                drop_rng=derive_rng(config.seed, "finetune.vqa.drop", step))
            log_probs = ad.log_softmax(model.vqa_logits(ctx), axis=-1)
            loss = -(log_probs[np.arange(len(rows)), gold[rows]]).mean()
            loss.backward()
            optimizer.step({k: p.grad for k, p in optimizer.params.items()
                            if p.grad is not None})
            log.add(step, epoch, scheme, 0.0, float(loss.data))
            step += 1
    return log, answers


def _finetune_gen(model: JointModel, studies, config: RunConfig,
                  head_only: bool) -> TrainLog:
    """Masked-token recovery under the S2S mask, matching pairs only.

    On top of the standard corruption, the first position after the
    report (when it exists) is masked with SEP as its target, so decoding
    learns the stop sign at the position where it will be queried.
    """
    scheme = MaskScheme.S2S
    policy = MlmPolicy.from_config(config)
    optimizer = AdamW(_trainable(model, head_only), lr=config["optim.lr"],
                      weight_decay=config["optim.weight_decay"])
    token_cache = [tokenize(s.report, model.vocab, config.max_len) for s in studies]
    log = TrainLog()
    batch, step = config["train.batch"], 0
    max_len = config.max_len
    for epoch in range(config["train.epochs"]):
        order = derive_rng(config.seed, "finetune.gen.shuffle", epoch).permutation(
            len(studies))
        for start in range(0, len(studies), batch):
            rows = order[start : start + batch]
            rng = derive_rng(config.seed, "finetune.gen.step", step)
            images = np.stack([studies[i].image for i in rows])
            ids = np.empty((len(rows), max_len), dtype=np.int64)
            t_rows, t_cols, t_ids = [], [], []
            for r, s_idx in enumerate(rows):
                corrupted, targets = corrupt_mlm(token_cache[s_idx], policy,
                                                 model.vocab, rng)
                ids[r] = corrupted.ids
                stop = token_cache[s_idx].true_length
                if stop < max_len:
                    ids[r, stop] = MASK_ID
                    targets = targets + [(stop, SEP_ID)]
                for pos, original in targets:
                    t_rows.append(r)
                    t_cols.append(pos)
                    t_ids.append(original)
            ctx, layout = model.forward_batch(
                images, ids, scheme, train=True,
                drop_rng=derive_rng(config.seed, "finetune.gen.drop", step))
            cols = layout.language_positions.start + np.asarray(t_cols)
            logits = model.mlm_logits_at(ctx, np.asarray(t_rows), cols)
            loss = loss_mlm(logits, t_ids)
            loss.backward()
            optimizer.step({k: p.grad for k, p in optimizer.params.items()
                            if p.grad is not None})
            log.add(step, epoch, scheme, float(loss.data), 0.0)
            step += 1
    return log


def finetune(task: str, corpus, model: JointModel, config: RunConfig,
             split: str = "train", head_only: bool = False):
    """Fine-tune `model` in place for one of the four tasks.

    Returns (model, TrainLog) and, for VQA, the answer table as a third
    element. Generation always uses the S2S mask regardless of the
    pre-training scheme; the other tasks use the understanding mask.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    studies = corpus.split(split)
    if not studies:
        raise DataError(f"no studies in split {split!r}")
    if task == "cls":
        return model, _finetune_cls(model, studies, config, head_only)
    if task == "retrieval":
        return model, _finetune_retrieval(model, studies, config, head_only)
    if task == "vqa":
        items = corpus.vqa_split(split)
        if not items:
            raise DataError(f"no VQA items in split {split!r}")
        log, answers = _finetune_vqa(model, items, corpus, config, head_only)
        return model, log, answers
    return model, _finetune_gen(model, studies, config, head_only)
