"""Pre-training: masked-token recovery plus image-report matching.

Per step the loop samples a mask scheme (fixed, or S2S/Bi alternation for
the mixed schedule), pairs each anchor image with its own report or a
label-incompatible one at a 1:1 rate, corrupts the matching reports'
tokens, and minimizes the summed losses with decoupled-weight-decay Adam.
Masked-token recovery is computed only on matching pairs; recovering
tokens conditioned on a mismatched image would only inject noise.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .errors import ConfigError, DataError, NumericError
from .masks import MaskScheme, MixedSchedule, sample_scheme
from .model import JointModel
from .optim import AdamW
from .rng import derive_rng
from .vocab import MASK_ID, TokenSequence, Vocabulary, tokenize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MlmPolicy:
    """Token corruption policy: select, then mask/randomize/keep."""

    select_rate: float = 0.15
    mask_prob: float = 0.8
    random_prob: float = 0.1
    keep_prob: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.select_rate < 1.0:
            raise ConfigError(f"select_rate must be in [0, 1), got {self.select_rate}")
        total = self.mask_prob + self.random_prob + self.keep_prob
        if abs(total - 1.0) > 1e-9 or min(self.mask_prob, self.random_prob,
                                          self.keep_prob) < 0:
            raise ConfigError("mask/random/keep probabilities must be "
                              f"non-negative and sum to 1, got {total}")

    @classmethod
    def from_config(cls, config: RunConfig) -> "MlmPolicy":
        mask_p, rand_p = config["mlm.mask_prob"], config["mlm.rand_prob"]
        return cls(select_rate=config["mlm.rate"], mask_prob=mask_p,
                   random_prob=rand_p, keep_prob=1.0 - mask_p - rand_p)


def corrupt_mlm(tokens: TokenSequence, policy: MlmPolicy, vocab: Vocabulary,
                rng: np.random.Generator):
    """Corrupt a token sequence for masked-token recovery.

    Each real (non-pad) token is independently selected with
    `select_rate`; selected tokens become MASK / a random regular token /
    stay put with the policy's probabilities. Returns the corrupted
    sequence and [(position, original_id)] targets.
    """
    if tokens.true_length < 1:
        raise DataError("cannot corrupt an empty token sequence")
    ids = tokens.ids.copy()
    n = tokens.true_length
    selected = np.flatnonzero(rng.random(n) < policy.select_rate)
    targets = []
    for pos in selected:
        original = int(ids[pos])
        action = rng.random()
        if action < policy.mask_prob:
            ids[pos] = MASK_ID
        elif action < policy.mask_prob + policy.random_prob:
            ids[pos] = vocab.random_regular_id(rng)
        # else: keep the original token
        targets.append((int(pos), original))
    return TokenSequence(ids=ids, true_length=tokens.true_length), targets


def loss_mlm(logits: Tensor, target_ids) -> Tensor:
    """Mean negative log-likelihood of the original ids under `logits`.

    `logits` is [T, |V|] aligned with `target_ids`; zero targets yield a
    zero loss (flagged in the log, not an error).
    """
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if target_ids.size == 0:
        logger.warning("loss_mlm called with zero targets; returning 0")
        return Tensor(np.zeros((), dtype=logits.dtype))
    if not np.isfinite(logits.data).all():
        raise NumericError("non-finite logits in masked-token loss")
    log_probs = ad.log_softmax(logits, axis=-1)
    picked = log_probs[np.arange(target_ids.size), target_ids]
    return -picked.mean()


@dataclass(frozen=True)
class IrmExample:
    """An (image, report) pair with its match label."""

    anchor_id: str
    report_id: str
    report: str
    y: int


class IrmSampler:
    """1:1 matching / non-matching pair sampler.

    Non-matching reports come uniformly from studies whose positive-label
    set differs from the anchor's, so a "negative" can never be a
    semantically identical report.
    """

    def __init__(self, studies):
        if not studies:
            raise DataError("empty study list")
        self.studies = list(studies)
        self._keys = [s.label_key() for s in self.studies]
        if len(set(self._keys)) < 2:
            raise DataError("no valid negative: all studies share one label set")

    def sample(self, rng: np.random.Generator, anchor_index: int | None = None,
               force_y: int | None = None) -> IrmExample:
        if anchor_index is None:
            anchor_index = int(rng.integers(len(self.studies)))
        anchor = self.studies[anchor_index]
        y = int(rng.random() < 0.5) if force_y is None else force_y
        if y == 1:
            return IrmExample(anchor_id=anchor.study_id, report_id=anchor.study_id,
                              report=anchor.report, y=1)
        key = self._keys[anchor_index]
        for _ in range(10_000):
            j = int(rng.integers(len(self.studies)))
            if self._keys[j] != key:
                other = self.studies[j]
                return IrmExample(anchor_id=anchor.study_id,
                                  report_id=other.study_id,
                                  report=other.report, y=0)
        # pathological key skew: fall back to a uniform draw over the
        # explicit complement
        pool = [j for j, k in enumerate(self._keys) if k != key]
        if not pool:
            raise DataError("no valid negative: every study shares the "
                            "anchor's label set")
        other = self.studies[pool[int(rng.integers(len(pool)))]]
        return IrmExample(anchor_id=anchor.study_id, report_id=other.study_id,
                          report=other.report, y=0)


def sample_irm(studies, rng: np.random.Generator,
               anchor_index: int | None = None) -> IrmExample:
    """One-shot wrapper over IrmSampler for a single draw."""
    return IrmSampler(studies).sample(rng, anchor_index=anchor_index)


def loss_irm(match_logit: Tensor, y) -> Tensor:
    """Binary cross-entropy on sigmoid(logit), in stable logit form."""
    return ad.bce_with_logits(match_logit, np.asarray(y)).mean()


SCHEME_BY_NAME = {
    "bi": MaskScheme.BI,
    "s2s": MaskScheme.S2S,
    "bar": MaskScheme.BAR,
    "noncross": MaskScheme.NON_CROSSING,
}


@dataclass
class TrainLog:
    """Loss curve rows plus scheme usage counts."""

    rows: list = field(default_factory=list)
    scheme_counts: dict = field(default_factory=dict)

    def add(self, step: int, epoch: int, scheme: MaskScheme, mlm: float,
            irm: float) -> None:
        self.rows.append({"step": step, "epoch": epoch, "scheme": scheme.value,
                          "mlm_loss": mlm, "irm_loss": irm})
        self.scheme_counts[scheme.value] = self.scheme_counts.get(scheme.value, 0) + 1

    def epoch_mean(self, epoch: int) -> float:
        vals = [r["mlm_loss"] + r["irm_loss"] for r in self.rows
                if r["epoch"] == epoch]
        return float(np.mean(vals)) if vals else float("nan")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["step", "epoch", "scheme", "mlm_loss", "irm_loss"])
            writer.writeheader()
            writer.writerows(self.rows)


def _batch_scheme(config: RunConfig, schedule: MixedSchedule,
                  rng: np.random.Generator) -> MaskScheme:
    if config.scheme == "bi_s2s":
        return sample_scheme(schedule, rng)
    return SCHEME_BY_NAME[config.scheme]


def pretrain(studies, vocab: Vocabulary, config: RunConfig,
             epoch_callback=None) -> tuple:
    """Run the pre-training loop; returns (JointModel, TrainLog).

    Fully seed-deterministic: shuffling, pairing, corruption, visual
    sampling and dropout all derive from (config seed, purpose, step).
    `epoch_callback(epoch, model)` runs after each epoch (checkpointing).
    """
    model = JointModel.create(config, vocab, derive_rng(config.seed, "init"))
    return _train_mlm_irm(model, studies, config, epoch_callback=epoch_callback)


def _train_mlm_irm(model: JointModel, studies, config: RunConfig,
                   epoch_callback=None, rng_tag: str = "pretrain") -> tuple:
    """Shared MLM+IRM loop (pre-training, retrieval fine-tuning)."""
    vocab = model.vocab
    policy = MlmPolicy.from_config(config)
    schedule = MixedSchedule(s2s_prob=config["pretrain.s2s_prob"])
    sampler = IrmSampler(studies)
    optimizer = AdamW(model.params, lr=config["optim.lr"],
                      weight_decay=config["optim.weight_decay"])
    token_cache = [tokenize(s.report, vocab, config.max_len) for s in studies]
    by_id = {s.study_id: i for i, s in enumerate(studies)}
    sample_k = config.vision.sample_k
    full_k = config.vision.grid_count
    log = TrainLog()
    batch_size = config["train.batch"]
    step = 0
    for epoch in range(config["train.epochs"]):
        order = derive_rng(config.seed, f"{rng_tag}.shuffle", epoch).permutation(
            len(studies))
        for start in range(0, len(studies), batch_size):
            anchors = order[start : start + batch_size]
            rng = derive_rng(config.seed, f"{rng_tag}.step", step)
            scheme = _batch_scheme(config, schedule, rng)

            images = np.stack([studies[i].image for i in anchors])
            ids = np.empty((len(anchors), config.max_len), dtype=np.int64)
            ys = np.empty(len(anchors), dtype=np.int64)
            target_rows, target_cols, target_ids = [], [], []
            for row, anchor in enumerate(anchors):
                example = sampler.sample(rng, anchor_index=int(anchor))
                ys[row] = example.y
                if example.y == 1:
                    corrupted, targets = corrupt_mlm(token_cache[anchor], policy,
                                                     vocab, rng)
                    ids[row] = corrupted.ids
                    for pos, original in targets:
                        target_rows.append(row)
                        target_cols.append(pos)
                        target_ids.append(original)
                else:
                    ids[row] = token_cache[by_id[example.report_id]].ids

            ctx, layout = model.forward_batch(
                images, ids, scheme, train=True,
                drop_rng=derive_rng(config.seed, f"{rng_tag}.drop", step),
                sample_k=sample_k if sample_k < full_k else None,
                sample_rng=derive_rng(config.seed, f"{rng_tag}.vis", step))

            if target_rows:
                cols = layout.language_positions.start + np.asarray(target_cols)
                logits = model.mlm_logits_at(ctx, np.asarray(target_rows), cols)
                mlm = loss_mlm(logits, target_ids)
            else:
                mlm = Tensor(np.zeros((), dtype=model.config.model.dtype))
            irm = loss_irm(model.match_logits(ctx, layout), ys)
            loss = mlm + irm
            if not np.isfinite(loss.data):
                raise NumericError(f"training diverged at step {step}")
            loss.backward()
            grads = {name: p.grad for name, p in model.params.items()
                     if p.grad is not None}
            optimizer.step(grads)
            log.add(step, epoch, scheme, float(mlm.data), float(irm.data))
            step += 1
        if epoch_callback is not None:
            epoch_callback(epoch, model)
    return model, log
