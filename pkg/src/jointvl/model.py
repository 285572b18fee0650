"""The joint model: named parameters, task heads, batched forward passes.

Parameters live in a flat name -> Tensor map ("emb.tok",
"enc.l2.attn.q.w", "head.cls.w", ...) so checkpoints, optimizers and
gradient checks all key off the same paths. Heads: a vocabulary head for
masked-token recovery and generation, a single-logit match head (fed the
concatenated CLS/CLS_L pair for non-crossing layouts), 14 classification
logits, and an answer-table head added when VQA fine-tuning starts.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .embedding import (VisualFeatures, embed_joint_batch, encode_images,
                        sample_visual)
from .errors import DataError
from .masks import MaskScheme, build_layout, build_mask
from .encoder import ContextualOutput, encoder_forward, layer_norm
from .vocab import Vocabulary

N_LABELS = 14
INIT_STD = 0.02


def _normal(rng, shape, dtype):
    return Tensor(rng.normal(0.0, INIT_STD, size=shape).astype(dtype),
                  requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_params(config: RunConfig, vocab_size: int,
                rng: np.random.Generator) -> dict:
    """Create every trainable tensor for the configured model."""
    mcfg, vcfg = config.model, config.vision
    d, c, dtype = mcfg.hidden, vcfg.channels, mcfg.dtype
    params = {}

    # visual front end
    if vcfg.encoder == "patch":
        params["vis.patch.w"] = _normal(rng, (vcfg.total_stride ** 2, c), dtype)
        params["vis.patch.b"] = _zeros((c,), dtype)
    else:
        in_ch = 1
        for i, stride in enumerate(vcfg.strides):
            params[f"vis.stage{i}.w"] = _normal(rng, (in_ch * stride * stride, c), dtype)
            params[f"vis.stage{i}.b"] = _zeros((c,), dtype)
            in_ch = c

    # embedding tables
    params["emb.tok"] = _normal(rng, (vocab_size, d), dtype)
    params["emb.pos"] = _normal(rng, (config.max_len + 2, d), dtype)
    params["emb.loc"] = _normal(rng, (vcfg.grid_count, c), dtype)
    params["emb.sv"] = _normal(rng, (c,), dtype)
    params["emb.sl"] = _normal(rng, (d,), dtype)
    params["emb.vspec"] = _normal(rng, (2, c), dtype)
    params["emb.vspec_pos"] = _normal(rng, (2, c), dtype)
    params["emb.proj.w"] = _normal(rng, (c, d), dtype)
    params["emb.proj.b"] = _zeros((d,), dtype)

    # encoder stack
    for i in range(mcfg.layers):
        for name in ("q", "k", "v", "o"):
            params[f"enc.l{i}.attn.{name}.w"] = _normal(rng, (d, d), dtype)
            params[f"enc.l{i}.attn.{name}.b"] = _zeros((d,), dtype)
        params[f"enc.l{i}.ln1.g"] = _ones((d,), dtype)
        params[f"enc.l{i}.ln1.b"] = _zeros((d,), dtype)
        params[f"enc.l{i}.ff.w1"] = _normal(rng, (d, mcfg.ff), dtype)
        params[f"enc.l{i}.ff.b1"] = _zeros((mcfg.ff,), dtype)
        params[f"enc.l{i}.ff.w2"] = _normal(rng, (mcfg.ff, d), dtype)
        params[f"enc.l{i}.ff.b2"] = _zeros((d,), dtype)
        params[f"enc.l{i}.ln2.g"] = _ones((d,), dtype)
        params[f"enc.l{i}.ln2.b"] = _zeros((d,), dtype)

    # task heads
    params["head.mlm.dense.w"] = _normal(rng, (d, d), dtype)
    params["head.mlm.dense.b"] = _zeros((d,), dtype)
    params["head.mlm.ln.g"] = _ones((d,), dtype)
    params["head.mlm.ln.b"] = _zeros((d,), dtype)
    params["head.mlm.out.w"] = _normal(rng, (d, vocab_size), dtype)
    params["head.mlm.out.b"] = _zeros((vocab_size,), dtype)
    match_in = 2 * d if config.scheme == "noncross" else d
    params["head.match.w"] = _normal(rng, (match_in, 1), dtype)
    params["head.match.b"] = _zeros((1,), dtype)
    params["head.cls.w"] = _normal(rng, (d, N_LABELS), dtype)
    params["head.cls.b"] = _zeros((N_LABELS,), dtype)
    return params


def add_vqa_head(params: dict, n_answers: int, config: RunConfig,
                 rng: np.random.Generator) -> None:
    dtype = config.model.dtype
    params["head.vqa.w"] = _normal(rng, (config.model.hidden, n_answers), dtype)
    params["head.vqa.b"] = _zeros((n_answers,), dtype)


def validate_params(params: dict) -> None:
    for name, tensor in params.items():
        if not np.isfinite(tensor.data).all():
            raise DataError(f"parameter {name} contains non-finite values")


class JointModel:
    """Config + parameters + vocabulary, with the batched forward passes
    every training loop and task adapter shares."""

    def __init__(self, config: RunConfig, params: dict, vocab: Vocabulary):
        self.config = config
        self.params = params
        self.vocab = vocab

    @classmethod
    def create(cls, config: RunConfig, vocab: Vocabulary,
               rng: np.random.Generator) -> "JointModel":
        return cls(config, init_params(config, len(vocab), rng), vocab)

    # ---- schemes ---------------------------------------------------------
    def understanding_scheme(self) -> MaskScheme:
        """Mask used for CLS-based prediction: unrestricted attention,
        except for non-crossing models whose layout has no cross edges."""
        return (MaskScheme.NON_CROSSING if self.config.scheme == "noncross"
                else MaskScheme.BI)

    # ---- forward ---------------------------------------------------------
    def forward_batch(self, images: np.ndarray, token_ids: np.ndarray,
                      scheme: MaskScheme, *, train: bool = False,
                      drop_rng: np.random.Generator | None = None,
                      sample_k: int | None = None,
                      sample_rng: np.random.Generator | None = None,
                      collect_attention: bool = False):
        """Encode a [B,H,W] image batch and [B,N] token batch.

        Returns (ContextualOutput, SequenceLayout). `sample_k` subsamples
        the visual grid (pre-training); None keeps the full grid.
        """
        mcfg = self.config.model
        images = Tensor(np.asarray(images, dtype=mcfg.dtype))
        feats = encode_images(images, self.params, self.config.vision)
        if sample_k is not None and sample_k < feats.count:
            if sample_rng is None:
                raise ValueError("sample_k given without sample_rng")
            feats = sample_visual(feats, sample_k, sample_rng)
        layout = build_layout(feats.count, token_ids.shape[1], scheme)
        joint = embed_joint_batch(feats, token_ids, self.params, layout)
        mask = build_mask(layout, scheme, neg=mcfg.neg)
        ctx = encoder_forward(joint.hidden, mask, self.params, mcfg,
                              train=train, drop_rng=drop_rng,
                              collect_attention=collect_attention)
        return ctx, layout

    # ---- heads -----------------------------------------------------------
    def mlm_head(self, rows: Tensor) -> Tensor:
        """Vocabulary logits for a [T, d] (or [B, N, d]) stack of rows."""
        p = self.params
        h = ad.gelu(rows @ p["head.mlm.dense.w"] + p["head.mlm.dense.b"])
        h = layer_norm(h, p["head.mlm.ln.g"], p["head.mlm.ln.b"])
        return h @ p["head.mlm.out.w"] + p["head.mlm.out.b"]

    def mlm_logits_at(self, ctx: ContextualOutput, batch_idx: np.ndarray,
                      positions: np.ndarray) -> Tensor:
        """Vocabulary logits at (batch, position) pairs: [T, |V|]."""
        rows = ctx.hidden[np.asarray(batch_idx), np.asarray(positions)]
        return self.mlm_head(rows)

    def pooled(self, ctx: ContextualOutput, layout) -> Tensor:
        """CLS row, concatenated with CLS_L for non-crossing layouts."""
        cls = ctx.hidden[:, 0]
        if layout.has_language_cls:
            cls = ad.concat([cls, ctx.hidden[:, layout.language_cls_pos]], axis=-1)
        return cls

    def match_logits(self, ctx: ContextualOutput, layout) -> Tensor:
        p = self.params
        out = self.pooled(ctx, layout) @ p["head.match.w"] + p["head.match.b"]
        return out.reshape(out.shape[0])

    def classify_logits(self, ctx: ContextualOutput) -> Tensor:
        p = self.params
        return ctx.hidden[:, 0] @ p["head.cls.w"] + p["head.cls.b"]

    def vqa_logits(self, ctx: ContextualOutput) -> Tensor:
        p = self.params
        if "head.vqa.w" not in p:
            raise DataError("model has no VQA head; fine-tune on vqa first")
        return ctx.hidden[:, 0] @ p["head.vqa.w"] + p["head.vqa.b"]
