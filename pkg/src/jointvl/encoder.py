"""Masked multi-head transformer encoder.

Post-normalization block order by default (pre-norm behind a config
flag), GELU feed-forward, dropout on attention weights and feed-forward
outputs in train mode only. Every attention row softmaxes over the
additive mask, so blocked weights underflow to zero; a finite-ness check
after each block names the failing layer instead of propagating NaNs.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import NumericError
from .masks import AttentionMask


@dataclass
class ContextualOutput:
    """Encoder output: [.., S, d] hidden states, plus per-layer per-head
    attention tensors when collection was requested."""

    hidden: Tensor
    attentions: list = field(default_factory=list)  # [layers] of [B,h,S,S]


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b, folding leading axes into one GEMM for speed."""
    if x.ndim == 2:
        return x @ w + b
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    return (flat @ w + b).reshape(*lead, w.shape[-1])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return ad.layernorm(x, gain, bias, eps=eps)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; caller guarantees rng is provided when active."""
    if rate <= 0.0:
        return x
    # float32 uniforms are plenty for a keep/drop decision and half the cost
    keep = (rng.random(x.shape, dtype=np.float32) >= rate)
    return x * Tensor(keep.astype(x.data.dtype) / (1.0 - rate))


def attention(q: Tensor, k: Tensor, v: Tensor, mask) -> tuple:
    """softmax(Q Kᵀ / sqrt(d_k) + M) V with row-max stabilization.

    Accepts an AttentionMask or a raw additive matrix; returns the output
    and the post-softmax weights. Leading batch/head axes broadcast.
    """
    matrix = mask.matrix if isinstance(mask, AttentionMask) else np.asarray(mask)
    d_k = q.shape[-1]
    logits = q @ k.swapaxes(-1, -2) * (1.0 / np.sqrt(d_k)) + Tensor(matrix)
    weights = ad.softmax(logits, axis=-1)
    return weights @ v, weights


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def multi_head_attention(x: Tensor, params: dict, prefix: str, mask: AttentionMask,
                         cfg: ModelConfig, train: bool,
                         drop_rng) -> tuple:
    q = _split_heads(linear(x, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"]), cfg.heads)
    k = _split_heads(linear(x, params[f"{prefix}.k.w"], params[f"{prefix}.k.b"]), cfg.heads)
    v = _split_heads(linear(x, params[f"{prefix}.v.w"], params[f"{prefix}.v.b"]), cfg.heads)
    logits = q @ k.swapaxes(-1, -2) * (1.0 / np.sqrt(cfg.head_dim)) + Tensor(mask.matrix)
    weights = ad.softmax(logits, axis=-1)
    # dropout acts on the attention weights themselves
    attn = dropout(weights, cfg.dropout, drop_rng) if train else weights
    out = linear(_merge_heads(attn @ v), params[f"{prefix}.o.w"], params[f"{prefix}.o.b"])
    return out, weights


def _feed_forward(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = ad.gelu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def encoder_forward(joint: Tensor, mask: AttentionMask, params: dict,
                    cfg: ModelConfig, train: bool = False,
                    drop_rng: np.random.Generator | None = None,
                    collect_attention: bool = False) -> ContextualOutput:
    """Run the L stacked blocks over [B, S, d] inputs."""
    if train and cfg.dropout > 0.0 and drop_rng is None:
        raise ValueError("train-mode forward with dropout needs a drop_rng")
    x = joint
    attentions = []
    for i in range(cfg.layers):
        attn_prefix = f"enc.l{i}.attn"
        ff_prefix = f"enc.l{i}.ff"
        if cfg.prenorm:
            a, weights = multi_head_attention(
                layer_norm(x, params[f"enc.l{i}.ln1.g"], params[f"enc.l{i}.ln1.b"]),
                params, attn_prefix, mask, cfg, train, drop_rng)
            x = x + (dropout(a, cfg.dropout, drop_rng) if train else a)
            f = _feed_forward(
                layer_norm(x, params[f"enc.l{i}.ln2.g"], params[f"enc.l{i}.ln2.b"]),
                params, ff_prefix)
            x = x + (dropout(f, cfg.dropout, drop_rng) if train else f)
        else:
            a, weights = multi_head_attention(x, params, attn_prefix, mask,
                                              cfg, train, drop_rng)
            a = dropout(a, cfg.dropout, drop_rng) if train else a
            x = layer_norm(x + a, params[f"enc.l{i}.ln1.g"], params[f"enc.l{i}.ln1.b"])
            f = _feed_forward(x, params, ff_prefix)
            f = dropout(f, cfg.dropout, drop_rng) if train else f
            x = layer_norm(x + f, params[f"enc.l{i}.ln2.g"], params[f"enc.l{i}.ln2.b"])
        if not np.isfinite(x.data).all():
            raise NumericError(f"non-finite activations after encoder layer {i}")
        if collect_attention:
            attentions.append(weights.data.copy())
    return ContextualOutput(hidden=x, attentions=attentions)
