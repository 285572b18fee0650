"""From pixels and token ids to the joint S x d input matrix.

Visual features come from a small patchwise (kernel = stride) conv stack
or a single-stage patch-linear map; either way the image becomes a K x c
grid with row-major grid indices. Each visual row is summed with its
location embedding and the shared vision modality vector, then projected
to the model width. Language rows are token + position + language
modality vector. Special rows (CLS/SEP_V on the vision side, optional
CLS_L and SEP_L on the language side) follow their block's recipe, so
perturbing one modality vector moves exactly that block's rows.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig, VisionConfig
from .errors import ConfigError, DataError
from .masks import MaskScheme, SequenceLayout
from .vocab import CLS_ID, SEP_ID, TokenSequence


@dataclass
class VisualFeatures:
    """K x c grid features with their original grid indices."""

    features: Tensor            # (K, c) or batched (B, K, c)
    grid_dims: tuple            # (rows, cols) of the full grid
    position_ids: np.ndarray    # original row-major grid indices

    @property
    def count(self) -> int:
        return self.features.shape[-2]


@dataclass
class JointInput:
    """Assembled S x d (or B x S x d) input to the encoder."""

    hidden: Tensor
    layout: SequenceLayout


@dataclass(frozen=True)
class EmbeddingTables:
    """Named view over the embedding parameters."""

    tok: Tensor          # (|V|, d)
    pos: Tensor          # (max_len + 2, d) language positions
    loc: Tensor          # (grid_count, c) visual locations
    s_v: Tensor          # (c,) vision modality vector
    s_l: Tensor          # (d,) language modality vector
    vspec: Tensor        # (2, c) CLS / SEP_V embeddings
    vspec_pos: Tensor    # (2, c) their position embeddings
    proj_w: Tensor       # (c, d)
    proj_b: Tensor       # (d,)

    @classmethod
    def from_params(cls, params: dict) -> "EmbeddingTables":
        return cls(tok=params["emb.tok"], pos=params["emb.pos"],
                   loc=params["emb.loc"], s_v=params["emb.sv"],
                   s_l=params["emb.sl"], vspec=params["emb.vspec"],
                   vspec_pos=params["emb.vspec_pos"],
                   proj_w=params["emb.proj.w"], proj_b=params["emb.proj.b"])


def _patchify(x: Tensor, k: int) -> Tensor:
    """[B, C, H, W] -> [B, (H/k)*(W/k), C*k*k] over non-overlapping patches."""
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ConfigError(f"grid {h}x{w} not divisible by stride {k}")
    x = x.reshape(b, c, h // k, k, w // k, k)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // k) * (w // k), c * k * k)


def encode_images(images: Tensor, params: dict, vcfg: VisionConfig) -> VisualFeatures:
    """Run the visual front end over a [B, H, W] batch."""
    b, h, w = images.shape
    if h != vcfg.image_size or w != vcfg.image_size:
        raise DataError(f"expected {vcfg.image_size}x{vcfg.image_size} images, "
                        f"got {h}x{w}")
    x = images.reshape(b, 1, h, w)
    if vcfg.encoder == "patch":
        flat = _patchify(x, vcfg.total_stride)
        feats = flat @ params["vis.patch.w"] + params["vis.patch.b"]
    else:
        side = vcfg.image_size
        for i, stride in enumerate(vcfg.strides):
            flat = _patchify(x, stride)
            out = ad.gelu(flat @ params[f"vis.stage{i}.w"] + params[f"vis.stage{i}.b"])
            side //= stride
            if i + 1 < len(vcfg.strides):
                x = out.reshape(b, side, side, vcfg.channels).transpose(0, 3, 1, 2)
        feats = out
    grid = vcfg.grid_side
    position_ids = np.broadcast_to(np.arange(grid * grid), (b, grid * grid))
    return VisualFeatures(features=feats, grid_dims=(grid, grid),
                          position_ids=np.ascontiguousarray(position_ids))


def encode_image(image: np.ndarray, params: dict, vcfg: VisionConfig) -> VisualFeatures:
    """Single-study wrapper around `encode_images`."""
    batch = encode_images(ad.as_tensor(image[None, :, :]), params, vcfg)
    return VisualFeatures(features=batch.features[0],
                          grid_dims=batch.grid_dims,
                          position_ids=batch.position_ids[0])


def sample_visual(features: VisualFeatures, k: int,
                  rng: np.random.Generator) -> VisualFeatures:
    """Sample k grid rows without replacement, keeping original indices.

    Retained rows keep their original grid position ids so location
    embeddings stay truthful; indices are re-sorted ascending.
    """
    total = features.count
    if not 1 <= k <= total:
        raise DataError(f"sample size k={k} not in 1..{total}")
    batched = features.features.ndim == 3
    if not batched:
        sel = np.sort(rng.choice(total, size=k, replace=False))
        return VisualFeatures(features=features.features[sel],
                              grid_dims=features.grid_dims,
                              position_ids=features.position_ids[sel])
    b = features.features.shape[0]
    sel = np.stack([np.sort(rng.choice(total, size=k, replace=False))
                    for _ in range(b)])
    rows = np.arange(b)[:, None]
    return VisualFeatures(features=features.features[rows, sel],
                          grid_dims=features.grid_dims,
                          position_ids=features.position_ids[rows, sel])


def _tile(row: Tensor, batch: int, width: int) -> Tensor:
    """Broadcast a (w,) or (1, w) row to a [batch, 1, w] block."""
    zeros = Tensor(np.zeros((batch, 1, width), dtype=row.dtype))
    return zeros + row.reshape(1, 1, width)


def embed_joint_batch(visual: VisualFeatures, token_ids: np.ndarray,
                      params: dict, layout: SequenceLayout) -> JointInput:
    """Assemble [B, S, d] joint inputs for a batch."""
    tables = EmbeddingTables.from_params(params)
    feats = visual.features
    if feats.ndim != 3:
        raise DataError("embed_joint_batch expects batched features")
    b, k, c = feats.shape
    token_ids = np.asarray(token_ids)
    n = token_ids.shape[1]
    if k != layout.n_visual or n != layout.n_language:
        raise DataError(
            f"layout mismatch: layout has K={layout.n_visual}, N={layout.n_language}; "
            f"inputs have K={k}, N={n}")
    d = tables.tok.shape[1]

    # vision block, assembled in c-space then projected to d
    vis_rows = feats + ad.take(tables.loc, visual.position_ids) + tables.s_v
    cls_row = _tile(tables.vspec[0] + tables.vspec_pos[0] + tables.s_v, b, c)
    sep_v_row = _tile(tables.vspec[1] + tables.vspec_pos[1] + tables.s_v, b, c)
    v_block = ad.concat([cls_row, vis_rows, sep_v_row], axis=1)
    v_block = v_block @ tables.proj_w + tables.proj_b

    # language block in d-space; relative position 0 is CLS_L when present
    offset = 1 if layout.has_language_cls else 0
    parts = [v_block]
    if layout.has_language_cls:
        parts.append(_tile(tables.tok[CLS_ID] + tables.pos[0] + tables.s_l, b, d))
    tok_rows = ad.take(tables.tok, token_ids) + tables.pos[offset : offset + n] \
        + tables.s_l
    parts.append(tok_rows)
    parts.append(_tile(tables.tok[SEP_ID] + tables.pos[offset + n] + tables.s_l, b, d))
    hidden = ad.concat(parts, axis=1)
    return JointInput(hidden=hidden, layout=layout)


def embed_joint(visual: VisualFeatures, tokens: TokenSequence, params: dict,
                layout: SequenceLayout) -> JointInput:
    """Single-study assembly; returns an (S, d) matrix."""
    feats = visual.features
    batched = VisualFeatures(features=feats.reshape(1, *feats.shape),
                             grid_dims=visual.grid_dims,
                             position_ids=visual.position_ids[None, :])
    joint = embed_joint_batch(batched, tokens.ids[None, :], params, layout)
    return JointInput(hidden=joint.hidden[0], layout=layout)


def scheme_for_config(config: RunConfig) -> MaskScheme:
    """The layout-determining scheme family of a configured model."""
    return (MaskScheme.NON_CROSSING if config.scheme == "noncross"
            else MaskScheme.BI)
