"""Additive self-attention masks over a joint vision+language sequence.

The joint sequence is laid out as

    [CLS, v_1 .. v_K, SEP_V, (CLS_L,) w_1 .. w_N, SEP_L]

where CLS, the visual positions and SEP_V form the vision block (V-block)
and everything after SEP_V forms the language block (L-block). CLS_L only
exists for the non-crossing scheme, which needs a language-side summary
token because its vision CLS never sees the report.

Four schemes are supported:

  BI           every position attends everywhere.
  S2S          V-block rows attend only V-block keys; L-block rows attend
               every V-block key plus L-block keys at positions <= their
               own (inclusive causal).
  BAR          like S2S except V-block rows attend everywhere, so vision
               features mix with language while generation stays causal.
  NON_CROSSING V-block rows attend V-block keys, L-block rows attend
               L-block keys, both bidirectionally; no cross-modal edges.

Masks are additive: 0.0 where attention is allowed and a large negative
constant where it is blocked, so they can be summed into attention logits
before the softmax.
"""

import enum
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

#: Additive constant for blocked positions. Finite (not -inf) so the
#: softmax stays well-defined; large enough that exp(NEG - rowmax)
#: underflows to zero in 32-bit.
DEFAULT_NEG = -1.0e9


class MaskScheme(enum.Enum):
    BI = "bi"
    S2S = "s2s"
    BAR = "bar"
    NON_CROSSING = "noncross"

    @classmethod
    def from_name(cls, name: str) -> "MaskScheme":
        for scheme in cls:
            if scheme.value == name:
                return scheme
        raise ConfigError(f"unknown mask scheme {name!r}; expected one of "
                          f"{[s.value for s in cls]}")


@dataclass(frozen=True)
class MixedSchedule:
    """Per-batch mask alternation used during pre-training."""

    s2s_prob: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.s2s_prob <= 1.0:
            raise ConfigError(f"s2s_prob must be in [0, 1], got {self.s2s_prob}")


@dataclass(frozen=True)
class SequenceLayout:
    """Token-block geometry of one joint sequence.

    Positions: CLS at 0, visual features at 1..K, SEP_V at K+1, then
    (for non-crossing only) CLS_L, then the N language positions, then
    SEP_L last. S = K + N + 3, or K + N + 4 with CLS_L.
    """

    n_visual: int
    n_language: int
    has_language_cls: bool = False

    def __post_init__(self):
        if self.n_visual < 1 or self.n_language < 1:
            raise ConfigError(
                f"degenerate layout: need K >= 1 and N >= 1, got "
                f"K={self.n_visual}, N={self.n_language}")

    @property
    def seq_len(self) -> int:
        return self.n_visual + self.n_language + 3 + int(self.has_language_cls)

    @property
    def cls_pos(self) -> int:
        return 0

    @property
    def visual_positions(self) -> range:
        return range(1, 1 + self.n_visual)

    @property
    def sep_v_pos(self) -> int:
        return self.n_visual + 1

    @property
    def language_cls_pos(self):
        return self.n_visual + 2 if self.has_language_cls else None

    @property
    def language_positions(self) -> range:
        start = self.n_visual + 2 + int(self.has_language_cls)
        return range(start, start + self.n_language)

    @property
    def sep_l_pos(self) -> int:
        return self.seq_len - 1

    def v_block(self) -> np.ndarray:
        """Boolean membership of the vision block (CLS, visuals, SEP_V)."""
        member = np.zeros(self.seq_len, dtype=bool)
        member[: self.sep_v_pos + 1] = True
        return member

    def l_block(self) -> np.ndarray:
        """Boolean membership of the language block (CLS_L?, tokens, SEP_L)."""
        return ~self.v_block()


@dataclass(frozen=True)
class AttentionMask:
    """S x S additive mask: 0 where allowed, `neg` where blocked."""

    matrix: np.ndarray
    layout: SequenceLayout
    scheme: MaskScheme
    neg: float = DEFAULT_NEG
    # matrix is derived data; keep dataclass comparisons on the inputs
    _ignore: None = field(default=None, repr=False, compare=False)

    def allowed(self) -> np.ndarray:
        return self.matrix == 0.0


def build_layout(n_visual: int, n_language: int, scheme: MaskScheme) -> SequenceLayout:
    """Lay out a joint sequence of K visual and N language positions."""
    return SequenceLayout(
        n_visual=n_visual,
        n_language=n_language,
        has_language_cls=(scheme is MaskScheme.NON_CROSSING),
    )


def build_mask(layout: SequenceLayout, scheme: MaskScheme,
               neg: float = DEFAULT_NEG) -> AttentionMask:
    """Construct the additive mask for `scheme` on `layout`."""
    if (scheme is MaskScheme.NON_CROSSING) != layout.has_language_cls:
        raise ConfigError(
            f"layout/scheme mismatch: scheme {scheme.value} on a layout "
            f"{'with' if layout.has_language_cls else 'without'} CLS_L")
    if not neg < 0:
        raise ConfigError(f"NEG must be negative, got {neg}")

    size = layout.seq_len
    v = layout.v_block()
    l = ~v
    allow = np.zeros((size, size), dtype=bool)

    if scheme is MaskScheme.BI:
        allow[:, :] = True
    elif scheme in (MaskScheme.S2S, MaskScheme.BAR):
        allow[np.ix_(v, v)] = True
        allow[np.ix_(l, v)] = True
        # L-block is contiguous, so inclusive causality within it is a
        # lower-triangular pattern.
        n_l = int(l.sum())
        allow[np.ix_(l, l)] = np.tril(np.ones((n_l, n_l), dtype=bool))
        if scheme is MaskScheme.BAR:
            allow[v, :] = True
    elif scheme is MaskScheme.NON_CROSSING:
        allow[np.ix_(v, v)] = True
        allow[np.ix_(l, l)] = True
    else:  # pragma: no cover
        raise AssertionError(scheme)

    matrix = np.where(allow, 0.0, neg)
    matrix.setflags(write=False)
    return AttentionMask(matrix=matrix, layout=layout, scheme=scheme, neg=neg)


def sample_scheme(schedule: MixedSchedule, rng: np.random.Generator) -> MaskScheme:
    """Draw S2S with probability `s2s_prob`, otherwise BI."""
    return MaskScheme.S2S if rng.random() < schedule.s2s_prob else MaskScheme.BI


def mask_to_csv(mask: AttentionMask) -> str:
    """Render the mask row-major as CSV with entries "0" or "-inf"."""
    out = io.StringIO()
    for row in mask.matrix:
        out.write(",".join("0" if x == 0.0 else "-inf" for x in row))
        out.write("\n")
    return out.getvalue()


def save_mask_csv(mask: AttentionMask, path) -> None:
    with open(path, "w") as fh:
        fh.write(mask_to_csv(mask))
