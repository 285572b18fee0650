"""Flat key=value run configuration.

One text file drives every command. Keys are dotted, every key has a
default, unknown keys are rejected, and `serialize` emits a canonical
form (documented key order) so that parse -> serialize is a fixed point.

Desk-scale defaults keep everything CPU-friendly; the large-scale
reference values (12 layers / 12 heads / 768 hidden, 512px images,
253-token reports, 180-of-256 visual sampling, lr 1e-5, batch 128,
50 epochs) are all expressible.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SCHEMES = ("bi", "s2s", "bar", "noncross", "bi_s2s")


@dataclass(frozen=True)
class ModelConfig:
    """Encoder geometry and numerics."""

    layers: int = 4
    heads: int = 4
    hidden: int = 64
    ff: int = 256
    dropout: float = 0.1
    neg: float = -1.0e9
    prenorm: bool = False
    precision: int = 64

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if not self.neg < 0:
            raise ConfigError(f"neg must be negative, got {self.neg}")
        if min(self.layers, self.heads, self.hidden, self.ff) < 1:
            raise ConfigError("layers/heads/hidden/ff must be positive")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass(frozen=True)
class VisionConfig:
    """Visual front end: grid geometry and sampling."""

    image_size: int = 32
    channels: int = 64
    encoder: str = "conv"        # "conv" (patchwise conv stack) or "patch"
    strides: tuple = (4, 2)
    sample_k: int = 12

    def __post_init__(self):
        if self.encoder not in ("conv", "patch"):
            raise ConfigError(f"vis.encoder must be conv or patch, got {self.encoder!r}")
        if not self.strides or any(s < 1 for s in self.strides):
            raise ConfigError(f"vis.strides must be positive, got {self.strides}")
        if self.image_size % self.total_stride != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by total stride "
                f"{self.total_stride}")
        if not 1 <= self.sample_k <= self.grid_count:
            raise ConfigError(
                f"vis.sample_k must be in 1..{self.grid_count}, got {self.sample_k}")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def grid_side(self) -> int:
        return self.image_size // self.total_stride

    @property
    def grid_count(self) -> int:
        return self.grid_side ** 2


# (key, type, default); canonical order. Booleans are stored as 0/1 ints.
_KEYS = (
    ("model.layers", int, 4),
    ("model.heads", int, 4),
    ("model.hidden", int, 64),
    ("model.ff", int, 256),
    ("model.dropout", float, 0.1),
    ("model.neg", float, -1.0e9),
    ("model.prenorm", int, 0),
    ("model.precision", int, 64),
    ("image.size", int, 32),
    ("vis.channels", int, 64),
    ("vis.encoder", str, "conv"),
    ("vis.strides", str, "4,2"),
    ("vis.sample_k", int, 12),
    ("text.max_len", int, 32),
    ("pretrain.scheme", str, "bar"),
    ("pretrain.s2s_prob", float, 0.75),
    ("mlm.rate", float, 0.15),
    ("mlm.mask_prob", float, 0.8),
    ("mlm.rand_prob", float, 0.1),
    ("optim.lr", float, 3.0e-4),
    ("optim.weight_decay", float, 0.01),
    ("train.batch", int, 32),
    ("train.epochs", int, 3),
    ("seed", int, 0),
)


@dataclass(frozen=True)
class RunConfig:
    """Parsed, validated view of the flat key=value file."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: t(d) for k, t, d in _KEYS}
        for key, raw in self.values.items():
            spec = next((s for s in _KEYS if s[0] == key), None)
            if spec is None:
                raise ConfigError(f"unknown config key {key!r}")
            _, typ, _ = spec
            try:
                merged[key] = typ(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        object.__setattr__(self, "values", merged)
        # eager validation of the composed sub-configs and enums
        self.model
        self.vision
        if self.scheme not in SCHEMES:
            raise ConfigError(
                f"pretrain.scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not 0.0 <= self["pretrain.s2s_prob"] <= 1.0:
            raise ConfigError("pretrain.s2s_prob must be in [0, 1]")
        if not 0.0 <= self["mlm.rate"] < 1.0:
            raise ConfigError("mlm.rate must be in [0, 1)")
        if (self["mlm.mask_prob"] < 0 or self["mlm.rand_prob"] < 0
                or self["mlm.mask_prob"] + self["mlm.rand_prob"] > 1.0):
            raise ConfigError("mlm.mask_prob + mlm.rand_prob must stay within [0, 1]")
        if self["train.batch"] < 1 or self["train.epochs"] < 0:
            raise ConfigError("train.batch must be >= 1 and train.epochs >= 0")
        if self["text.max_len"] < 1:
            raise ConfigError("text.max_len must be >= 1")

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(
            layers=self["model.layers"],
            heads=self["model.heads"],
            hidden=self["model.hidden"],
            ff=self["model.ff"],
            dropout=self["model.dropout"],
            neg=self["model.neg"],
            prenorm=bool(self["model.prenorm"]),
            precision=self["model.precision"],
        )

    @property
    def vision(self) -> VisionConfig:
        strides = tuple(int(s) for s in str(self["vis.strides"]).split(",") if s)
        return VisionConfig(
            image_size=self["image.size"],
            channels=self["vis.channels"],
            encoder=self["vis.encoder"],
            strides=strides,
            sample_k=self["vis.sample_k"],
        )

    @property
    def scheme(self) -> str:
        return self["pretrain.scheme"]

    @property
    def max_len(self) -> int:
        return self["text.max_len"]

    @property
    def seed(self) -> int:
        return self["seed"]


def parse_config(text: str) -> RunConfig:
    """Parse key=value lines; '#' starts a comment, blank lines are skipped."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return RunConfig(values=values)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def serialize_config(config: RunConfig) -> str:
    """Canonical text form: every key, documented order, one per line."""
    lines = []
    for key, typ, _ in _KEYS:
        value = config[key]
        if typ is float:
            lines.append(f"{key}={value!r}")
        else:
            lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def default_config(overrides: dict | None = None) -> RunConfig:
    """RunConfig from defaults plus an optional {key: value} override dict."""
    return RunConfig(values=dict(overrides or {}))
