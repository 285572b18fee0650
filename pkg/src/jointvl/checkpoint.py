""""MVC1" checkpoint files.

Layout: magic "MVC1", uint32 version, length-prefixed canonical config
text, uint32 tensor count, then per tensor: length-prefixed name, uint32
rank, uint32 dims, uint8 precision flag (0=float32, 1=float64), and the
row-major little-endian payload. Loading rebuilds the expected parameter
map from the stored config and validates every name, shape and dtype
against it.
"""

import struct

import numpy as np

from .autodiff import Tensor
from .config import RunConfig, parse_config, serialize_config
from .errors import DataError
from .model import JointModel, add_vqa_head, init_params
from .rng import derive_rng
from .vocab import Vocabulary

MAGIC = b"MVC1"
VERSION = 1

_PRECISION_FLAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_FLAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path, params: dict, config: RunConfig) -> None:
    config_text = serialize_config(config).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(config_text)))
        fh.write(config_text)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            tensor = params[name]
            data = np.ascontiguousarray(tensor.data)
            flag = _PRECISION_FLAGS.get(data.dtype)
            if flag is None:
                raise DataError(f"tensor {name} has unsupported dtype {data.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(struct.pack("<B", flag))
            fh.write(data.astype(_FLAG_DTYPES[flag], copy=False).tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise DataError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> tuple:
    """Read an MVC1 file; returns (params, config) after validation."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise DataError(f"{path}: bad magic, not an MVC1 checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = parse_config(_read_exact(fh, config_len, "config").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}I",
                                  _read_exact(fh, 4 * rank, "dims"))
            (flag,) = struct.unpack("<B", _read_exact(fh, 1, "precision flag"))
            if flag not in _FLAG_DTYPES:
                raise DataError(f"{path}: tensor {name} has bad precision flag {flag}")
            dtype = _FLAG_DTYPES[flag]
            payload = _read_exact(fh, int(np.prod(shape, dtype=np.int64))
                                  * dtype.itemsize, f"payload of {name}")
            data = np.frombuffer(payload, dtype=dtype).reshape(shape)
            params[name] = Tensor(data.astype(dtype.newbyteorder("=")),
                                  requires_grad=True)
    _validate_against_config(params, config, path)
    return params, config


def _validate_against_config(params: dict, config: RunConfig, path) -> None:
    if "emb.tok" not in params:
        raise DataError(f"{path}: checkpoint lacks emb.tok")
    vocab_size = params["emb.tok"].shape[0]
    expected = init_params(config, vocab_size, derive_rng(0, "shape-template"))
    if "head.vqa.w" in params:
        add_vqa_head(expected, params["head.vqa.w"].shape[1], config,
                     derive_rng(0, "shape-template"))
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise DataError(f"{path}: parameter names do not match config "
                        f"(missing {missing[:3]}, extra {extra[:3]})")
    for name, template in expected.items():
        tensor = params[name]
        if tuple(tensor.shape) != tuple(template.shape):
            raise DataError(f"{path}: tensor {name} has shape {tensor.shape}, "
                            f"config implies {template.shape}")
        if tensor.dtype != config.model.dtype:
            raise DataError(f"{path}: tensor {name} has dtype {tensor.dtype}, "
                            f"config implies {config.model.dtype}")


def load_model(path, vocab: Vocabulary) -> JointModel:
    params, config = load_checkpoint(path)
    if params["emb.tok"].shape[0] != len(vocab):
        raise DataError(
            f"{path}: checkpoint vocabulary size {params['emb.tok'].shape[0]} "
            f"does not match the loaded vocabulary ({len(vocab)})")
    return JointModel(config, params, vocab)
