"""The VGG-style network: four conv stages and three fully connected layers.

Each stage is two conv blocks followed by 2x2 max pooling; a block is
conv -> ReLU -> batch norm by default (``block_order`` switches to
conv -> BN -> ReLU). The first two FC layers are followed by ReLU and
dropout. Parameters live in a flat registry keyed by stable dotted names,
e.g. ``stage1.block2.conv.weight`` or ``fc3.bias``.

Checkpoint layout (little-endian)::

    b"FERC" | u32 version | u32 len | config JSON | u32 len | meta JSON
    | u32 count | count x record | b"END\\0"

    record = u16 len | name (utf-8) | u8 dtype (1=f32, 2=f64) | u8 ndim
             | ndim x u32 extent | raw IEEE-754 payload

Record names are prefixed ``param/``, ``buffer/`` (BN running stats) or
``extra/`` (arrays inside the extras, e.g. optimizer buffers).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import CheckpointError, ShapeError, StateError
from .nn import BatchNorm2d, Conv2d, Dropout, Flatten, Layer, Linear, MaxPool2d, ReLU
from .tensor import SeededRng

MAGIC = b"FERC"
END = b"END\0"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class VggConfig:
    stage_widths: Tuple[int, int, int, int] = (64, 128, 256, 512)
    fc_widths: Tuple[int, int] = (4096, 1024)
    n_classes: int = 7
    dropout_p: float = 0.5
    dropout_placement: str = "both"   # both | first | second | none
    block_order: str = "conv-relu-bn"  # or conv-bn-relu
    input_size: int = 40
    in_channels: int = 1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.fc_widths = tuple(int(w) for w in self.fc_widths)
        if len(self.stage_widths) != 4 or min(self.stage_widths) < 1:
            raise ValueError("stage_widths needs 4 positive channel counts")
        if len(self.fc_widths) != 2 or min(self.fc_widths) < 1:
            raise ValueError("fc_widths needs 2 positive extents")
        if self.block_order not in ("conv-relu-bn", "conv-bn-relu"):
            raise ValueError(f"unknown block_order {self.block_order!r}")
        if self.dropout_placement not in ("both", "first", "second", "none"):
            raise ValueError(f"unknown dropout_placement {self.dropout_placement!r}")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.final_spatial < 1:
            raise ValueError(f"input_size {self.input_size} too small for four 2x2 poolings")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def final_spatial(self) -> int:
        s = self.input_size
        for _ in range(4):
            s //= 2
        return s

    @property
    def flatten_extent(self) -> int:
        return self.stage_widths[3] * self.final_spatial ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VggConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


SCALED_CONFIG = dict(stage_widths=(8, 16, 32, 64), fc_widths=(64, 32))


def _he_normal(rng: SeededRng, shape, fan_in, dtype):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype)


class VggModel:
    def __init__(self, config: VggConfig, layers: List[Tuple[str, Layer]]):
        self.config = config
        self.layers = layers
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        for name, layer in layers:
            for key, value in layer.params.items():
                self.params[f"{name}.{key}"] = value
            for key, value in layer.buffers.items():
                self.buffers[f"{name}.{key}"] = value
        self.input_grad: Optional[np.ndarray] = None
        self._forward_done = False

    def layer(self, name: str) -> Layer:
        for n, layer in self.layers:
            if n == name:
                return layer
        raise KeyError(name)

    def set_mode(self, mode: str):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be train or eval, got {mode!r}")
        for _, layer in self.layers:
            layer.train(mode == "train")

    def forward(self, batch: np.ndarray, mode: str = "eval", rng: Optional[SeededRng] = None) -> np.ndarray:
        c, s = self.config.in_channels, self.config.input_size
        if batch.ndim != 4 or batch.shape[1:] != (c, s, s):
            raise ShapeError(f"expected n x {c} x {s} x {s} input, got {batch.shape}")
        self.set_mode(mode)
        x = batch.astype(self.config.np_dtype, copy=False)
        for _, layer in self.layers:
            x = layer.forward(x, rng)
        self._forward_done = True
        return x

    def backward(self, logit_grad: np.ndarray) -> Dict[str, np.ndarray]:
        """Backpropagate ``logit_grad``; returns a gradient per registered parameter.

        The gradient w.r.t. the network input is left in ``self.input_grad``.
        """
        if not self._forward_done:
            raise StateError("backward called without a cached forward pass")
        g = logit_grad.astype(self.config.np_dtype, copy=False)
        for _, layer in reversed(self.layers):
            g = layer.backward(g)
        self.input_grad = g
        grads = {}
        for name, layer in self.layers:
            for key in layer.params:
                grads[f"{name}.{key}"] = layer.grads[key]
        return grads

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out


def build(config: VggConfig, rng: SeededRng) -> VggModel:
    """He-normal conv/FC weights, zero biases, unit gamma and zero beta."""
    dt = config.np_dtype
    layers: List[Tuple[str, Layer]] = []
    in_ch = config.in_channels
    for s, width in enumerate(config.stage_widths, start=1):
        for b in (1, 2):
            prefix = f"stage{s}.block{b}"
            w = _he_normal(rng, (width, in_ch, 3, 3), in_ch * 9, dt)
            conv = Conv2d(w, np.zeros(width, dt), stride=1, padding=1)
            bn = BatchNorm2d(width, momentum=config.bn_momentum, eps=config.bn_eps, dtype=dt)
            layers.append((f"{prefix}.conv", conv))
            if config.block_order == "conv-relu-bn":
                layers += [(f"{prefix}.relu", ReLU()), (f"{prefix}.bn", bn)]
            else:
                layers += [(f"{prefix}.bn", bn), (f"{prefix}.relu", ReLU())]
            in_ch = width
        layers.append((f"stage{s}.pool", MaxPool2d()))
    layers.append(("flatten", Flatten()))
    dims = [config.flatten_extent, *config.fc_widths, config.n_classes]
    drop_after = {"both": (1, 2), "first": (1,), "second": (2,), "none": ()}[config.dropout_placement]
    for i in range(3):
        fan_in, fan_out = dims[i], dims[i + 1]
        layers.append((f"fc{i + 1}", Linear(_he_normal(rng, (fan_out, fan_in), fan_in, dt), np.zeros(fan_out, dt))))
        if i < 2:
            layers.append((f"fc{i + 1}.relu", ReLU()))
            if i + 1 in drop_after:
                layers.append((f"fc{i + 1}.dropout", Dropout(config.dropout_p)))
    return VggModel(config, layers)


# -- checkpoints ---------------------------------------------------------

def _split_extras(obj, path, arrays):
    if isinstance(obj, np.ndarray):
        name = "extra/" + "/".join(path)
        arrays[name] = obj
        return {"__array__": name}
    if isinstance(obj, dict):
        return {str(k): _split_extras(v, path + [str(k)], arrays) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_split_extras(v, path + [str(i)], arrays) for i, v in enumerate(obj)]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _join_extras(obj, arrays):
    if isinstance(obj, dict):
        if set(obj) == {"__array__"}:
            return arrays[obj["__array__"]]
        return {k: _join_extras(v, arrays) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_join_extras(v, arrays) for v in obj]
    return obj


def _pack_block(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def encode_checkpoint(model: VggModel, extras: Optional[dict] = None) -> bytes:
    arrays = dict(model.state_arrays())
    meta = _split_extras(extras or {}, [], arrays)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION),
             _pack_block(json.dumps(model.config.to_dict(), sort_keys=True).encode()),
             _pack_block(json.dumps(meta, sort_keys=True).encode()),
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    parts.append(END)
    return b"".join(parts)


def save_checkpoint(model: VggModel, path, extras: Optional[dict] = None) -> None:
    """Write atomically so an interrupted save never clobbers a valid file."""
    data = encode_checkpoint(model, extras)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes):
    """Parse checkpoint bytes into ``(config_dict, meta, arrays)``."""
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = json.loads(r.take(r.unpack("<I")[0]))
        meta = json.loads(r.take(r.unpack("<I")[0]))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt header block: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}I")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dtype.newbyteorder("<")).reshape(shape)
        arrays[name] = arr.astype(dtype)
    if r.take(len(END)) != END or r.pos != len(data):
        raise CheckpointError("missing end marker or trailing bytes")
    return config, meta, arrays


def load_state(model: VggModel, arrays: Dict[str, np.ndarray]) -> None:
    """Copy ``param/`` and ``buffer/`` records into ``model`` after validating all of them."""
    expected = model.state_arrays()
    for name, arr in arrays.items():
        if not name.startswith(("param/", "buffer/")):
            continue
        if name not in expected:
            raise CheckpointError(f"unknown parameter {name.split('/', 1)[1]!r} in checkpoint")
        if arr.shape != expected[name].shape:
            raise CheckpointError(
                f"parameter {name.split('/', 1)[1]!r} has shape {arr.shape}, "
                f"model expects {expected[name].shape}")
    missing = [n for n in expected if n not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter {missing[0].split('/', 1)[1]!r}")
    for name, target in expected.items():
        target[...] = arrays[name]


def load_checkpoint(path, config: Optional[VggConfig] = None):
    """Return ``(model, extras)``.

    If ``config`` is given the model is built from it, and any parameter
    that does not fit is reported by name.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    cfg_dict, meta, arrays = decode_checkpoint(data)
    if config is None:
        try:
            config = VggConfig.from_dict(cfg_dict)
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"invalid config block: {exc}") from None
    model = build(config, SeededRng(0))
    load_state(model, arrays)
    try:
        extras = _join_extras(meta, arrays)
    except KeyError as exc:
        raise CheckpointError(f"extras reference missing record {exc}") from None
    return model, extras
