"""Rank-generic U-Net (2D or 3D) on top of :mod:`cascade_seg.tensor`.

Each resolution stage is two ``conv -> instance norm -> leaky ReLU`` units.
The encoder pools after every stage, the decoder upsamples with a transposed
convolution and concatenates the matching encoder feature (skip first, then
the upsampled map) before its own two units. A 1x1 convolution maps to the
class logits and a channel softmax gives probabilities.

Inputs whose spatial extents are not divisible by the accumulated pooling
factor are zero padded symmetrically and the output is cropped back.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T

__all__ = [
    "UNetConfig",
    "UNet",
    "ModelWeights",
    "WeightFormatError",
    "FingerprintMismatchError",
    "build_unet",
    "save_weights",
    "load_weights",
    "load_model",
]

NUM_CLASSES = 5
WEIGHT_MAGIC = b"CSEGW1"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class UNetConfig:
    rank: int
    in_channels: int
    num_classes: int = NUM_CLASSES
    base_channels: int = 16
    depth: int = 4
    pool_factors: tuple[tuple[int, ...], ...] | None = None
    max_channels: int = 320
    kernel_size: int = 3
    negative_slope: float = 0.01
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.pool_factors is None:
            object.__setattr__(self, "pool_factors", ((2,) * self.rank,) * self.depth)
        else:
            object.__setattr__(self, "pool_factors", tuple(tuple(int(f) for f in p) for p in self.pool_factors))
        self.validate()

    def validate(self) -> None:
        if self.rank not in (2, 3):
            raise ValueError(f"rank must be 2 or 3, got {self.rank}")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("in_channels and base_channels must be positive")
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes must be {NUM_CLASSES} (labels 0-4), got {self.num_classes}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if len(self.pool_factors) != self.depth:
            raise ValueError(f"{len(self.pool_factors)} pool stages given for depth {self.depth}")
        for stage in self.pool_factors:
            if len(stage) != self.rank or any(f < 1 for f in stage):
                raise ValueError(f"pool factors {stage} invalid for rank {self.rank}")

    def width(self, stage: int) -> int:
        return min(self.base_channels * 2**stage, self.max_channels)

    @property
    def divisor(self) -> tuple[int, ...]:
        """Accumulated pooling factor per spatial axis."""
        return tuple(int(np.prod([p[a] for p in self.pool_factors])) for a in range(self.rank))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool_factors"] = [list(p) for p in self.pool_factors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        if d.get("pool_factors") is not None:
            d["pool_factors"] = tuple(tuple(p) for p in d["pool_factors"])
        return cls(**d)

    def fingerprint(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()

    def parameter_count(self) -> int:
        k = self.kernel_size**self.rank

        def unit(c_in, c_out):
            return c_out * c_in * k + c_out + 2 * c_out

        total = 0
        c_prev = self.in_channels
        for d in range(self.depth):
            w = self.width(d)
            total += unit(c_prev, w) + unit(w, w)
            c_prev = w
        wb = self.width(self.depth)
        total += unit(c_prev, wb) + unit(wb, wb)
        c_prev = wb
        for d in reversed(range(self.depth)):
            w = self.width(d)
            total += c_prev * w * int(np.prod(self.pool_factors[d])) + w
            total += unit(2 * w, w) + unit(w, w)
            c_prev = w
        total += c_prev * self.num_classes + self.num_classes
        return total


class WeightFormatError(ValueError):
    """A weight file is malformed; ``field`` names the offending part."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class FingerprintMismatchError(WeightFormatError):
    def __init__(self, message: str):
        super().__init__("config_fingerprint", message)


@dataclass
class ModelWeights:
    tensors: list[tuple[str, np.ndarray]]
    config_fingerprint: bytes
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.tensors)


class UNet:
    """A U-Net instance: configuration, named parameters and forward caches."""

    def __init__(self, cfg: UNetConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self._tape: list | None = None
        self.logits: np.ndarray | None = None

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- forward ---------------------------------------------------------

    def _unit(self, x, prefix, tape):
        p = self.params
        y, c = T.conv_forward(x, p[prefix + ".conv.weight"], p[prefix + ".conv.bias"])
        tape.append(("conv", prefix + ".conv", c))
        y, c = T.instance_norm_forward(y, p[prefix + ".norm.gain"], p[prefix + ".norm.offset"], self.cfg.norm_eps)
        tape.append(("norm", prefix + ".norm", c))
        y, c = T.leaky_relu_forward(y, self.cfg.negative_slope)
        tape.append(("act", None, c))
        return y

    def _block(self, x, prefix, tape):
        x = self._unit(x, prefix + ".0", tape)
        return self._unit(x, prefix + ".1", tape)

    def _padding(self, spatial: Sequence[int]) -> list[tuple[int, int]]:
        pads = []
        for s, d in zip(spatial, self.cfg.divisor):
            total = (-s) % d
            pads.append((total // 2, total - total // 2))
        return pads

    def forward(self, x: np.ndarray, keep_tape: bool = True) -> np.ndarray:
        """Class probabilities ``[b, 5, *spatial]`` for input ``[b, c_in, *spatial]``."""
        cfg = self.cfg
        if x.ndim != cfg.rank + 2:
            raise T.ShapeError(f"expected a rank-{cfg.rank} input [b, c, *spatial], got shape {x.shape}")
        if x.shape[1] != cfg.in_channels:
            raise T.ShapeError(f"input has {x.shape[1]} channels, model expects {cfg.in_channels}")
        x = x.astype(self.dtype, copy=False)
        pads = self._padding(x.shape[2:])
        if any(a or b for a, b in pads):
            x = np.pad(x, [(0, 0), (0, 0)] + pads)

        tape: list = []
        skips = []
        h = x
        for d in range(cfg.depth):
            h = self._block(h, f"enc{d}", tape)
            skips.append(h)
            h, c = T.maxpool_forward(h, cfg.pool_factors[d])
            tape.append(("pool", d, c))
        h = self._block(h, "bottleneck", tape)
        for d in reversed(range(cfg.depth)):
            h, c = T.upsample_forward(h, self.params[f"up{d}.weight"], self.params[f"up{d}.bias"], cfg.pool_factors[d])
            tape.append(("up", f"up{d}", c))
            skip = skips[d]
            if skip.shape[2:] != h.shape[2:]:
                raise T.ShapeError(f"skip at stage {d} has extents {skip.shape[2:]}, decoder has {h.shape[2:]}")
            tape.append(("concat", d, skip.shape[1]))
            h = T.concat_channels(skip, h)
            h = self._block(h, f"dec{d}", tape)
        logits, c = T.conv_forward(h, self.params["head.weight"], self.params["head.bias"])
        tape.append(("conv", "head", c))
        crop = (slice(None), slice(None)) + tuple(slice(a, logits.shape[2 + i] - b) for i, (a, b) in enumerate(pads))
        logits = logits[crop]
        self.logits = logits
        self._tape = (tape, pads) if keep_tape else None
        return T.softmax_channels(logits)

    __call__ = forward

    # -- backward --------------------------------------------------------

    def backward(self, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given the loss gradient w.r.t. the logits.

        Softmax is folded into the losses, so the incoming gradient is taken
        with respect to the pre-softmax output of the head.
        """
        if self._tape is None:
            raise T.ContextError("backward called without a retained forward pass")
        tape, pads = self._tape
        if self.logits is None or grad_logits.shape != self.logits.shape:
            raise T.ShapeError(f"gradient shape {grad_logits.shape} != logits shape {getattr(self.logits, 'shape', None)}")
        g = grad_logits
        if any(a or b for a, b in pads):
            g = np.pad(g, [(0, 0), (0, 0)] + pads)
        grads: dict[str, np.ndarray] = {}
        skip_grads: dict[int, np.ndarray] = {}
        for kind, name, ctx in reversed(tape):
            if kind == "conv":
                lg = T.conv_backward(ctx, g)
                grads[name + ".weight"] = lg.param_grads["weight"]
                grads[name + ".bias"] = lg.param_grads["bias"]
                g = lg.input_grad
            elif kind == "norm":
                lg = T.instance_norm_backward(ctx, g)
                grads[name + ".gain"] = lg.param_grads["gain"]
                grads[name + ".offset"] = lg.param_grads["offset"]
                g = lg.input_grad
            elif kind == "act":
                g = T.leaky_relu_backward(ctx, g).input_grad
            elif kind == "concat":
                g_skip, g = T.concat_backward(ctx, g)
                skip_grads[name] = g_skip
            elif kind == "up":
                lg = T.upsample_backward(ctx, g)
                grads[name + ".weight"] = lg.param_grads["weight"]
                grads[name + ".bias"] = lg.param_grads["bias"]
                g = lg.input_grad
            elif kind == "pool":
                # the pre-pool feature also fed the skip connection
                g = T.maxpool_backward(ctx, g).input_grad + skip_grads.pop(name)
        self._tape = None
        return {name: grads[name] for name in self.params}

    # -- weights -----------------------------------------------------------

    def get_weights(self) -> ModelWeights:
        return ModelWeights(
            [(n, p.copy()) for n, p in self.params.items()], self.cfg.fingerprint(), self.cfg.to_dict()
        )

    def set_weights(self, weights: ModelWeights) -> None:
        if weights.config_fingerprint != self.cfg.fingerprint():
            raise FingerprintMismatchError("weights were saved for a different model configuration")
        incoming = weights.as_dict()
        if list(incoming) != list(self.params):
            raise WeightFormatError("tensor_table", "parameter names do not match the model")
        for name, value in incoming.items():
            if value.shape != self.params[name].shape:
                raise WeightFormatError("tensor_table", f"{name} has shape {value.shape}, expected {self.params[name].shape}")
            self.params[name] = value.copy()


def build_unet(
    cfg: UNetConfig,
    seed: int = 0,
    dtype: np.dtype | type = np.float32,
    input_shape: Sequence[int] | None = None,
) -> UNet:
    """Initialize a U-Net: He fan-in kernels, zero biases, unit-gain norms.

    If ``input_shape`` (spatial extents) is given, reject configurations that
    would pool an axis below one voxel of real data.
    """
    cfg.validate()
    if input_shape is not None:
        for axis, (s, d) in enumerate(zip(input_shape, cfg.divisor)):
            if s < d:
                raise ValueError(
                    f"axis {axis} of extent {s} collapses below 1 at the bottleneck (total pooling {d})"
                )
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    k = (cfg.kernel_size,) * cfg.rank
    params: dict[str, np.ndarray] = {}

    def conv(name, c_in, c_out, ksize=k):
        fan_in = c_in * int(np.prod(ksize))
        params[name + ".weight"] = (rng.standard_normal((c_out, c_in) + ksize) * np.sqrt(2.0 / fan_in)).astype(dtype)
        params[name + ".bias"] = np.zeros(c_out, dtype)

    def unit(prefix, c_in, c_out):
        conv(prefix + ".conv", c_in, c_out)
        params[prefix + ".norm.gain"] = np.ones(c_out, dtype)
        params[prefix + ".norm.offset"] = np.zeros(c_out, dtype)

    c_prev = cfg.in_channels
    for d in range(cfg.depth):
        unit(f"enc{d}.0", c_prev, cfg.width(d))
        unit(f"enc{d}.1", cfg.width(d), cfg.width(d))
        c_prev = cfg.width(d)
    unit("bottleneck.0", c_prev, cfg.width(cfg.depth))
    unit("bottleneck.1", cfg.width(cfg.depth), cfg.width(cfg.depth))
    c_prev = cfg.width(cfg.depth)
    for d in reversed(range(cfg.depth)):
        w = cfg.width(d)
        pf = cfg.pool_factors[d]
        params[f"up{d}.weight"] = (rng.standard_normal((c_prev, w) + pf) * np.sqrt(2.0 / c_prev)).astype(dtype)
        params[f"up{d}.bias"] = np.zeros(w, dtype)
        unit(f"dec{d}.0", 2 * w, w)
        unit(f"dec{d}.1", w, w)
        c_prev = w
    conv("head", c_prev, cfg.num_classes, (1,) * cfg.rank)
    return UNet(cfg, params)


# --------------------------------------------------------------------------
# weight file
# --------------------------------------------------------------------------
#
# little-endian layout:
#   magic     6 bytes  "CSEGW1"
#   fingerprint 32 bytes  sha256 of the canonical config JSON
#   u32 config JSON length, config JSON (utf-8)
#   u32 tensor count
#   per tensor: u16 name length, name, u8 dtype (0 = f32, 1 = f64),
#               u8 rank, u32 extents[rank], raw values
#   u32 crc32 of all preceding bytes


def save_weights(model_or_weights: UNet | ModelWeights, path: str | Path) -> None:
    w = model_or_weights.get_weights() if isinstance(model_or_weights, UNet) else model_or_weights
    chunks = [WEIGHT_MAGIC, w.config_fingerprint]
    cfg_blob = json.dumps(w.config, sort_keys=True).encode()
    chunks.append(struct.pack("<I", len(cfg_blob)))
    chunks.append(cfg_blob)
    chunks.append(struct.pack("<I", len(w.tensors)))
    for name, arr in w.tensors:
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise WeightFormatError("dtype", f"{name} has unsupported dtype {arr.dtype}")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFormatError(what, f"file truncated (need {n} bytes at offset {self.pos})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path: str | Path, expected: UNetConfig | None = None) -> ModelWeights:
    data = Path(path).read_bytes()
    if len(data) < len(WEIGHT_MAGIC) or data[: len(WEIGHT_MAGIC)] != WEIGHT_MAGIC:
        raise WeightFormatError("magic", f"not a weight file (expected {WEIGHT_MAGIC!r})")
    if len(data) < len(WEIGHT_MAGIC) + 32 + 4:
        raise WeightFormatError("header", "file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise WeightFormatError("checksum", "crc32 mismatch; file is corrupted or truncated")
    r = _Reader(body)
    r.take(len(WEIGHT_MAGIC), "magic")
    fingerprint = r.take(32, "config_fingerprint")
    (n_cfg,) = r.unpack("<I", "config_length")
    try:
        config = json.loads(r.take(n_cfg, "config").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError("config", f"unreadable config block ({exc})") from None
    (count,) = r.unpack("<I", "tensor_count")
    tensors = []
    for _ in range(count):
        (n_name,) = r.unpack("<H", "name_length")
        name = r.take(n_name, "name").decode("utf-8", errors="strict")
        code, rank = r.unpack("<BB", "tensor_header")
        if code not in _CODE_DTYPES:
            raise WeightFormatError("dtype", f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{rank}I", "extents")
        dt = _CODE_DTYPES[code]
        raw = r.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize, f"data[{name}]")
        tensors.append((name, np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))))
    if r.pos != len(body):
        raise WeightFormatError("tensor_table", "trailing bytes after tensor table")
    if len({n for n, _ in tensors}) != len(tensors):
        raise WeightFormatError("tensor_table", "duplicate tensor names")
    if expected is not None and expected.fingerprint() != fingerprint:
        raise FingerprintMismatchError("weights were saved for a different model configuration")
    return ModelWeights(tensors, fingerprint, config)


def load_model(path: str | Path) -> UNet:
    """Rebuild a model from the configuration embedded in a weight file."""
    weights = load_weights(path)
    cfg = UNetConfig.from_dict(weights.config)
    if cfg.fingerprint() != weights.config_fingerprint:
        raise FingerprintMismatchError("embedded config does not match the stored fingerprint")
    model = build_unet(cfg, dtype=weights.tensors[0][1].dtype)
    model.set_weights(weights)
    return model
