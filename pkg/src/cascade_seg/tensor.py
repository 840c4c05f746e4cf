"""Differentiable layer primitives on channels-first numpy arrays.

Every op comes as a ``*_forward`` / ``*_backward`` pair. The forward returns
the output together with a context object holding whatever the backward
needs; the backward consumes that context and an upstream gradient and
returns a :class:`LayerGrad`. Ops are rank generic: an array of shape
``[batch, channels, *spatial]`` with 2 or 3 spatial axes goes through the same
code path.

Inputs are never mutated.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "ContextError",
    "LayerGrad",
    "conv_forward",
    "conv_backward",
    "maxpool_forward",
    "maxpool_backward",
    "upsample_forward",
    "upsample_backward",
    "concat_channels",
    "concat_backward",
    "instance_norm_forward",
    "instance_norm_backward",
    "leaky_relu_forward",
    "leaky_relu_backward",
    "softmax_channels",
    "softmax_backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContextError(RuntimeError):
    """Raised when a backward pass is requested without a forward context."""


@dataclass
class LayerGrad:
    input_grad: np.ndarray
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


def _tuple(value: int | Sequence[int], rank: int, name: str) -> tuple[int, ...]:
    if np.isscalar(value):
        return (int(value),) * rank
    out = tuple(int(v) for v in value)
    if len(out) != rank:
        raise ShapeError(f"{name} has {len(out)} entries, expected {rank}")
    return out


def _check_ctx(ctx: Any, op: str) -> None:
    if ctx is None:
        raise ContextError(f"{op}: backward called without a forward context")


def _spatial_rank(x: np.ndarray, op: str) -> int:
    rank = x.ndim - 2
    if rank not in (1, 2, 3):
        raise ShapeError(f"{op}: expected [batch, channels, *spatial] with 1-3 spatial axes, got shape {x.shape}")
    return rank


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


@dataclass
class ConvContext:
    cols: np.ndarray  # [c_in, *K, batch, *out]
    weight: np.ndarray
    input_shape: tuple[int, ...]
    padded_shape: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]


def conv_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    stride: int | Sequence[int] = 1,
    padding: int | Sequence[int] | None = None,
) -> tuple[np.ndarray, ConvContext]:
    """N-d cross-correlation.

    ``weight`` has shape ``[c_out, c_in, *K]``. With ``padding=None`` each axis
    is padded by ``K // 2`` which preserves the spatial size at stride 1.
    """
    rank = _spatial_rank(x, "conv_forward")
    if weight.ndim != rank + 2:
        raise ShapeError(f"conv_forward: kernel rank {weight.ndim - 2} does not match input rank {rank}")
    c_out, c_in = weight.shape[:2]
    if x.shape[1] != c_in:
        raise ShapeError(
            f"conv_forward: input has {x.shape[1]} channels but kernel expects {c_in} "
            f"(input {x.shape}, kernel {weight.shape})"
        )
    if bias.shape != (c_out,):
        raise ShapeError(f"conv_forward: bias shape {bias.shape} != ({c_out},)")
    ksize = weight.shape[2:]
    stride = _tuple(stride, rank, "stride")
    padding = tuple(k // 2 for k in ksize) if padding is None else _tuple(padding, rank, "padding")

    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding]) if any(padding) else x
    for axis, k in enumerate(ksize):
        if xp.shape[2 + axis] < k:
            raise ShapeError(f"conv_forward: kernel {ksize} larger than padded input {xp.shape[2:]}")
    spatial_axes = tuple(range(2, 2 + rank))
    win = sliding_window_view(xp, ksize, axis=spatial_axes)
    if any(s != 1 for s in stride):
        win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    out_sp = win.shape[2 : 2 + rank]
    batch = x.shape[0]
    # [b, c, *O, *K] -> [c, *K, b, *O]
    order = (1,) + tuple(range(2 + rank, 2 + 2 * rank)) + (0,) + spatial_axes
    cols = np.ascontiguousarray(win.transpose(order))
    wmat = weight.reshape(c_out, -1)
    y = wmat @ cols.reshape(wmat.shape[1], -1)
    y += bias[:, None]
    y = y.reshape((c_out, batch) + out_sp)
    y = np.ascontiguousarray(np.moveaxis(y, 0, 1))
    ctx = ConvContext(cols, weight, x.shape, xp.shape, stride, padding)
    return y, ctx


def conv_backward(ctx: ConvContext | None, grad_out: np.ndarray) -> LayerGrad:
    _check_ctx(ctx, "conv_backward")
    weight = ctx.weight
    c_out, c_in = weight.shape[:2]
    ksize = weight.shape[2:]
    rank = len(ksize)
    batch = ctx.input_shape[0]
    out_sp = ctx.cols.shape[2 + rank :]
    if grad_out.shape != (batch, c_out) + out_sp:
        raise ShapeError(f"conv_backward: grad shape {grad_out.shape} != {(batch, c_out) + out_sp}")
    g = np.moveaxis(grad_out, 1, 0).reshape(c_out, -1)
    cols = ctx.cols.reshape(-1, g.shape[1])
    dw = (g @ cols.T).reshape(weight.shape)
    db = g.sum(axis=1)
    dcols = (weight.reshape(c_out, -1).T @ g).reshape(ctx.cols.shape)

    dxp = np.zeros(ctx.padded_shape, dtype=grad_out.dtype)
    for k in itertools.product(*(range(n) for n in ksize)):
        target = (slice(None), slice(None)) + tuple(
            slice(k[a], k[a] + ctx.stride[a] * (out_sp[a] - 1) + 1, ctx.stride[a]) for a in range(rank)
        )
        # dcols[:, *k] is [c, b, *O]
        dxp[target] += np.swapaxes(dcols[(slice(None),) + k], 0, 1)
    crop = (slice(None), slice(None)) + tuple(
        slice(p, p + n) for p, n in zip(ctx.padding, ctx.input_shape[2:])
    )
    return LayerGrad(dxp[crop], {"weight": dw, "bias": db})


# --------------------------------------------------------------------------
# max pooling (non-overlapping, floor truncation)
# --------------------------------------------------------------------------


@dataclass
class PoolContext:
    argmax: np.ndarray
    input_shape: tuple[int, ...]
    window: tuple[int, ...]


def _blocked(x: np.ndarray, window: tuple[int, ...]) -> tuple[np.ndarray, tuple[int, ...]]:
    """View ``x`` as ``[b, c, *n, prod(window)]`` with windows in scan order."""
    rank = len(window)
    n = tuple(s // w for s, w in zip(x.shape[2:], window))
    trimmed = x[(slice(None), slice(None)) + tuple(slice(0, a * w) for a, w in zip(n, window))]
    shape = x.shape[:2] + tuple(itertools.chain.from_iterable(zip(n, window)))
    blocks = trimmed.reshape(shape)
    order = (0, 1) + tuple(2 + 2 * a for a in range(rank)) + tuple(3 + 2 * a for a in range(rank))
    blocks = blocks.transpose(order).reshape(x.shape[:2] + n + (-1,))
    return blocks, n


def maxpool_forward(
    x: np.ndarray, window: int | Sequence[int], stride: int | Sequence[int] | None = None
) -> tuple[np.ndarray, PoolContext]:
    """Max pooling with ``stride == window``; ties go to the first element in scan order."""
    rank = _spatial_rank(x, "maxpool")
    window = _tuple(window, rank, "window")
    if stride is not None and _tuple(stride, rank, "stride") != window:
        raise ShapeError("maxpool: only non-overlapping pooling (stride == window) is supported")
    for s, w in zip(x.shape[2:], window):
        if w > s:
            raise ShapeError(f"maxpool: window {window} larger than spatial extent {x.shape[2:]}")
    blocks, _ = _blocked(x, window)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, PoolContext(idx, x.shape, window)


def maxpool_backward(ctx: PoolContext | None, grad_out: np.ndarray) -> LayerGrad:
    _check_ctx(ctx, "maxpool_backward")
    window = ctx.window
    rank = len(window)
    if grad_out.shape != ctx.argmax.shape:
        raise ShapeError(f"maxpool_backward: grad shape {grad_out.shape} != {ctx.argmax.shape}")
    n = ctx.argmax.shape[2:]
    blocks = np.zeros(ctx.argmax.shape + (int(np.prod(window)),), dtype=grad_out.dtype)
    np.put_along_axis(blocks, ctx.argmax[..., None], grad_out[..., None], axis=-1)
    # [b, c, *n, *w] -> [b, c, n0, w0, n1, w1, ...]
    blocks = blocks.reshape(ctx.argmax.shape + window)
    order = (0, 1) + tuple(itertools.chain.from_iterable((2 + a, 2 + rank + a) for a in range(rank)))
    dense = blocks.transpose(order).reshape(ctx.input_shape[:2] + tuple(a * w for a, w in zip(n, window)))
    if dense.shape == ctx.input_shape:
        return LayerGrad(dense)
    dx = np.zeros(ctx.input_shape, dtype=grad_out.dtype)
    dx[(slice(None), slice(None)) + tuple(slice(0, s) for s in dense.shape[2:])] = dense
    return LayerGrad(dx)


# --------------------------------------------------------------------------
# transposed convolution (learned upsampling)
# --------------------------------------------------------------------------


@dataclass
class UpsampleContext:
    x: np.ndarray
    weight: np.ndarray
    stride: tuple[int, ...]


def upsample_forward(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int | Sequence[int]
) -> tuple[np.ndarray, UpsampleContext]:
    """Transposed convolution, the adjoint of a strided cross-correlation.

    ``weight`` has shape ``[c_in, c_out, *K]``; the output extent per axis is
    ``(S - 1) * stride + K``, i.e. ``S * stride`` when the kernel equals the
    stride.
    """
    rank = _spatial_rank(x, "upsample")
    if weight.ndim != rank + 2:
        raise ShapeError(f"upsample: kernel rank {weight.ndim - 2} does not match input rank {rank}")
    c_in, c_out = weight.shape[:2]
    if x.shape[1] != c_in:
        raise ShapeError(f"upsample: input has {x.shape[1]} channels but kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"upsample: bias shape {bias.shape} != ({c_out},)")
    stride = _tuple(stride, rank, "stride")
    ksize = weight.shape[2:]
    batch, sp = x.shape[0], x.shape[2:]
    out_sp = tuple((s - 1) * st + k for s, st, k in zip(sp, stride, ksize))

    # [c_out * prod(K), c_in] @ [c_in, b * prod(S)]
    wmat = np.moveaxis(weight, 0, -1).reshape(-1, c_in)
    xm = np.moveaxis(x, 1, 0).reshape(c_in, -1)
    z = (wmat @ xm).reshape((c_out,) + ksize + (batch,) + sp)
    if all(k == st for k, st in zip(ksize, stride)):
        # non-overlapping: one interleaving reshape
        order = (rank + 1, 0) + tuple(itertools.chain.from_iterable((rank + 2 + a, 1 + a) for a in range(rank)))
        y = np.ascontiguousarray(z.transpose(order)).reshape((batch, c_out) + out_sp)
    else:
        y = np.zeros((batch, c_out) + out_sp, dtype=z.dtype)
        for k in itertools.product(*(range(n) for n in ksize)):
            target = (slice(None), slice(None)) + tuple(
                slice(k[a], k[a] + stride[a] * (sp[a] - 1) + 1, stride[a]) for a in range(rank)
            )
            y[target] += np.swapaxes(z[(slice(None),) + k], 0, 1)
    y += bias.reshape((1, c_out) + (1,) * rank)
    return y, UpsampleContext(x, weight, stride)


def upsample_backward(ctx: UpsampleContext | None, grad_out: np.ndarray) -> LayerGrad:
    _check_ctx(ctx, "upsample_backward")
    x, weight, stride = ctx.x, ctx.weight, ctx.stride
    rank = len(stride)
    c_in, c_out = weight.shape[:2]
    ksize = weight.shape[2:]
    batch, sp = x.shape[0], x.shape[2:]
    out_sp = tuple((s - 1) * st + k for s, st, k in zip(sp, stride, ksize))
    if grad_out.shape != (batch, c_out) + out_sp:
        raise ShapeError(f"upsample_backward: grad shape {grad_out.shape} != {(batch, c_out) + out_sp}")

    # gather gz: [c_out, *K, b, *S]
    if all(k == st for k, st in zip(ksize, stride)):
        shape = (batch, c_out) + tuple(itertools.chain.from_iterable(zip(sp, ksize)))
        g = grad_out.reshape(shape)
        order = (1,) + tuple(3 + 2 * a for a in range(rank)) + (0,) + tuple(2 + 2 * a for a in range(rank))
        gz = g.transpose(order)
    else:
        gz = np.empty((c_out,) + ksize + (batch,) + sp, dtype=grad_out.dtype)
        for k in itertools.product(*(range(n) for n in ksize)):
            src = (slice(None), slice(None)) + tuple(
                slice(k[a], k[a] + stride[a] * (sp[a] - 1) + 1, stride[a]) for a in range(rank)
            )
            gz[(slice(None),) + k] = np.swapaxes(grad_out[src], 0, 1)
    gzm = gz.reshape(c_out * int(np.prod(ksize)), -1)
    xm = np.moveaxis(x, 1, 0).reshape(c_in, -1)
    wmat = np.moveaxis(weight, 0, -1).reshape(-1, c_in)
    dx = (wmat.T @ gzm).reshape((c_in, batch) + sp)
    dw = (gzm @ xm.T).reshape((c_out,) + ksize + (c_in,))
    dw = np.moveaxis(dw, -1, 0)
    db = grad_out.sum(axis=(0,) + tuple(range(2, 2 + rank)))
    return LayerGrad(np.ascontiguousarray(np.moveaxis(dx, 0, 1)), {"weight": dw, "bias": db})


# --------------------------------------------------------------------------
# channel concatenation
# --------------------------------------------------------------------------


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: non-channel extents differ: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_backward(a_channels: int, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a concatenation gradient back into the two operands."""
    return grad_out[:, :a_channels], grad_out[:, a_channels:]


# --------------------------------------------------------------------------
# instance normalization
# --------------------------------------------------------------------------


@dataclass
class NormContext:
    xhat: np.ndarray
    inv_std: np.ndarray
    gain: np.ndarray


def instance_norm_forward(
    x: np.ndarray, gain: np.ndarray, offset: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, NormContext]:
    """Normalize each (batch, channel) slice over its spatial extent."""
    rank = _spatial_rank(x, "instance_norm")
    if eps <= 0:
        raise ValueError("instance_norm: eps must be positive")
    axes = tuple(range(2, 2 + rank))
    bshape = (1, x.shape[1]) + (1,) * rank
    mean = x.mean(axis=axes, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat * gain.reshape(bshape) + offset.reshape(bshape)
    return y, NormContext(xhat, inv_std, gain)


def instance_norm_backward(ctx: NormContext | None, grad_out: np.ndarray) -> LayerGrad:
    _check_ctx(ctx, "instance_norm_backward")
    rank = grad_out.ndim - 2
    axes = tuple(range(2, 2 + rank))
    bshape = (1, grad_out.shape[1]) + (1,) * rank
    xhat = ctx.xhat
    dgain = np.sum(grad_out * xhat, axis=(0,) + axes)
    doffset = np.sum(grad_out, axis=(0,) + axes)
    gx = grad_out * ctx.gain.reshape(bshape)
    dx = ctx.inv_std * (
        gx - gx.mean(axis=axes, keepdims=True) - xhat * np.mean(gx * xhat, axis=axes, keepdims=True)
    )
    return LayerGrad(dx, {"gain": dgain, "offset": doffset})


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------


def leaky_relu_forward(x: np.ndarray, slope: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu: slope must lie in [0, 1), got {slope}")
    positive = x > 0
    return np.where(positive, x, x * slope), (positive, slope)


def leaky_relu_backward(ctx: tuple[np.ndarray, float] | None, grad_out: np.ndarray) -> LayerGrad:
    _check_ctx(ctx, "leaky_relu_backward")
    positive, slope = ctx
    return LayerGrad(np.where(positive, grad_out, grad_out * slope))


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Softmax over axis 1, stabilized by max subtraction."""
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Map a gradient w.r.t. softmax outputs to one w.r.t. the logits."""
    return probs * (grad_probs - np.sum(probs * grad_probs, axis=1, keepdims=True))
