"""Convolution, linear maps and adaptive pooling on :class:`Tensor` values."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    Parameter,
    Tensor,
    _as_tensor,
    concat,
    l2_normalize,
    make_op,
    matmul,
    relu,
    reshape,
    softmax,
    transpose,
)

__all__ = [
    "PoolGeometry",
    "adaptive_pool_params",
    "pool_axis",
    "adaptive_pool2d",
    "conv2d",
    "Conv2d",
    "Linear",
    "relu",
    "softmax",
    "l2_normalize",
]


@dataclass(frozen=True)
class PoolGeometry:
    input_size: int
    output_size: int
    stride: int
    kernel: int
    padding: int = 0

    def windows(self) -> list[tuple[int, int]]:
        return [(o * self.stride, o * self.stride + self.kernel) for o in range(self.output_size)]


def adaptive_pool_params(input_size: int, output_size: int) -> PoolGeometry:
    """Pooling stride and kernel inferred from the input/output sizes with zero padding.

    stride = floor(IS / OS), kernel = IS - (OS - 1) * stride, so the windows
    tile the input exactly: (OS - 1) * stride + kernel == IS.
    """
    if output_size < 1 or output_size > input_size:
        raise ValueError(f"need 1 <= OS <= IS, got IS={input_size}, OS={output_size}")
    stride = input_size // output_size
    kernel = input_size - (output_size - 1) * stride
    return PoolGeometry(input_size, output_size, stride, kernel, 0)


def pool_axis(x, axis: int, output_size: int, mode: str = "max") -> Tensor:
    """Adaptive pooling along a single axis.

    Max mode routes each window's gradient to its lowest-index maximum.
    """
    x = _as_tensor(x)
    ax = axis % x.ndim
    geom = adaptive_pool_params(x.shape[ax], output_size)
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    win = sliding_window_view(x.data, geom.kernel, axis=ax)
    picks = [np.s_[:]] * x.ndim
    picks[ax] = np.s_[::geom.stride]
    win = win[tuple(picks)]  # window elements on the last axis
    k = geom.kernel

    def at(o):
        index = [np.s_[:]] * x.ndim
        index[ax] = np.s_[o * geom.stride:o * geom.stride + k]
        return tuple(index)

    if mode == "avg":
        out = win.mean(axis=-1)

        def back(g):
            gx = np.zeros_like(x.data)
            for o in range(geom.output_size):
                gx[at(o)] += np.expand_dims(np.take(g, o, axis=ax), ax) / k
            return (gx,)

        return make_op("adaptive_avg_pool", out, (x,), back)

    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back_max(g):
        gx = np.zeros_like(x.data)
        seg_shape = list(x.shape)
        seg_shape[ax] = k
        for o in range(geom.output_size):
            seg = np.zeros(seg_shape, dtype=x.dtype)
            np.put_along_axis(seg, np.expand_dims(np.take(arg, o, axis=ax), ax),
                              np.expand_dims(np.take(g, o, axis=ax), ax), axis=ax)
            gx[at(o)] += seg
        return (gx,)

    return make_op("adaptive_max_pool", out, (x,), back_max)


def adaptive_pool2d(x, out_h: int, out_w: int, mode: str = "max") -> Tensor:
    """Adaptive pooling of the two trailing (H, W) axes of [C,H,W] or [B,C,H,W]."""
    x = _as_tensor(x)
    if x.ndim < 3:
        raise ValueError("adaptive_pool2d expects [C,H,W] or [B,C,H,W]")
    return pool_axis(pool_axis(x, -1, out_w, mode), -2, out_h, mode)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of [B,C,H,W] (or [C,H,W]) input with [O,C,kh,kw] weight."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ValueError(f"input has {C} channels, weight expects {Cw}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError("convolution output would be empty")

    # channel-major layout [C, B, H, W]: patches and their adjoints need only 4-d copies
    xp = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3))
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    N = B * Ho * Wo
    cols = np.empty((kh, kw, C, B, Ho, Wo), dtype=np.result_type(xp, weight.data))
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
    cols = cols.reshape(kh * kw * C, N)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
    out = wmat @ cols
    inputs: tuple = (x, weight)
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data[:, None]
        inputs = (x, weight, bias)
    out = out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)

    def back(g):
        gT = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, N)
        gw = (gT @ cols.T).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gT).reshape(kh, kw, C, B, Ho, Wo)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += dcols[i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W].transpose(1, 0, 2, 3)
        grads = (gx, np.ascontiguousarray(gw))
        if bias is not None:
            grads += (gT.sum(axis=1),)
        return grads

    y = make_op("conv2d", np.ascontiguousarray(out), inputs, back)
    return reshape(y, y.shape[1:]) if squeeze else y


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float, dtype):
    bound = np.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None, bias: bool = True,
                 dtype=np.float64, gain: float = 6.0):
        if kernel < 1 or stride < 1:
            raise ValueError("kernel and stride must be >= 1")
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(
            _fan_in_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, gain, dtype),
            name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype), name=f"{name}.bias") if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self) -> list[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class Linear:
    """y = x W^T (+ b), weight stored as [out, in]."""

    def __init__(self, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator | None = None, bias: bool = True,
                 dtype=np.float64, gain: float = 3.0):
        if in_dim < 1 or out_dim < 1:
            raise ValueError("linear dimensions must be positive")
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(_fan_in_uniform(rng, (out_dim, in_dim), in_dim, gain, dtype),
                                name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype), name=f"{name}.bias") if bias else None

    def __call__(self, x) -> Tensor:
        y = matmul(x, transpose(self.weight))
        return y + self.bias if self.bias is not None else y

    def parameters(self) -> list[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


def concat_pool(x, out_h: int, out_w: int = 1) -> Tensor:
    """Adaptive max and avg pooling concatenated on the channel axis."""
    ch = x.ndim - 3
    return concat([adaptive_pool2d(x, out_h, out_w, "max"),
                   adaptive_pool2d(x, out_h, out_w, "avg")], axis=ch)
