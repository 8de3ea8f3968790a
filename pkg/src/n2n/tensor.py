"""Dense array kernels shared by the graph engine and the surgery code.

Tensors are plain :class:`numpy.ndarray` objects in row-major NCHW layout.
Convolution and pooling run through numba loops whose per-output
accumulation order is fixed (input channel, kernel row, kernel column), so
results are deterministic and reproducible by a naive reference loop.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(data, dtype=None) -> np.ndarray:
    """Validate and return ``data`` as a C-contiguous float tensor.

    Rank-0 arrays and zero-extent dimensions are rejected.
    """
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        if dtype is None and (np.issubdtype(arr.dtype, np.integer) or np.issubdtype(arr.dtype, np.floating)):
            arr = arr.astype(np.float32)
        else:
            raise TypeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    if arr.ndim < 1:
        raise DimensionError("tensors must have rank >= 1")
    if any(d == 0 for d in arr.shape):
        raise DimensionError(f"zero-extent dimension in shape {arr.shape}")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride_h", "stride_w"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ValueError("padding must be non-negative")

    @classmethod
    def same(cls, in_channels, out_channels, kernel_h, kernel_w=None):
        """Stride-1 geometry with padding that keeps the spatial extent (odd kernels)."""
        kernel_w = kernel_h if kernel_w is None else kernel_w
        return cls(in_channels, out_channels, kernel_h, kernel_w,
                   pad_h=(kernel_h - 1) // 2, pad_w=(kernel_w - 1) // 2)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1
        ow = (w + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1
        if oh < 1 or ow < 1:
            raise DimensionError(
                f"degenerate conv output {oh}x{ow} for input {h}x{w} and geometry {self}")
        return oh, ow

    def replace(self, **changes) -> "ConvGeometry":
        fields = dict(self.__dict__)
        fields.update(changes)
        return ConvGeometry(**fields)


def _check_same_dtype(*arrays):
    dtypes = {a.dtype for a in arrays}
    if len(dtypes) != 1:
        raise TypeError(f"dtype mismatch: {sorted(str(d) for d in dtypes)}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    _check_same_dtype(a, b)
    return a @ b


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _valid_range(out_len, in_len, stride, pad, offset):
    """Output positions ``o`` with ``0 <= o * stride - pad + offset < in_len``."""
    lo = 0
    while lo < out_len and lo * stride - pad + offset < 0:
        lo += 1
    hi = out_len
    while hi > lo and (hi - 1) * stride - pad + offset >= in_len:
        hi -= 1
    return lo, hi


# Kernels work on batch-last copies ([C, H, W, N]) so the innermost loop is a
# contiguous run over examples; each output still sums over (c, i, j) in order.
@numba.njit(cache=True, error_model="numpy")
def _conv2d_fwd(xt, w, sh, sw, ph, pw, ot):
    C, H, W, N = xt.shape
    K, _, kh, kw = w.shape
    OH, OW = ot.shape[1], ot.shape[2]
    for k in range(K):
        for c in range(C):
            for i in range(kh):
                oh_lo, oh_hi = _valid_range(OH, H, sh, ph, i)
                for j in range(kw):
                    ow_lo, ow_hi = _valid_range(OW, W, sw, pw, j)
                    wv = w[k, c, i, j]
                    for oh in range(oh_lo, oh_hi):
                        ih = oh * sh - ph + i
                        for ow in range(ow_lo, ow_hi):
                            o = ot[k, oh, ow]
                            s = xt[c, ih, ow * sw - pw + j]
                            for n in range(N):
                                o[n] += s[n] * wv


@numba.njit(cache=True, error_model="numpy")
def _conv2d_bwd(xt, w, dt, sh, sw, ph, pw, dxt, dw):
    C, H, W, N = xt.shape
    K, _, kh, kw = w.shape
    OH, OW = dt.shape[1], dt.shape[2]
    acc = np.zeros(N, dtype=xt.dtype)
    for k in range(K):
        for c in range(C):
            for i in range(kh):
                oh_lo, oh_hi = _valid_range(OH, H, sh, ph, i)
                for j in range(kw):
                    ow_lo, ow_hi = _valid_range(OW, W, sw, pw, j)
                    wv = w[k, c, i, j]
                    acc[:] = 0
                    for oh in range(oh_lo, oh_hi):
                        ih = oh * sh - ph + i
                        for ow in range(ow_lo, ow_hi):
                            iw = ow * sw - pw + j
                            g = dt[k, oh, ow]
                            s = xt[c, ih, iw]
                            d = dxt[c, ih, iw]
                            for n in range(N):
                                d[n] += g[n] * wv
                                acc[n] += g[n] * s[n]
                    total = dw[k, c, i, j]
                    for n in range(N):
                        total += acc[n]
                    dw[k, c, i, j] = total


def _batch_last(a):
    return np.ascontiguousarray(np.moveaxis(a, 0, -1))


def _batch_first(a):
    return np.ascontiguousarray(np.moveaxis(a, -1, 0))


def _check_conv(x, kernel, geom):
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects [N,C,H,W] and [K,C,kh,kw], got {x.shape} and {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(
            f"kernel expects {kernel.shape[1]} input channels, input has {x.shape[1]}")
    if kernel.shape[2:] != (geom.kernel_h, geom.kernel_w):
        raise DimensionError(f"kernel {kernel.shape} does not match geometry {geom}")
    _check_same_dtype(x, kernel)
    return geom.output_hw(x.shape[2], x.shape[3])


def conv2d(x: np.ndarray, kernel: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Zero-padded cross-correlation (no kernel flip), NCHW."""
    oh, ow = _check_conv(x, kernel, geom)
    ot = np.zeros((kernel.shape[0], oh, ow, x.shape[0]), dtype=x.dtype)
    _conv2d_fwd(_batch_last(x), np.ascontiguousarray(kernel),
                geom.stride_h, geom.stride_w, geom.pad_h, geom.pad_w, ot)
    return _batch_first(ot)


def conv2d_backward(x, kernel, geom, dout):
    """Return ``(dx, dkernel)`` for :func:`conv2d`."""
    _check_conv(x, kernel, geom)
    xt = _batch_last(x)
    dxt = np.zeros_like(xt)
    dw = np.zeros_like(kernel)
    _conv2d_bwd(xt, np.ascontiguousarray(kernel), _batch_last(np.asarray(dout, dtype=x.dtype)),
                geom.stride_h, geom.stride_w, geom.pad_h, geom.pad_w, dxt, dw)
    return _batch_first(dxt), dw


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _maxpool_fwd(x, size, stride, pad, out, arg):
    N, C, H, W = x.shape
    OH, OW = out.shape[2], out.shape[3]
    for n in range(N):
        for c in range(C):
            for oh in range(OH):
                for ow in range(OW):
                    best = -np.inf
                    best_idx = -1
                    for i in range(size):
                        ih = oh * stride - pad + i
                        if ih < 0 or ih >= H:
                            continue
                        for j in range(size):
                            iw = ow * stride - pad + j
                            if iw < 0 or iw >= W:
                                continue
                            v = x[n, c, ih, iw]
                            if v > best or best_idx < 0:
                                best = v
                                best_idx = ih * W + iw
                    out[n, c, oh, ow] = best
                    arg[n, c, oh, ow] = best_idx


@numba.njit(cache=True)
def _maxpool_bwd(dout, arg, dx):
    N, C, OH, OW = dout.shape
    W = dx.shape[3]
    for n in range(N):
        for c in range(C):
            for oh in range(OH):
                for ow in range(OW):
                    idx = arg[n, c, oh, ow]
                    dx[n, c, idx // W, idx % W] += dout[n, c, oh, ow]


@numba.njit(cache=True)
def _avgpool_fwd(x, size, stride, pad, out):
    N, C, H, W = x.shape
    OH, OW = out.shape[2], out.shape[3]
    inv = 1.0 / (size * size)
    for n in range(N):
        for c in range(C):
            for oh in range(OH):
                for ow in range(OW):
                    acc = out[n, c, oh, ow] * 0
                    for i in range(size):
                        ih = oh * stride - pad + i
                        if ih < 0 or ih >= H:
                            continue
                        for j in range(size):
                            iw = ow * stride - pad + j
                            if iw < 0 or iw >= W:
                                continue
                            acc += x[n, c, ih, iw]
                    out[n, c, oh, ow] = acc * inv


@numba.njit(cache=True)
def _avgpool_bwd(dout, size, stride, pad, dx):
    N, C, OH, OW = dout.shape
    H, W = dx.shape[2], dx.shape[3]
    inv = 1.0 / (size * size)
    for n in range(N):
        for c in range(C):
            for oh in range(OH):
                for ow in range(OW):
                    g = dout[n, c, oh, ow] * inv
                    for i in range(size):
                        ih = oh * stride - pad + i
                        if ih < 0 or ih >= H:
                            continue
                        for j in range(size):
                            iw = ow * stride - pad + j
                            if iw < 0 or iw >= W:
                                continue
                            dx[n, c, ih, iw] += g


def pool_output_hw(h, w, size, stride, pad):
    oh = (h + 2 * pad - size) // stride + 1
    ow = (w + 2 * pad - size) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"degenerate pool output {oh}x{ow} for input {h}x{w}")
    return oh, ow


def max_pool2d(x, size, stride=1, pad=0):
    """Max pooling over square windows; padded positions never win.

    Returns ``(out, argmax)`` where ``argmax`` holds flat ``h*W + w`` indices.
    """
    oh, ow = pool_output_hw(x.shape[2], x.shape[3], size, stride, pad)
    out = np.empty((x.shape[0], x.shape[1], oh, ow), dtype=x.dtype)
    arg = np.empty(out.shape, dtype=np.int64)
    _maxpool_fwd(np.ascontiguousarray(x), size, stride, pad, out, arg)
    return out, arg


def max_pool2d_backward(dout, argmax, input_shape):
    dx = np.zeros(input_shape, dtype=dout.dtype)
    _maxpool_bwd(np.ascontiguousarray(dout), argmax, dx)
    return dx


def avg_pool2d(x, size, stride=1, pad=0):
    """Average pooling; zero padding counts toward the window size."""
    oh, ow = pool_output_hw(x.shape[2], x.shape[3], size, stride, pad)
    out = np.zeros((x.shape[0], x.shape[1], oh, ow), dtype=x.dtype)
    _avgpool_fwd(np.ascontiguousarray(x), size, stride, pad, out)
    return out


def avg_pool2d_backward(dout, size, stride, pad, input_shape):
    dx = np.zeros(input_shape, dtype=dout.dtype)
    _avgpool_bwd(np.ascontiguousarray(dout), size, stride, pad, dx)
    return dx


# --------------------------------------------------------------------------
# elementwise and reductions
# --------------------------------------------------------------------------

def relu(t):
    return np.maximum(t, 0).astype(t.dtype, copy=False)


def sigmoid(t):
    return (1 / (1 + np.exp(-t))).astype(t.dtype, copy=False)


def maxout(t, pieces: int):
    """Max over groups of ``pieces`` consecutive units along axis 1."""
    if t.shape[1] % pieces:
        raise DimensionError(f"maxout: {t.shape[1]} units not divisible by k={pieces}")
    grouped = t.reshape(t.shape[0], t.shape[1] // pieces, pieces, *t.shape[2:])
    return grouped.max(axis=2)


def maxout_backward(t, pieces, dout):
    grouped = t.reshape(t.shape[0], t.shape[1] // pieces, pieces, *t.shape[2:])
    winner = grouped.argmax(axis=2)
    mask = np.zeros_like(grouped)
    np.put_along_axis(mask, np.expand_dims(winner, 2), 1, axis=2)
    return (mask * np.expand_dims(dout, 2)).reshape(t.shape)


def add_bias(t, bias):
    """Add a per-channel bias along axis 1."""
    if bias.ndim != 1 or bias.shape[0] != t.shape[1]:
        raise DimensionError(f"bias {bias.shape} does not match channels of {t.shape}")
    return t + bias.reshape((1, -1) + (1,) * (t.ndim - 2))


def elementwise_mul(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a * b


def elementwise_add(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a + b


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def argmax_rows(t):
    return np.argmax(t, axis=1)


def batch_moments(t):
    """Per-channel mean and population variance over every axis except 1."""
    if t.ndim < 2 or t.shape[0] < 2:
        raise DimensionError(f"batch_moments needs a batch of at least 2, got shape {t.shape}")
    axes = (0,) + tuple(range(2, t.ndim))
    mean = t.mean(axis=axes)
    centered = t - mean.reshape((1, -1) + (1,) * (t.ndim - 2))
    var = (centered * centered).mean(axis=axes)
    return mean, var
