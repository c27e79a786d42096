"""Differentiable primitives.

Tensors are laid out ``(N, C, H, W)`` for image operators.  Every VJP is
expressed with the primitives in this module so gradients stay
differentiable.  Broadcasting is limited to scalar * tensor (:func:`smul`)
and explicit per-channel broadcasts.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..errors import StructuralError
from .engine import Tensor, as_tensor, record


def _same_shape(op: str, *ts: Tensor) -> None:
    s = ts[0].shape
    for t in ts[1:]:
        if t.shape != s:
            raise StructuralError(f"{op}: shape mismatch {s} vs {t.shape}")


def const(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64))


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record(a.data + b.data, (a, b), lambda g, n: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return record(a.data - b.data, (a, b),
                  lambda g, n: (g, scale(g, -1.0) if n[1] else None), "sub")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(a.data * c, (a,), lambda g, n: (scale(g, c),), "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _same_shape("mul", a, b)

    def vjp(g, n):
        return (mul(g, b) if n[0] else None, mul(g, a) if n[1] else None)

    return record(a.data * b.data, (a, b), vjp, "mul")


def smul(s: Tensor, t: Tensor) -> Tensor:
    """Scalar tensor times tensor."""
    if s.shape != ():
        raise StructuralError(f"smul: first operand must be scalar, got {s.shape}")

    def vjp(g, n):
        return (total(mul(g, t)) if n[0] else None, smul(s, g) if n[1] else None)

    return record(s.data * t.data, (s, t), vjp, "smul")


def relu(x: Tensor) -> Tensor:
    step = const((x.data > 0).astype(np.float64))
    return record(np.maximum(x.data, 0.0), (x,), lambda g, n: (mul(g, step),), "relu")


def tanh(x: Tensor) -> Tensor:
    y_data = np.tanh(x.data)

    def vjp(g, n):
        gy = mul(g, y)
        return (sub(g, mul(gy, y)),)

    y = record(y_data, (x,), vjp, "tanh")
    return y


def sigmoid(x: Tensor) -> Tensor:
    y_data = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def vjp(g, n):
        gy = mul(g, y)
        return (sub(gy, mul(gy, y)),)

    y = record(y_data, (x,), vjp, "sigmoid")
    return y


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)

    def vjp(g, n):
        return (mul(g, scale(power(x, p - 1.0), p)),)

    return record(np.power(x.data, p), (x,), vjp, "power")


# ---------------------------------------------------------------- reductions

def total(x: Tensor) -> Tensor:
    """Sum of all entries (scalar)."""
    ones = const(np.ones(x.shape))
    return record(np.array(x.data.sum()), (x,), lambda g, n: (smul(g, ones),), "sum")


def masked_sq_norm(r: Tensor, mask=None) -> Tensor:
    """``sum(mask * r**2)``; ``mask`` is a constant array or ``None``."""
    if mask is None:
        m = None
        rf = r.data.ravel()
        val = rf @ rf
    else:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
        if m.shape != r.shape:
            raise StructuralError(f"masked_sq_norm: mask {m.shape} vs residual {r.shape}")
        val = np.sum(m * r.data * r.data)
    mt = None if m is None else const(2.0 * m)

    def vjp(g, n):
        w = scale(r, 2.0) if mt is None else mul(r, mt)
        return (smul(g, w),)

    return record(np.array(val), (r,), vjp, "masked_sq_norm")


def sq_norm(r: Tensor) -> Tensor:
    return masked_sq_norm(r, None)


# ---------------------------------------------------------------- convolution

def _pad_flat(x: np.ndarray, p: int) -> tuple[np.ndarray, int]:
    n, c, h, w = x.shape
    wp = w + 2 * p
    xp = np.zeros((n, c, h + 2 * p + 1, wp))
    xp[:, :, p:p + h, p:p + w] = x
    return xp.reshape(n, c, -1), wp


def _columns(x: np.ndarray, k: int) -> tuple[np.ndarray, int]:
    """Shifted copies of the padded input, shape ``(k*k*C, N*H*Wp)``."""
    n, c, h, w = x.shape
    p = k // 2
    xf, wp = _pad_flat(x, p)
    length = h * wp
    cols = np.empty((k, k, c, n, length))
    for a in range(k):
        for b in range(k):
            off = a * wp + b
            cols[a, b] = xf[:, :, off:off + length].transpose(1, 0, 2)
    return cols.reshape(k * k * c, n * length), wp


def _conv_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    cols, wp = _columns(x, k)
    wmat = w.transpose(0, 2, 3, 1).reshape(co, -1)
    out = (wmat @ cols).reshape(co, n, h, wp)[:, :, :, :wd]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    n, c, h, wd = x.shape
    co = g.shape[1]
    cols, wp = _columns(x, k)
    gp = np.zeros((co, n, h, wp))
    gp[:, :, :, :wd] = g.transpose(1, 0, 2, 3)
    dw = gp.reshape(co, -1) @ cols.T
    return np.ascontiguousarray(dw.reshape(co, k, k, c).transpose(0, 3, 1, 2))


def _check_conv(x: Tensor, w: Tensor) -> None:
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise StructuralError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise StructuralError(f"conv2d: kernel expects {w.shape[1]} channels, input has {x.shape[1]}")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise StructuralError(f"conv2d: kernels must be square and odd, got {w.shape[2:]}")


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Zero-padded 'same' cross-correlation, stride 1.  x: (N,Ci,H,W), w: (Co,Ci,k,k)."""
    _check_conv(x, w)
    k = w.shape[2]

    def vjp(g, n):
        gx = conv2d(g, flip_transpose(w)) if n[0] else None
        gw = conv2d_weight_grad(x, g, k) if n[1] else None
        return gx, gw

    return record(_conv_forward(x.data, w.data), (x, w), vjp, "conv2d")


def flip_transpose(w: Tensor) -> Tensor:
    """Spatially flipped kernel with in/out channels swapped (the conv adjoint kernel)."""
    data = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return record(data, (w,), lambda g, n: (flip_transpose(g),), "flip_transpose")


def conv2d_weight_grad(x: Tensor, g: Tensor, k: int) -> Tensor:
    """Kernel gradient of :func:`conv2d` given output cotangent ``g``."""
    if x.shape[0] != g.shape[0] or x.shape[2:] != g.shape[2:]:
        raise StructuralError(f"weight grad: {x.shape} vs {g.shape}")

    def vjp(G, n):
        gx = conv2d(g, flip_transpose(G)) if n[0] else None
        gg = conv2d(x, G) if n[1] else None
        return gx, gg

    return record(_conv_weight_grad(x.data, g.data, k), (x, g), vjp, "conv2d_weight_grad")


def channel_broadcast(b: Tensor, shape: tuple[int, ...]) -> Tensor:
    if b.data.ndim != 1 or len(shape) != 4 or shape[1] != b.shape[0]:
        raise StructuralError(f"channel_broadcast: {b.shape} -> {shape}")
    data = np.broadcast_to(b.data[None, :, None, None], shape).copy()
    return record(data, (b,), lambda g, n: (channel_sum(g),), "channel_broadcast")


def channel_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return record(x.data.sum(axis=(0, 2, 3)), (x,),
                  lambda g, n: (channel_broadcast(g, shape),), "channel_sum")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    return add(x, channel_broadcast(b, x.shape))


def conv2d_bias(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = conv2d(x, w)
    return y if b is None else add_bias(y, b)


def bilinear(u: Tensor, wu: Tensor, v: Tensor, wv: Tensor) -> Tensor:
    """``conv(u; wu) * conv(v; wv)``."""
    return mul(conv2d(u, wu), conv2d(v, wv))


# ---------------------------------------------------------------- linear maps along an axis

def axis_linear(x: Tensor, m: np.ndarray, axis: int) -> Tensor:
    """Apply constant matrix ``m`` along ``axis``: out[.., i, ..] = sum_j m[i, j] x[.., j, ..]."""
    m = np.asarray(m, dtype=np.float64)
    axis = axis % x.data.ndim
    if m.ndim != 2 or m.shape[1] != x.shape[axis]:
        raise StructuralError(f"axis_linear: matrix {m.shape} vs extent {x.shape[axis]}")
    out = np.moveaxis(np.tensordot(m, x.data, axes=(1, axis)), 0, axis)
    mt = m.T
    return record(np.ascontiguousarray(out), (x,),
                  lambda g, n: (axis_linear(g, mt, axis),), "axis_linear")


@lru_cache(maxsize=None)
def _pool_matrix(n: int) -> np.ndarray:
    if n % 2:
        raise StructuralError(f"avgpool2 needs even extents, got {n}")
    p = np.zeros((n // 2, n))
    for i in range(n // 2):
        p[i, 2 * i] = p[i, 2 * i + 1] = 0.5
    return p


@lru_cache(maxsize=None)
def _upsample_matrix(n: int) -> np.ndarray:
    """Bilinear x2 upsampling along one axis, half-pixel centres, clamped edges."""
    u = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c, hi_c = min(max(lo, 0), n - 1), min(max(lo + 1, 0), n - 1)
        u[i, lo_c] += 1.0 - frac
        u[i, hi_c] += frac
    return u


def avgpool2(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return axis_linear(axis_linear(x, _pool_matrix(h), -2), _pool_matrix(w), -1)


def upsample_bilinear2(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return axis_linear(axis_linear(x, _upsample_matrix(h), -2), _upsample_matrix(w), -1)


# ---------------------------------------------------------------- structural

def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.data.ndim
    total_len = x.shape[axis]
    if not 0 <= start <= stop <= total_len:
        raise StructuralError(f"slice [{start}:{stop}] out of range for extent {total_len}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    data = np.ascontiguousarray(x.data[tuple(idx)])
    return record(data, (x,), lambda g, n: (pad_axis(g, axis, start, total_len),), "slice")


def pad_axis(x: Tensor, axis: int, start: int, total_len: int) -> Tensor:
    """Embed ``x`` into zeros of extent ``total_len`` along ``axis`` at ``start``."""
    axis = axis % x.data.ndim
    stop = start + x.shape[axis]
    if stop > total_len or start < 0:
        raise StructuralError("pad_axis: does not fit")
    shape = list(x.shape)
    shape[axis] = total_len
    data = np.zeros(shape)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    data[tuple(idx)] = x.data
    return record(data, (x,), lambda g, n: (slice_axis(g, axis, start, stop),), "pad")


def concat(xs: list[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise StructuralError("concat of nothing")
    nd = xs[0].data.ndim
    axis = axis % nd
    for t in xs[1:]:
        if t.data.ndim != nd or any(t.shape[i] != xs[0].shape[i] for i in range(nd) if i != axis):
            raise StructuralError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def vjp(g, n):
        return tuple(slice_axis(g, axis, int(bounds[i]), int(bounds[i + 1])) if n[i] else None
                     for i in range(len(xs)))

    return record(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), vjp, "concat")


def concat_channels(xs: list[Tensor]) -> Tensor:
    return concat(xs, axis=1)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    data = x.data.reshape(shape)
    return record(data, (x,), lambda g, n: (reshape(g, src),), "reshape")


__all__ = [
    "add", "sub", "scale", "mul", "smul", "relu", "tanh", "sigmoid", "power",
    "total", "masked_sq_norm", "sq_norm", "conv2d", "conv2d_bias", "flip_transpose",
    "conv2d_weight_grad", "channel_broadcast", "channel_sum", "add_bias", "bilinear",
    "axis_linear", "avgpool2", "upsample_bilinear2", "slice_axis", "pad_axis",
    "concat", "concat_channels", "reshape", "const", "as_tensor",
]
