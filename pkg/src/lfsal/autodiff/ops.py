"""Differentiable primitives.

Shapes must match exactly for binary operations; the only broadcast allowed is
a single-element tensor (or Python number) against any tensor.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result


def _operands(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    a, b = as_tensor(a, like), as_tensor(b, like)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _out_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    return a.shape if b.size == 1 else b.shape


def _fit(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def _scalar(t: Tensor):
    return t.data.reshape(-1)[0] if t.size == 1 else t.data


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    shape = _out_shape(a, b)
    out = (_scalar(a) if a.shape != shape else a.data) + (_scalar(b) if b.shape != shape else b.data)
    return make_result(np.asarray(out).reshape(shape), (a, b), lambda g: (_fit(g, a), _fit(g, b)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    shape = _out_shape(a, b)
    out = (_scalar(a) if a.shape != shape else a.data) - (_scalar(b) if b.shape != shape else b.data)
    return make_result(np.asarray(out).reshape(shape), (a, b), lambda g: (_fit(g, a), _fit(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    shape = _out_shape(a, b)
    av = _scalar(a) if a.shape != shape else a.data
    bv = _scalar(b) if b.shape != shape else b.data
    out = np.asarray(av * bv).reshape(shape)
    return make_result(out, (a, b), lambda g: (_fit(g * bv, a), _fit(g * av, b)))


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    shape = _out_shape(a, b)
    av = _scalar(a) if a.shape != shape else a.data
    bv = _scalar(b) if b.shape != shape else b.data
    out = np.asarray(av / bv).reshape(shape)
    return make_result(out, (a, b), lambda g: (_fit(g / bv, a), _fit(-g * out / bv, b)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard needs equal shapes: {a.shape} vs {b.shape}")
    return mul(a, b)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input was inside."""
    mask = (x.data >= lo) & (x.data <= hi)
    return make_result(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def pointwise(x: Tensor, kind: str, y: Tensor | None = None) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    if kind in ("add", "hadamard"):
        if y is None or y.shape != x.shape:
            raise ShapeError(f"{kind} needs a second operand of shape {x.shape}, got {None if y is None else y.shape}")
        return add(x, y) if kind == "add" else mul(x, y)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.sum() / n, dtype=x.dtype).reshape(1)
    return make_result(out, (x,), lambda g: (np.full(x.shape, g.reshape(()) / n, dtype=x.dtype),))


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=True)

    def back(g):
        return (np.broadcast_to(g.reshape(out.shape) / n, x.shape).copy(),)

    res = out if keepdims else out.squeeze(axis)
    if res.ndim == 0:
        res = res.reshape(1)
    return make_result(res, (x,), back)


def max_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    axis = _check_axis(x, axis)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g.reshape(out.shape), axis=axis)
        return (gx,)

    res = out if keepdims else out.squeeze(axis)
    if res.ndim == 0:
        res = res.reshape(1)
    return make_result(res, (x,), back)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.data.ndim


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {x.shape}")
    return make_result(x.data.T.copy(), (x,), lambda g: (g.T.copy(),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"invalid permutation {axes} for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result(out, (x,), lambda g: (g.transpose(inverse),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return make_result(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def softmax(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), back)


softmax_axis = softmax


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for t in xs[1:]:
        if t.data.ndim != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise ShapeError(f"concat extent mismatch: {[x.shape for x in xs]}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, xs, back)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=0)


def pad_edge(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Replicate the first/last slice along ``axis``."""
    axis = _check_axis(x, axis)
    if before == 0 and after == 0:
        return x
    widths = [(0, 0)] * x.data.ndim
    widths[axis] = (before, after)
    out = np.pad(x.data, widths, mode="edge")
    n = x.shape[axis]

    def back(g):
        gx = np.take(g, range(before, before + n), axis=axis).copy()
        head = np.take(g, range(before), axis=axis).sum(axis=axis)
        tail = np.take(g, range(before + n, before + n + after), axis=axis).sum(axis=axis)
        first = [slice(None)] * x.data.ndim
        first[axis] = 0
        last = list(first)
        last[axis] = n - 1
        gx[tuple(first)] += head
        gx[tuple(last)] += tail
        return (gx,)

    return make_result(out, (x,), back)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel maximum of a ``C x ...`` map; ties resolve to the first entry in row-major order."""
    c = x.shape[0]
    flat = x.data.reshape(c, -1)
    idx = np.argmax(flat, axis=1)
    out = flat[np.arange(c), idx]

    def back(g):
        gx = np.zeros_like(flat)
        gx[np.arange(c), idx] = g
        return (gx.reshape(x.shape),)

    return make_result(out, (x,), back)


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 1 or w.data.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeError(f"fully_connected shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    out = w.data @ x.data + b.data
    return make_result(out, (x, w, b), lambda g: (w.data.T @ g, np.outer(g, x.data), g))


def _per_channel(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def scale_channels(x: Tensor, w: Tensor) -> Tensor:
    """Multiply channel ``c`` of a ``C x ...`` map by ``w[c]``."""
    if w.shape != (x.shape[0],):
        raise ShapeError(f"channel weights {w.shape} do not match map {x.shape}")
    wv = _per_channel(w.data, x.data.ndim)
    out = x.data * wv
    axes = tuple(range(1, x.data.ndim))
    return make_result(out, (x, w), lambda g: (g * wv, (g * x.data).sum(axis=axes)))


def scale_spatial(x: Tensor, mask: Tensor) -> Tensor:
    """Multiply every channel of ``x`` by a ``1 x ...`` mask."""
    if mask.shape[0] != 1 or mask.shape[1:] != x.shape[1:]:
        raise ShapeError(f"spatial mask {mask.shape} does not match map {x.shape}")
    out = x.data * mask.data
    return make_result(out, (x, mask), lambda g: (g * mask.data, (g * x.data).sum(axis=0, keepdims=True)))


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``scale * x + shift`` (normalization layer without batch statistics)."""
    c = x.shape[0]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"affine params {scale.shape}/{shift.shape} do not match {x.shape}")
    s = _per_channel(scale.data, x.data.ndim)
    out = x.data * s + _per_channel(shift.data, x.data.ndim)
    axes = tuple(range(1, x.data.ndim))
    return make_result(
        out, (x, scale, shift), lambda g: (g * s, (g * x.data).sum(axis=axes), g.sum(axis=axes))
    )


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights (half-pixel centres, edge clamped)."""
    a = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        a[i, i0] += 1.0 - frac
        a[i, i1] += frac
    a.setflags(write=False)
    return a


def resize_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    """Bilinear resize of a ``C x H x W`` map (align-corners-false convention)."""
    _, h, w = x.shape
    ah = _interp_matrix(h, height).astype(x.dtype, copy=False)
    aw = _interp_matrix(w, width).astype(x.dtype, copy=False)
    out = np.einsum("ih,chw,jw->cij", ah, x.data, aw, optimize=True)
    return make_result(out, (x,), lambda g: (np.einsum("ih,cij,jw->chw", ah, g, aw, optimize=True),))


def upsample2x(x: Tensor, mode: str = "bilinear") -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"upsample2x needs a C x H x W map, got {x.shape}")
    if mode == "bilinear":
        return resize_bilinear(x, 2 * x.shape[1], 2 * x.shape[2])
    if mode != "nearest":
        raise ValueError(f"unknown upsample mode {mode!r}")
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)
    c, h, w = x.shape
    return make_result(out, (x,), lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),))


def upsample_to(x: Tensor, height: int, width: int, mode: str = "bilinear") -> Tensor:
    """Resize to an exact size; ``nearest`` requires an integer factor."""
    if x.shape[1:] == (height, width):
        return x
    if mode == "bilinear":
        return resize_bilinear(x, height, width)
    while x.shape[1] < height:
        x = upsample2x(x, "nearest")
    if x.shape[1:] != (height, width):
        raise ShapeError(f"cannot nearest-upsample {x.shape} to {height}x{width}")
    return x
