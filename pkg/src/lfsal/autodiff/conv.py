"""Convolutions over ``C x *spatial`` tensors (cross-correlation, zero padding)."""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, make_result


def _tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(a) for a in v)
    if len(v) != n:
        raise ShapeError(f"expected {n} values, got {v}")
    return v


def _out_extent(n: int, k: int, s: int, p: int, d: int) -> int:
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def _im2col(xp: np.ndarray, ksize, stride, dil, out_sp) -> np.ndarray:
    """Gather patches of a padded ``C x *sp`` array into ``(C*prod(k)) x prod(out)``."""
    c = xp.shape[0]
    cols = np.empty((c,) + tuple(ksize) + tuple(out_sp), dtype=xp.dtype)
    for offs in itertools.product(*(range(k) for k in ksize)):
        sl = tuple(
            slice(o * d, o * d + s * (n - 1) + 1, s) for o, d, s, n in zip(offs, dil, stride, out_sp)
        )
        cols[(slice(None),) + offs] = xp[(slice(None),) + sl]
    return cols.reshape(c * int(np.prod(ksize)), -1)


def _col2im(cols: np.ndarray, padded_shape, ksize, stride, dil, out_sp) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into a padded array."""
    c = padded_shape[0]
    cols = cols.reshape((c,) + tuple(ksize) + tuple(out_sp))
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for offs in itertools.product(*(range(k) for k in ksize)):
        sl = tuple(
            slice(o * d, o * d + s * (n - 1) + 1, s) for o, d, s, n in zip(offs, dil, stride, out_sp)
        )
        xp[(slice(None),) + sl] += cols[(slice(None),) + offs]
    return xp


def _unpad(xp: np.ndarray, pad) -> np.ndarray:
    sl = tuple(slice(p, xp.shape[i + 1] - p) for i, p in enumerate(pad))
    return xp[(slice(None),) + sl]


def _geometry(x: Tensor, kernel: Tensor, stride, pad, dilation, nsp: int):
    if x.data.ndim != nsp + 1 or kernel.data.ndim != nsp + 2:
        raise ShapeError(f"expected {nsp}-d convolution operands, got x {x.shape}, kernel {kernel.shape}")
    if kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"kernel expects {kernel.shape[1]} input channels, map has {x.shape[0]}")
    ksize = kernel.shape[2:]
    stride, pad, dil = _tuple(stride, nsp), _tuple(pad, nsp), _tuple(dilation, nsp)
    if min(stride) < 1 or min(dil) < 1 or min(pad) < 0:
        raise ShapeError(f"invalid geometry stride={stride} pad={pad} dilation={dil}")
    out_sp = tuple(_out_extent(n, k, s, p, d) for n, k, s, p, d in zip(x.shape[1:], ksize, stride, pad, dil))
    if min(out_sp) < 1:
        raise ShapeError(f"output extent {out_sp} < 1 for input {x.shape}, kernel {kernel.shape}")
    return ksize, stride, pad, dil, out_sp


def _conv(x: Tensor, kernel: Tensor, stride, pad, dilation, nsp: int) -> Tensor:
    ksize, stride, pad, dil, out_sp = _geometry(x, kernel, stride, pad, dilation, nsp)
    xp = np.pad(x.data, [(0, 0)] + [(p, p) for p in pad]) if any(pad) else x.data
    cols = _im2col(xp, ksize, stride, dil, out_sp)
    w = kernel.data.reshape(kernel.shape[0], -1)
    out = (w @ cols).reshape((kernel.shape[0],) + out_sp)

    def back(g):
        g2 = g.reshape(kernel.shape[0], -1)
        gw = (g2 @ cols.T).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gx = _unpad(_col2im(w.T @ g2, xp.shape, ksize, stride, dil, out_sp), pad)
        return gx, gw

    return make_result(out, (x, kernel), back)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0, dilation: int = 1) -> Tensor:
    """``C_in x H x W`` map with ``C_out x C_in x k x k`` kernel -> ``C_out x H' x W'``."""
    if kernel.data.ndim == 4 and (kernel.shape[2] % 2 == 0 or kernel.shape[3] % 2 == 0):
        raise ShapeError(f"conv2d needs odd kernel extents, got {kernel.shape[2:]}")
    return _conv(x, kernel, stride, pad, dilation, 2)


def conv3d(x: Tensor, kernel: Tensor, strides: int | Sequence[int] = 1, pads: int | Sequence[int] = 0) -> Tensor:
    """``C_in x T x H x W`` volume with ``C_out x C_in x kt x k x k`` kernel."""
    return _conv(x, kernel, strides, pads, 1, 3)


def transposed_conv2d(x: Tensor, kernel: Tensor, stride: int = 2, pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with the same kernel.

    ``kernel`` is ``C_in x C_out x k x k`` where ``C_in`` matches ``x``; output
    extent is ``stride * (n - 1) + k - 2 * pad``.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4 or kernel.shape[0] != x.shape[0]:
        raise ShapeError(f"transposed_conv2d shape mismatch: x {x.shape}, kernel {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid geometry stride={stride} pad={pad}")
    ksize = kernel.shape[2:]
    in_sp = x.shape[1:]
    out_sp = tuple(stride * (n - 1) + k - 2 * pad for n, k in zip(in_sp, ksize))
    if min(out_sp) < 1:
        raise ShapeError(f"transposed_conv2d output extent {out_sp} < 1")
    c_out = kernel.shape[1]
    padded = (c_out,) + tuple(n + 2 * pad for n in out_sp)
    strides, dil = (stride, stride), (1, 1)
    w = kernel.data.reshape(kernel.shape[0], -1)
    xf = x.data.reshape(x.shape[0], -1)
    out = _unpad(_col2im(w.T @ xf, padded, ksize, strides, dil, in_sp), (pad, pad))

    def back(g):
        gp = np.pad(g, [(0, 0), (pad, pad), (pad, pad)]) if pad else g
        cols = _im2col(gp, ksize, strides, dil, in_sp)
        gx = (w @ cols).reshape(x.shape)
        gw = (xf @ cols.T).reshape(kernel.shape)
        return gx, gw

    return make_result(np.ascontiguousarray(out), (x, kernel), back)
