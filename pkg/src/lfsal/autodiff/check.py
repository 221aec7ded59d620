"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradientTape, Tensor


def _rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max elementwise relative error between tape and central-difference gradients of ``f`` at ``x``.

    ``f`` must return a single-element tensor; ``x`` should be float64.
    """
    x = Tensor(x.data.copy(), requires_grad=True)
    with GradientTape() as tape:
        y = f(x)
    tape.backward(y)
    g_ad = x.grad.reshape(-1)
    g_fd = np.empty_like(g_ad)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        g_fd[i] = (fp - fm) / (2 * eps)
    return float(_rel_err(g_ad, g_fd).max()) if g_ad.size else 0.0


def directional_grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    n_dirs: int = 4,
    seed: int = 0,
) -> float:
    """Compare ``<grad, v>`` against a central difference along random directions ``v``.

    Covers every entry of ``params`` at a cost of two evaluations per direction;
    used where per-entry differencing of a whole model would be too slow.
    """
    rng = np.random.default_rng(seed)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
    try:
        with GradientTape() as tape:
            y = f()
        tape.backward(y)
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
        originals = [p.data.copy() for p in params]
        worst = 0.0
        for _ in range(n_dirs):
            dirs = [rng.standard_normal(p.shape) for p in params]
            ad = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
            for p, o, d in zip(params, originals, dirs):
                p.data[...] = o + eps * d
            fp = f().item()
            for p, o, d in zip(params, originals, dirs):
                p.data[...] = o - eps * d
            fm = f().item()
            for p, o in zip(params, originals):
                p.data[...] = o
            fd = (fp - fm) / (2 * eps)
            worst = max(worst, float(_rel_err(ad, fd)))
        return worst
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag
            p.grad = None
