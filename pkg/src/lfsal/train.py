"""Training loop: Adam on the hybrid loss with a plateau learning-rate decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import Sample
from .loss import hybrid_loss
from .network import ModelConfig, Prediction, forward, init_params
from .params import flatten

log = logging.getLogger(__name__)

TERMS = ("bce", "iou", "em")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainSettings:
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 2
    seed: int = 0
    lr_decay: float = 0.9
    plateau_window: int = 50
    plateau_tol: float = 1e-4
    log_every: int = 50
    grad_clip: Optional[float] = 1.0  # global L2 norm; None disables


@dataclass
class StepRecord:
    step: int
    loss: float
    bce: float
    iou: float
    em: float
    lr: float

    def csv(self) -> str:
        return f"{self.step},{self.loss:.10f},{self.bce:.10f},{self.iou:.10f},{self.em:.10f}"


@dataclass
class TrainResult:
    params: dict
    history: list[StepRecord] = field(default_factory=list)
    final_lr: float = 0.0


def predict(sample: Sample, params, cfg: ModelConfig) -> Prediction:
    aif, stack, _ = sample.tensors(cfg.np_dtype)
    return forward(aif, stack, params, cfg)


def dataset_loss(samples: Sequence[Sample], params, cfg: ModelConfig) -> float:
    """Mean per-sample hybrid loss, without recording a tape."""
    total = 0.0
    for s in samples:
        _, _, g = s.tensors(cfg.np_dtype)
        total += hybrid_loss(predict(s, params, cfg), g).total.item()
    return total / len(samples)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches; each epoch is a fresh permutation."""
    buf: list[int] = []
    while True:
        while len(buf) < batch_size:
            buf.extend(rng.permutation(n).tolist())
        yield buf[:batch_size]
        buf = buf[batch_size:]


def plateaued(history: Sequence[float], window: int, tol: float) -> bool:
    """True when the mean of the last ``window`` losses improved on the window before by < ``tol`` (relative)."""
    if len(history) < 2 * window:
        return False
    prev = float(np.mean(history[-2 * window : -window]))
    cur = float(np.mean(history[-window:]))
    return (prev - cur) < tol * abs(prev)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if np.isfinite(norm) and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


def train(
    samples: Sequence[Sample],
    cfg: ModelConfig,
    settings: TrainSettings,
    params: Optional[dict] = None,
    on_step: Optional[Callable[[StepRecord], None]] = None,
) -> TrainResult:
    if not samples:
        raise TrainingError("no training samples")
    if settings.batch_size < 1 or settings.steps < 0:
        raise TrainingError("batch_size must be >= 1 and steps >= 0")
    params = init_params(cfg, settings.seed) if params is None else params
    flat = flatten(params)
    state = ad.AdamState(lr=settings.lr)
    batches = _batches(len(samples), settings.batch_size, np.random.default_rng(settings.seed))
    result = TrainResult(params)
    losses: list[float] = []

    for step in range(1, settings.steps + 1):
        idx = next(batches)
        for t in flat.values():
            t.grad = None
        with ad.GradientTape() as tape:
            total = None
            terms = dict.fromkeys(TERMS, 0.0)
            for i in idx:
                _, _, g = samples[i].tensors(cfg.np_dtype)
                out = hybrid_loss(predict(samples[i], params, cfg), g)
                total = out.total if total is None else ad.add(total, out.total)
                for k in TERMS:
                    terms[k] += out.term(k) / len(idx)
            loss = ad.mul(total, 1.0 / len(idx))
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}")
        tape.backward(loss)
        grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in flat.items()}
        if settings.grad_clip is not None:
            clip_global_norm(grads, settings.grad_clip)
        try:
            ad.adam_step(flat, grads, state)
        except ad.NonFiniteGradientError as exc:
            raise TrainingError(f"non-finite gradient at step {step}: {exc}") from exc

        rec = StepRecord(step, value, terms["bce"], terms["iou"], terms["em"], state.lr)
        result.history.append(rec)
        losses.append(value)
        if on_step is not None:
            on_step(rec)
        if settings.log_every and step % settings.log_every == 0:
            log.info("step %d loss %.6f lr %.3g", step, value, state.lr)
        w = settings.plateau_window
        if w and step % w == 0 and plateaued(losses, w, settings.plateau_tol):
            state.lr *= settings.lr_decay
            log.info("loss plateau at step %d: lr -> %.3g", step, state.lr)

    for t in flat.values():
        t.grad = None
    result.final_lr = state.lr
    return result
