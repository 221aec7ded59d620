"""Hybrid training objective: BCE + soft IoU + continuous E-measure, summed over heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

BCE_CLAMP = 1e-7
IOU_SMOOTH = 1.0
EM_EPS = 1e-8


@dataclass
class LossBreakdown:
    total: Tensor
    heads: list[dict[str, float]] = field(default_factory=list)

    def term(self, name: str) -> float:
        return sum(h[name] for h in self.heads)


def _check(p: Tensor, g: Tensor) -> None:
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and mask {g.shape} differ in shape")


def bce_loss(p: Tensor, g: Tensor) -> Tensor:
    _check(p, g)
    pc = ad.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    pos = ad.mul(g, ad.log(pc))
    neg = ad.mul(ad.sub(1.0, g), ad.log(ad.sub(1.0, pc)))
    return ad.mul(ad.mean_all(ad.add(pos, neg)), -1.0)


def iou_loss(p: Tensor, g: Tensor) -> Tensor:
    _check(p, g)
    inter = ad.sum_all(ad.mul(p, g))
    union = ad.sub(ad.sum_all(ad.add(p, g)), inter)
    return ad.sub(1.0, ad.div(ad.add(inter, IOU_SMOOTH), ad.add(union, IOU_SMOOTH)))


def em_loss(p: Tensor, g: Tensor) -> Tensor:
    """``1 - E`` with the alignment computed on the continuous map (no binarization)."""
    _check(p, g)
    phi_g = ad.sub(g, ad.mean_all(g))
    phi_p = ad.sub(p, ad.mean_all(p))
    num = ad.mul(ad.mul(phi_g, phi_p), 2.0)
    den = ad.add(ad.add(ad.mul(phi_g, phi_g), ad.mul(phi_p, phi_p)), EM_EPS)
    xi1 = ad.add(ad.div(num, den), 1.0)
    enhanced = ad.mul(ad.mul(xi1, xi1), 0.25)
    return ad.sub(1.0, ad.mean_all(enhanced))


def hybrid_loss(preds: Sequence[Tensor], g: Tensor) -> LossBreakdown:
    """Sum of the three terms over every supervised head."""
    preds = list(getattr(preds, "maps", preds))
    if not preds:
        raise ValueError("hybrid_loss needs at least one prediction")
    total = None
    heads = []
    for p in preds:
        terms = {"bce": bce_loss(p, g), "iou": iou_loss(p, g), "em": em_loss(p, g)}
        head = ad.add(ad.add(terms["bce"], terms["iou"]), terms["em"])
        total = head if total is None else ad.add(total, head)
        heads.append({k: v.item() for k, v in terms.items()})
    return LossBreakdown(total, heads)
