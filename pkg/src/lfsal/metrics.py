"""Saliency evaluation: MAE, F-measure, S-measure, E-measure and threshold sweeps.

Maps are 2-D float arrays in [0, 1]; masks are 2-D arrays in {0, 1}.
Everything here is plain numpy and independent of the autodiff package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BETA2 = 0.3
ALPHA = 0.5
EM_EPS = 1e-8
N_THRESHOLDS = 256
# machine epsilon, as in the reference S-measure definition
_EPS = float(np.finfo(np.float64).eps)

CURVE_COLUMNS = ("threshold", "precision", "recall", "F", "E")


def _pair(p, g) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"map {p.shape} and mask {g.shape} differ in shape")
    if p.ndim != 2 or p.size == 0:
        raise ValueError(f"expected a non-empty 2-D map, got shape {p.shape}")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("saliency map values must lie in [0, 1]")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("ground-truth mask must be binary")
    return p, g


def mae(p, g) -> float:
    p, g = _pair(p, g)
    return float(np.mean(np.abs(p - g)))


def adaptive_threshold(p) -> float:
    return float(min(2.0 * np.mean(p), 1.0))


def binarize(p, threshold: float) -> np.ndarray:
    return (np.asarray(p) >= threshold).astype(np.float64)


def precision_recall(p, g, threshold: float) -> tuple[float, float]:
    p, g = _pair(p, g)
    b = p >= threshold
    fg = g > 0.5
    tp = float(np.count_nonzero(b & fg))
    n_b, n_g = np.count_nonzero(b), np.count_nonzero(fg)
    return (tp / n_b if n_b else 0.0), (tp / n_g if n_g else 0.0)


def _f_from_pr(prec: float, rec: float) -> float:
    den = BETA2 * prec + rec
    return (1.0 + BETA2) * prec * rec / den if den > 0 else 0.0


def f_measure(p, g, threshold: float) -> float:
    """F with beta^2 = 0.3 on ``p >= threshold``; zero when precision and recall are both 0."""
    return _f_from_pr(*precision_recall(p, g, threshold))


# -- S-measure ----------------------------------------------------------------


def _std(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if x.size > 1 else 0.0


def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    m = float(np.mean(x))
    return 2.0 * m / (m * m + 1.0 + _std(x) + _EPS)


def s_object(p: np.ndarray, g: np.ndarray) -> float:
    fg = g > 0.5
    mu = float(np.mean(g))
    return mu * _object_score(p[fg]) + (1.0 - mu) * _object_score(1.0 - p[~fg])


def centroid(g: np.ndarray) -> tuple[int, int]:
    """Split point (column count, row count) of the top-left quadrant."""
    rows, cols = g.shape
    total = g.sum()
    if total == 0:
        return int(np.floor(cols / 2 + 0.5)), int(np.floor(rows / 2 + 0.5))
    x = (g.sum(axis=0) * np.arange(1, cols + 1)).sum() / total
    y = (g.sum(axis=1) * np.arange(1, rows + 1)).sum() / total
    return int(np.floor(x + 0.5)), int(np.floor(y + 0.5))


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 0.0
    x, y = p.mean(), g.mean()
    dof = max(n - 1, 1)
    sx = ((p - x) ** 2).sum() / dof
    sy = ((g - y) ** 2).sum() / dof
    sxy = ((p - x) * (g - y)).sum() / dof
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return float(a / (b + _EPS))
    return 1.0 if b == 0 else 0.0


def s_region(p: np.ndarray, g: np.ndarray) -> float:
    rows, cols = g.shape
    cx, cy = centroid(g)
    area = rows * cols
    total = 0.0
    for rs, cs in (
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, cols)),
        (slice(cy, rows), slice(0, cx)),
        (slice(cy, rows), slice(cx, cols)),
    ):
        gq = g[rs, cs]
        total += gq.size / area * _ssim(p[rs, cs], gq)
    return total


def s_measure(p, g) -> float:
    p, g = _pair(p, g)
    mu = float(np.mean(g))
    if mu == 0.0:
        return 1.0 - float(np.mean(p))
    if mu == 1.0:
        return float(np.mean(p))
    s = ALPHA * s_object(p, g) + (1.0 - ALPHA) * s_region(p, g)
    return float(min(max(s, 0.0), 1.0))


# -- E-measure ------------------------------------------------------------------


def enhanced_alignment(b: np.ndarray, g: np.ndarray) -> np.ndarray:
    if not g.any():
        return 1.0 - b
    if g.all():
        return b.copy()
    phi_g = g - g.mean()
    phi_b = b - b.mean()
    xi = 2.0 * phi_g * phi_b / (phi_g * phi_g + phi_b * phi_b + EM_EPS)
    return (xi + 1.0) ** 2 / 4.0


def e_measure(p, g, threshold: float) -> float:
    """Mean enhanced alignment of ``p >= threshold`` with ``g``.

    The sum is divided by ``W*H - 1``, so a perfect match scores
    ``W*H / (W*H - 1)``, slightly above 1.
    """
    p, g = _pair(p, g)
    b = binarize(p, threshold)
    return float(enhanced_alignment(b, g).sum() / (g.size - 1 + EM_EPS))


# -- curves and reports ----------------------------------------------------------------


def thresholds() -> np.ndarray:
    return np.arange(N_THRESHOLDS) / (N_THRESHOLDS - 1)


def fe_curves(p, g) -> np.ndarray:
    """One row per threshold k/255: threshold, precision, recall, F, E."""
    p, g = _pair(p, g)
    rows = []
    for t in thresholds():
        prec, rec = precision_recall(p, g, t)
        rows.append((t, prec, rec, _f_from_pr(prec, rec), e_measure(p, g, t)))
    return np.array(rows)


@dataclass
class ImageScores:
    id: str
    mae: float
    f_adp: float
    s: float
    e_adp: float
    curves: np.ndarray = field(repr=False)


def evaluate_image(image_id: str, p, g) -> ImageScores:
    p, g = _pair(p, g)
    tau = adaptive_threshold(p)
    return ImageScores(image_id, mae(p, g), f_measure(p, g, tau), s_measure(p, g), e_measure(p, g, tau), fe_curves(p, g))


@dataclass
class MetricReport:
    images: list[ImageScores]
    mean: dict[str, float]
    curves: np.ndarray  # N_THRESHOLDS x len(CURVE_COLUMNS), averaged pointwise

    def row(self, image_id: str) -> ImageScores:
        for s in self.images:
            if s.id == image_id:
                return s
        raise KeyError(image_id)


SCORE_FIELDS = ("mae", "f_adp", "s", "e_adp")
REPORT_HEADER = "id,MAE,F_adp,S,E_adp"


def aggregate_report(results: Iterable[ImageScores]) -> MetricReport:
    images = sorted(results, key=lambda r: r.id)
    if not images:
        raise ValueError("cannot aggregate an empty result set")
    ids = [r.id for r in images]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image ids in results")
    mean = {f: float(np.mean([getattr(r, f) for r in images])) for f in SCORE_FIELDS}
    curves = np.mean(np.stack([r.curves for r in images]), axis=0)
    return MetricReport(images, mean, curves)


def evaluate_pairs(pairs: Sequence[tuple[str, np.ndarray, np.ndarray]]) -> MetricReport:
    return aggregate_report(evaluate_image(i, p, g) for i, p, g in pairs)


def _fmt(values) -> str:
    return ",".join(f"{v:.6f}" for v in values)


def format_report(report: MetricReport) -> str:
    lines = [REPORT_HEADER]
    for r in report.images:
        lines.append(f"{r.id}," + _fmt(getattr(r, f) for f in SCORE_FIELDS))
    lines.append("MEAN," + _fmt(report.mean[f] for f in SCORE_FIELDS))
    return "\n".join(lines) + "\n"


def format_curves(curves: np.ndarray) -> str:
    idx = [CURVE_COLUMNS.index(c) for c in ("threshold", "F", "E")]
    lines = ["threshold,F,E"] + [_fmt(row[idx]) for row in curves]
    return "\n".join(lines) + "\n"


def write_report(report: MetricReport, out_dir, per_image_curves: bool = True) -> list[Path]:
    """Write ``report.csv``, ``curves.csv`` and optionally ``curves/<id>.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "report.csv", out / "curves.csv"]
    written[0].write_text(format_report(report))
    written[1].write_text(format_curves(report.curves))
    if per_image_curves:
        (out / "curves").mkdir(exist_ok=True)
        for r in report.images:
            path = out / "curves" / f"{r.id}.csv"
            path.write_text(format_curves(r.curves))
            written.append(path)
    return written
