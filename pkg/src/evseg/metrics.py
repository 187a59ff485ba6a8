"""Overlap, surface-distance and uncertainty-error metrics on binary masks.

Conventions for degenerate inputs: two empty masks score 1.0 for Dice, IoU
and UEO; ASSD with an empty surface on either side is undefined (``inf``)
and is left out of aggregate means.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

UEO_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 20))
CSV_HEADER = ("image_id", "dice", "iou", "assd", "ueo@0.5", "ueo_max")


def _pair(r, g):
    r = np.asarray(r, dtype=bool)
    g = np.asarray(g, dtype=bool)
    if r.shape != g.shape:
        raise ValueError(f"mask shapes differ: {r.shape} vs {g.shape}")
    return r, g


def dice(r, g) -> float:
    r, g = _pair(r, g)
    denom = int(r.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((r & g).sum()) / denom


def iou(r, g) -> float:
    r, g = _pair(r, g)
    union = int((r | g).sum())
    if union == 0:
        return 1.0
    return int((r & g).sum()) / union


def extract_surface(mask) -> np.ndarray:
    """(K, 2) integer (row, col) coordinates of foreground pixels that touch
    the background through a 4-neighbour or lie on the image border."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def _min_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :].astype(np.float64) - b[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1)).min(axis=1)


def assd(r, g) -> float:
    """Average symmetric surface distance (pixels); ``inf`` when a surface is empty."""
    r, g = _pair(r, g)
    sr, sg = extract_surface(r), extract_surface(g)
    if len(sr) == 0 or len(sg) == 0:
        return math.inf
    total = _min_dists(sr, sg).sum() + _min_dists(sg, sr).sum()
    return float(total / (len(sr) + len(sg)))


def ueo(err, umap, tau: float = 0.5) -> float:
    """Dice between the error region and the region where uncertainty >= tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    u = np.asarray(umap, dtype=np.float64)
    err = np.asarray(err, dtype=bool)
    if u.ndim == err.ndim + 1 and u.shape[0] == 1:
        u = u[0]
    return dice(err, u >= tau)


def ueo_max(err, umap, thresholds=UEO_THRESHOLDS) -> float:
    return max(ueo(err, umap, t) for t in thresholds)


@dataclass
class MetricRow:
    image_id: str
    dice: float
    iou: float
    assd: float
    ueo: float
    ueo_max: float
    mean_uncertainty: float = float("nan")


def evaluate_pair(image_id: str, pred_labels, gt_labels, umap) -> MetricRow:
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    r, g = pred_labels > 0, gt_labels > 0
    err = pred_labels != gt_labels
    u = np.asarray(umap, dtype=np.float64)
    return MetricRow(image_id, dice(r, g), iou(r, g), assd(r, g), ueo(err, u, 0.5),
                     ueo_max(err, u), float(u.mean()))


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def _mean(self, attr: str) -> float:
        vals = [getattr(r, attr) for r in self.rows if math.isfinite(getattr(r, attr))]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def dice(self) -> float:
        return self._mean("dice")

    @property
    def iou(self) -> float:
        return self._mean("iou")

    @property
    def assd(self) -> float:
        return self._mean("assd")

    @property
    def ueo(self) -> float:
        return self._mean("ueo")

    @property
    def ueo_max(self) -> float:
        return self._mean("ueo_max")

    @property
    def mean_uncertainty(self) -> float:
        return self._mean("mean_uncertainty")

    def write_csv(self, path) -> None:
        def fmt(v):
            return "undefined" if not math.isfinite(v) else f"{v:.6f}"

        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(CSV_HEADER)
            for r in self.rows:
                wr.writerow([r.image_id, fmt(r.dice), fmt(r.iou), fmt(r.assd), fmt(r.ueo), fmt(r.ueo_max)])
            wr.writerow(["mean", fmt(self.dice), fmt(self.iou), fmt(self.assd), fmt(self.ueo), fmt(self.ueo_max)])
