"""Iterative uncertainty-guided inference.

Start from an all-ones uncertainty map, run the network, replace the map by
the new uncertainty, and repeat until the mean absolute change is at most
``epsilon`` or ``max_iters`` forwards have run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evidential import EvidenceField, predict_mask
from .tensor import NumericError, Tensor


@dataclass
class ProgressiveConfig:
    epsilon: float = 0.01
    max_iters: int = 5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class UncertaintyMap:
    values: np.ndarray  # (1, H, W)
    iteration: int = 0

    @classmethod
    def initial(cls, h: int, w: int) -> "UncertaintyMap":
        return cls(np.ones((1, h, w)), 0)


def convergence_delta(u_prev, u_next) -> float:
    a = u_prev.values if isinstance(u_prev, UncertaintyMap) else np.asarray(u_prev, dtype=np.float64)
    b = u_next.values if isinstance(u_next, UncertaintyMap) else np.asarray(u_next, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"uncertainty maps differ in shape: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


@dataclass
class ProgressiveResult:
    mask: np.ndarray  # (H, W) labels
    umap: UncertaintyMap
    trace: list[float]  # mean |delta| per iteration, first entry against the all-ones map
    field: EvidenceField

    @property
    def iterations(self) -> int:
        return len(self.trace)


def progressive_segment(image, net, cfg: ProgressiveConfig | None = None) -> ProgressiveResult:
    """image (C, H, W); ``net`` needs ``field(image, umap) -> EvidenceField``."""
    cfg = cfg or ProgressiveConfig()
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    _, _, h, w = img.shape
    umap = UncertaintyMap.initial(h, w)
    trace: list[float] = []
    field = None
    for it in range(1, cfg.max_iters + 1):
        field = net.field(img, umap.values[None])
        u = field.uncertainty.data[0]
        if not np.all(np.isfinite(u)):
            raise NumericError(f"non-finite uncertainty at iteration {it}")
        nxt = UncertaintyMap(u.copy(), it)
        delta = convergence_delta(umap, nxt)
        trace.append(delta)
        umap = nxt
        if delta <= cfg.epsilon:
            break
    return ProgressiveResult(predict_mask(field)[0], umap, trace, field)
