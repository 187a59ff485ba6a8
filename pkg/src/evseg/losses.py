"""Training objective: integrated cross-entropy, KL to the uniform Dirichlet,
and the fidelity term on uncertainty, mixed with an annealed KL weight.

Every term is a per-pixel quantity averaged over pixels (and batch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .evidential import CLASS_AXIS, EvidenceField
from .special import DomainError, lgamma, lgamma_t, digamma_t
from .tensor import DimensionError, Tensor, as_tensor


@dataclass
class LossConfig:
    lambda2: float = 0.5
    total_epochs: int = 30
    kl_anneal_factor: float = 10.0
    eps_log: float = 1e-12
    # True reproduces the printed sign, (1 - p_gt) * ln(u), which rewards low uncertainty
    literal_lu_sign: bool = False

    def __post_init__(self):
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be >= 0")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if not self.eps_log > 0:
            raise ValueError("eps_log must be > 0")


@dataclass
class GroundTruth:
    onehot: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.onehot, dtype=np.float64)
        if y.ndim < 3:
            raise DimensionError(f"one-hot mask must be (..., C, H, W), got {y.shape}")
        if not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=CLASS_AXIS) == 1):
            raise ValueError("ground truth is not a valid one-hot mask")
        self.onehot = y

    @classmethod
    def from_labels(cls, labels, num_classes: int) -> "GroundTruth":
        labels = np.asarray(labels, dtype=np.int64)
        y = np.moveaxis(np.eye(num_classes)[labels], -1, CLASS_AXIS)
        return cls(y)

    @property
    def gt_prob_index(self) -> np.ndarray:
        return np.argmax(self.onehot, axis=CLASS_AXIS)


def _check(field: EvidenceField, gt: GroundTruth):
    if field.alpha.shape != gt.onehot.shape:
        raise DimensionError(f"field {field.alpha.shape} and ground truth {gt.onehot.shape} differ")


def _floored_log(x: Tensor, eps: float) -> Tensor:
    return T.log(T.clip(x, eps, None))


def _pixel_mean(per_pixel: Tensor) -> Tensor:
    return per_pixel.mean()


def loss_ice(field: EvidenceField, gt: GroundTruth, eps_log: float = 1e-12) -> Tensor:
    """Mean over pixels of sum_c y_c (ln S - ln alpha_c)."""
    _check(field, gt)
    y = gt.onehot
    per = (y * (_floored_log(field.strength, eps_log) - _floored_log(field.alpha, eps_log))).sum(axis=CLASS_AXIS)
    return _pixel_mean(per)


def adjusted_alpha(field: EvidenceField, gt: GroundTruth) -> Tensor:
    """alpha with the true-class entry replaced by 1."""
    _check(field, gt)
    y = gt.onehot
    return y + (1.0 - y) * field.alpha


def loss_kl(alpha_tilde) -> Tensor:
    """Mean over pixels of KL(Dir(alpha_tilde) || Dir(1, ..., 1))."""
    a = as_tensor(alpha_tilde)
    if np.any(a.data <= 0):
        raise DomainError("Dirichlet parameters must be positive")
    if np.any(a.data < 1 - 1e-9):
        raise ValueError("adjusted alpha must be >= 1")
    c = a.shape[CLASS_AXIS]
    total = a.sum(axis=CLASS_AXIS, keepdims=True)
    log_norm = (lgamma_t(total).sum(axis=CLASS_AXIS) - lgamma(float(c))
                - lgamma_t(a).sum(axis=CLASS_AXIS))
    cross = ((a - 1.0) * (digamma_t(a) - digamma_t(total))).sum(axis=CLASS_AXIS)
    return _pixel_mean(log_norm + cross)


def loss_u(field: EvidenceField, gt: GroundTruth, eps_log: float = 1e-12,
           literal_sign: bool = False) -> Tensor:
    """Mean of -(1 - p_gt) ln u: zero once the true class is certain or u is 1."""
    _check(field, gt)
    p_gt = (gt.onehot * field.prob).sum(axis=CLASS_AXIS)
    log_u = _floored_log(field.uncertainty, eps_log).sum(axis=CLASS_AXIS)
    per = (1.0 - p_gt) * log_u
    if not literal_sign:
        per = -per
    return _pixel_mean(per)


def lambda1(epoch: int, cfg: LossConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(1.0, epoch * cfg.kl_anneal_factor / cfg.total_epochs)


@dataclass
class LossTerms:
    total: Tensor
    ice: float
    kl: float
    u: float
    lambda1: float


def loss_terms(field: EvidenceField, gt: GroundTruth, epoch: int, cfg: LossConfig) -> LossTerms:
    lam1 = lambda1(epoch, cfg)
    ice = loss_ice(field, gt, cfg.eps_log)
    kl = loss_kl(adjusted_alpha(field, gt))
    lu = loss_u(field, gt, cfg.eps_log, cfg.literal_lu_sign)
    total = ice
    if lam1:
        total = total + lam1 * kl
    if cfg.lambda2:
        total = total + cfg.lambda2 * lu
    return LossTerms(total, ice.item(), kl.item(), lu.item(), lam1)


def loss_total(field: EvidenceField, gt: GroundTruth, epoch: int, cfg: LossConfig) -> Tensor:
    return loss_terms(field, gt, epoch, cfg).total
