"""Evidence generation and the Dirichlet quantities derived from it.

Class axis is ``-3`` throughout, so the same code serves a single image
``(C, H, W)`` and a batch ``(N, C, H, W)``. Strength and uncertainty keep a
singleton class axis: ``(..., 1, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import tensor as T
from .tensor import ContractError, Tensor, _record, as_tensor

CLASS_AXIS = -3


def evi_generate(logits) -> Tensor:
    """Semantic-smooth evidence: exp(-relu(x)) + relu(x) - 1.

    Evaluated as ``expm1(-r) + r``, switching to the Taylor series below
    1e-3 where that sum cancels. Derivative is ``1 - exp(-x)`` for x > 0, else 0.
    """
    x = as_tensor(logits)
    r = np.maximum(x.data, 0.0)
    series = r * r * (0.5 - r * (1.0 / 6 - r * (1.0 / 24 - r / 120)))
    out = np.where(r < 1e-3, series, np.expm1(-r) + r)
    slope = np.where(x.data > 0, -np.expm1(-r), 0.0)
    ev = _record("evi", out, (x,), lambda g: (g * slope,))
    if np.any(ev.data < 0):
        raise ContractError("evi_generate produced negative evidence")
    return ev


def exp_evidence(logits, bound: float = 10.0) -> Tensor:
    """Classic EDL baseline: exp of the clamped logits."""
    return T.exp(T.clip(logits, -bound, bound))


def softplus_evidence(logits) -> Tensor:
    x = as_tensor(logits)
    out = np.logaddexp(0.0, x.data)
    sig = expit(x.data)
    return _record("softplus", out, (x,), lambda g: (g * sig,))


GENERATORS = {
    "evi": evi_generate,
    "exp": exp_evidence,
    "softplus": softplus_evidence,
    "relu": T.relu,
}


@dataclass
class EvidenceField:
    evidence: Tensor
    alpha: Tensor
    strength: Tensor
    uncertainty: Tensor
    prob: Tensor

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[CLASS_AXIS]


def to_field(evidence) -> EvidenceField:
    e = as_tensor(evidence)
    if e.ndim < 3:
        raise T.DimensionError(f"evidence must be (..., C, H, W), got {e.shape}")
    if np.any(e.data < 0):
        raise ContractError("evidence must be nonnegative")
    c = e.shape[CLASS_AXIS]
    alpha = e + 1.0
    strength = alpha.sum(axis=CLASS_AXIS, keepdims=True)
    u = T.div(float(c), strength)
    prob = alpha / strength
    return EvidenceField(e, alpha, strength, u, prob)


def predict_mask(field: EvidenceField) -> np.ndarray:
    """Pixelwise argmax of the expected probability; ties go to the lowest class."""
    return np.argmax(field.prob.data, axis=CLASS_AXIS)
