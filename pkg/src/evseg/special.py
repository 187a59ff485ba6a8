"""Log-gamma, digamma and trigamma for positive arguments.

All three shift the argument upward with the recurrence until it is large
enough for the asymptotic (Stirling / Bernoulli) series, then undo the shift.
Scalars return floats; arrays are handled elementwise.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, _record, as_tensor


class DomainError(ValueError):
    pass


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# Stirling: lgamma(x) ~ (x-1/2)ln x - x + ln(2pi)/2 + sum B_2k / (2k(2k-1) x^(2k-1))
_STIRLING = (1.0 / 12, -1.0 / 360, 1.0 / 1260, -1.0 / 1680, 1.0 / 1188, -691.0 / 360360, 1.0 / 156)
# digamma: psi(x) ~ ln x - 1/(2x) - sum B_2k / (2k x^(2k))
_DIGAMMA = (1.0 / 12, -1.0 / 120, 1.0 / 252, -1.0 / 240, 1.0 / 132, -691.0 / 32760, 1.0 / 12)
# trigamma: psi'(x) ~ 1/x + 1/(2x^2) + sum B_2k / x^(2k+1)
_TRIGAMMA = (1.0 / 6, -1.0 / 30, 1.0 / 42, -1.0 / 30, 5.0 / 66, -691.0 / 2730, 7.0 / 6)

_LGAMMA_SHIFT = 10.0
_PSI_SHIFT = 10.0


def _prepare(x):
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~(arr > 0)) or np.any(~np.isfinite(arr)):
        raise DomainError("argument must be positive and finite")
    return arr


def _finish(x, out):
    return float(out) if np.ndim(x) == 0 else out


def _horner_inv_sq(coeffs, inv2):
    acc = np.zeros_like(inv2)
    for c in reversed(coeffs):
        acc = acc * inv2 + c
    return acc


def _lgamma(arr: np.ndarray) -> np.ndarray:
    x = arr.copy()
    # x < 10 needs at most 10 shifts, so the product stays far from overflow
    prod = np.ones_like(x)
    small = x < _LGAMMA_SHIFT
    while np.any(small):
        prod = np.where(small, prod * x, prod)
        x = np.where(small, x + 1.0, x)
        small = x < _LGAMMA_SHIFT
    inv = 1.0 / x
    series = inv * _horner_inv_sq(_STIRLING, inv * inv)
    return (x - 0.5) * np.log(x) - x + _HALF_LOG_2PI + series - np.log(prod)


def _digamma(arr: np.ndarray) -> np.ndarray:
    x = arr.copy()
    acc = np.zeros_like(x)
    small = x < _PSI_SHIFT
    while np.any(small):
        acc = np.where(small, acc - 1.0 / x, acc)
        x = np.where(small, x + 1.0, x)
        small = x < _PSI_SHIFT
    inv2 = 1.0 / (x * x)
    return acc + np.log(x) - 0.5 / x - inv2 * _horner_inv_sq(_DIGAMMA, inv2)


def _trigamma(arr: np.ndarray) -> np.ndarray:
    x = arr.copy()
    acc = np.zeros_like(x)
    small = x < _PSI_SHIFT
    while np.any(small):
        acc = np.where(small, acc + 1.0 / (x * x), acc)
        x = np.where(small, x + 1.0, x)
        small = x < _PSI_SHIFT
    inv = 1.0 / x
    inv2 = inv * inv
    return acc + inv + 0.5 * inv2 + inv2 * inv * _horner_inv_sq(_TRIGAMMA, inv2)


def lgamma(x):
    """ln Gamma(x) for x > 0."""
    return _finish(x, _lgamma(_prepare(x)))


def digamma(x):
    """psi(x) = d/dx ln Gamma(x) for x > 0."""
    return _finish(x, _digamma(_prepare(x)))


def trigamma(x):
    """psi'(x) for x > 0."""
    return _finish(x, _trigamma(_prepare(x)))


def lgamma_t(a) -> Tensor:
    """Tape-registered ln Gamma; derivative is digamma."""
    a = as_tensor(a)
    xd = _prepare(a.data)
    return _record("lgamma", _lgamma(xd), (a,), lambda g: (g * _digamma(xd),))


def digamma_t(a) -> Tensor:
    """Tape-registered digamma; derivative is the analytic trigamma."""
    a = as_tensor(a)
    xd = _prepare(a.data)
    return _record("digamma", _digamma(xd), (a,), lambda g: (g * _trigamma(xd),))
