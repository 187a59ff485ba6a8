import math

import mpmath
import numpy as np
import pytest

from evseg.special import DomainError, digamma, digamma_t, lgamma, lgamma_t, trigamma
from evseg.tensor import Tensor, finite_diff_check

GRID = np.concatenate([np.geomspace(1e-3, 1e4, 300), [0.5, 1.0, 1.5, 2.0, 5.999, 6.0, 9.999, 10.0]])


def test_lgamma_against_mpmath():
    ref = np.array([float(mpmath.loggamma(mpmath.mpf(x))) for x in GRID])
    assert np.max(np.abs(lgamma(GRID) - ref)) < 1e-9


def test_digamma_against_mpmath():
    ref = np.array([float(mpmath.digamma(mpmath.mpf(x))) for x in GRID])
    assert np.max(np.abs(digamma(GRID) - ref)) < 1e-10


def test_trigamma_against_mpmath():
    ref = np.array([float(mpmath.polygamma(1, mpmath.mpf(x))) for x in GRID])
    assert np.max(np.abs(trigamma(GRID) / ref - 1)) < 1e-10


def test_known_values():
    assert lgamma(1.0) == pytest.approx(0.0, abs=1e-13)
    assert lgamma(2.0) == pytest.approx(0.0, abs=1e-13)
    assert lgamma(0.5) == pytest.approx(0.5 * math.log(math.pi), abs=1e-12)
    assert digamma(1.0) == pytest.approx(-0.5772156649015329, abs=1e-13)
    assert trigamma(1.0) == pytest.approx(math.pi ** 2 / 6, rel=1e-13)


def test_recurrences(rng):
    x = rng.uniform(0.01, 50, size=200)
    np.testing.assert_allclose(lgamma(x + 1) - lgamma(x), np.log(x), atol=1e-10)
    np.testing.assert_allclose(digamma(x + 1) - digamma(x), 1 / x, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(trigamma(x) - trigamma(x + 1), 1 / x ** 2, rtol=1e-10)


def test_matches_math_lgamma(rng):
    x = rng.uniform(0.001, 200, size=500)
    np.testing.assert_allclose(lgamma(x), [math.lgamma(v) for v in x], atol=1e-10, rtol=1e-13)


def test_scalar_in_scalar_out():
    assert isinstance(lgamma(3.0), float)
    assert lgamma(np.array([3.0])).shape == (1,)


@pytest.mark.parametrize("fn", [lgamma, digamma, trigamma])
@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan"), float("inf")])
def test_domain(fn, bad):
    with pytest.raises(DomainError):
        fn(bad)


def test_tape_ops_gradients(rng):
    x = rng.uniform(0.05, 20, size=10)
    assert finite_diff_check(lambda t: lgamma_t(t).sum(), Tensor(x)) < 1e-7
    assert finite_diff_check(lambda t: digamma_t(t).sum(), Tensor(x), step=1e-7) < 1e-6
