import numpy as np
import pytest

from evseg.evidential import predict_mask, to_field
from evseg.network import Net, NetConfig
from evseg.progressive import ProgressiveConfig, UncertaintyMap, convergence_delta, progressive_segment
from evseg.tensor import NumericError


class Recorder:
    """Wraps a net and keeps every umap it is fed."""

    def __init__(self, net):
        self.net = net
        self.seen = []
        self.fields = []

    def field(self, image, umap):
        self.seen.append(np.array(umap))
        f = self.net.field(image, umap)
        self.fields.append(f)
        return f


def test_delta_basics(rng):
    a = rng.uniform(size=(1, 5, 7))
    assert convergence_delta(a, a) == 0.0
    assert convergence_delta(np.ones((1, 3, 3)), np.zeros((1, 3, 3))) == 1.0
    b = rng.uniform(size=(1, 5, 7))
    brute = sum(abs(a[0, i, j] - b[0, i, j]) for i in range(5) for j in range(7)) / 35
    assert convergence_delta(UncertaintyMap(a), UncertaintyMap(b)) == pytest.approx(brute, abs=1e-15)
    with pytest.raises(ValueError):
        convergence_delta(a, np.ones((1, 5, 6)))


def test_starts_from_ones_and_returns_last_argmax(rng):
    rec = Recorder(Net(NetConfig(seed=2)))
    res = progressive_segment(rng.uniform(size=(3, 16, 16)), rec, ProgressiveConfig(epsilon=1e-9, max_iters=4))
    np.testing.assert_array_equal(rec.seen[0], np.ones((1, 1, 16, 16)))
    assert len(rec.seen) == res.iterations <= 4
    for prev_field, fed in zip(rec.fields, rec.seen[1:]):
        np.testing.assert_array_equal(fed[0], prev_field.uncertainty.data[0])
    np.testing.assert_array_equal(res.mask, predict_mask(rec.fields[-1])[0])
    np.testing.assert_array_equal(res.umap.values, rec.fields[-1].uncertainty.data[0])
    assert res.umap.iteration == res.iterations


def test_large_epsilon_single_iteration(rng):
    res = progressive_segment(rng.uniform(size=(3, 16, 16)), Net(NetConfig()), ProgressiveConfig(epsilon=2.0))
    assert res.iterations == 1


def test_umap_independent_net_stops_at_two(rng):
    net = Net(NetConfig(seed=5))
    for name in ("euga.q.w", "euga.q.b", "euga.k.w", "euga.k.b"):
        net.params[name].data[...] = 0.0
    res = progressive_segment(rng.uniform(size=(3, 16, 16)), net, ProgressiveConfig(epsilon=1e-12, max_iters=5))
    assert res.iterations == 2
    assert res.trace[1] == 0.0


def test_max_iters_bound(rng):
    res = progressive_segment(rng.uniform(size=(3, 16, 16)), Net(NetConfig(seed=1)),
                              ProgressiveConfig(epsilon=1e-300, max_iters=3))
    assert res.iterations <= 3


def test_nonfinite_names_iteration():
    class Bad:
        def __init__(self):
            self.calls = 0

        def field(self, image, umap):
            self.calls += 1
            f = to_field(np.ones((1, 2, 4, 4)))
            if self.calls == 2:
                f.uncertainty.data[...] = np.nan
            return f

    with pytest.raises(NumericError, match="iteration 2"):
        progressive_segment(np.zeros((3, 4, 4)), Bad(), ProgressiveConfig(epsilon=1e-9))


@pytest.mark.parametrize("kw", [dict(epsilon=0), dict(max_iters=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ProgressiveConfig(**kw)
