import threading

import numpy as np
import pytest

from evseg import tensor as T
from evseg.tensor import ContractError, DimensionError, NumericError, Tape, Tensor, finite_diff_check


def grads_of(f, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*leaves)
    g = tape.backward(out)
    return out, [g[t] for t in leaves]


def test_scalar_chain_rule():
    out, (gx,) = grads_of(lambda x: T.exp(x * x).sum(), np.array(0.7))
    assert out.item() == pytest.approx(np.exp(0.49))
    assert gx == pytest.approx(2 * 0.7 * np.exp(0.49))


def test_reused_input_accumulates():
    _, (gx,) = grads_of(lambda x: (x * x + x).sum(), np.array([1.0, -2.0]))
    np.testing.assert_allclose(gx, [3.0, -3.0])


def test_broadcast_gradient_is_reduced():
    a = np.ones((2, 3))
    b = np.array([1.0, 2.0, 3.0])
    _, (ga, gb) = grads_of(lambda x, y: (x * y).sum(), a, b)
    np.testing.assert_array_equal(ga, np.broadcast_to(b, (2, 3)))
    np.testing.assert_array_equal(gb, [2.0, 2.0, 2.0])


def test_unreached_leaf_gets_zeros():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        out = x.sum()
    g = tape.backward(out)
    np.testing.assert_array_equal(g[y], np.zeros(2))


def test_backward_twice_rejected():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        out = x.sum()
    tape.backward(out)
    with pytest.raises(ContractError):
        tape.backward(out)


def test_non_scalar_root_rejected():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        out = x * 2
    with pytest.raises(ContractError):
        tape.backward(out)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 3
    assert T.active_tape() is None
    np.testing.assert_array_equal(y.data, [3, 3])


def test_tapes_are_thread_local():
    seen = []
    with Tape():
        t = threading.Thread(target=lambda: seen.append(T.active_tape()))
        t.start()
        t.join()
    assert seen == [None]


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        T.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_too_many_axes():
    with pytest.raises(DimensionError):
        Tensor(np.ones((1, 1, 1, 1, 1)))


def test_nonfinite_output_names_op():
    with pytest.raises(NumericError, match="log"):
        T.log(np.array([0.0]))
    with pytest.raises(NumericError, match="exp"):
        T.exp(np.array([1000.0]))


def test_item_on_vector():
    with pytest.raises(ContractError):
        Tensor(np.ones(2)).item()


def test_ndarray_left_operand_dispatches_to_tensor():
    out = np.ones(3) * Tensor(np.full(3, 2.0))
    assert isinstance(out, Tensor)


def test_softmax_rows_sum_to_one(rng):
    s = T.softmax(rng.normal(size=(4, 7)) * 50).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-14)


def conv_bruteforce(x, w, b, d):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    r = d * (k // 2)
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.zeros((n, o, h, wd))
    for i in range(h):
        for j in range(wd):
            for a in range(k):
                for bb in range(k):
                    patch = xp[:, :, i + a * d, j + bb * d]
                    out[:, :, i, j] += patch @ w[:, :, a, bb].T
    return out + b[None, :, None, None]


@pytest.mark.parametrize("k,d", [(1, 1), (3, 1), (3, 2), (3, 4), (5, 1)])
def test_conv2d_matches_loops(rng, k, d):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    np.testing.assert_allclose(T.conv2d(x, w, b, dilation=d).data, conv_bruteforce(x, w, b, d), atol=1e-12)


def test_conv2d_matches_scipy(rng):
    from scipy.signal import correlate2d

    x = rng.normal(size=(1, 1, 9, 9))
    w = rng.normal(size=(1, 1, 3, 3))
    ref = correlate2d(x[0, 0], w[0, 0], mode="same")
    np.testing.assert_allclose(T.conv2d(x, w).data[0, 0], ref, atol=1e-12)


def test_conv2d_even_kernel_rejected():
    with pytest.raises(DimensionError):
        T.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)))


def test_pool_and_upsample_are_adjoint(rng):
    # <pool(x), y> * k^2 == <x, up(y)>
    x = rng.normal(size=(1, 2, 8, 8))
    y = rng.normal(size=(1, 2, 4, 4))
    lhs = (T.avgpool(x, 2).data * y).sum() * 4
    rhs = (x * T.upsample(y, 2).data).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_avgpool_indivisible():
    with pytest.raises(DimensionError):
        T.avgpool(np.ones((1, 1, 5, 4)), 2)


@pytest.mark.parametrize("op", [T.relu, T.sigmoid, T.silu, T.neg_exp, T.softmax])
def test_unary_finite_differences(rng, op):
    x = rng.uniform(-2, 2, size=(3, 4))
    x[np.abs(x) < 1e-2] = 0.5
    w = rng.normal(size=(3, 4))
    assert finite_diff_check(lambda t: (op(t) * w).sum(), Tensor(x)) < 1e-6


def test_finite_diff_catches_wrong_gradient():
    def bad(a):
        a = T.as_tensor(a)
        return T._record("bad", a.data ** 2, (a,), lambda g: (g,))

    assert finite_diff_check(lambda t: bad(t).sum(), Tensor(np.array([1.5, 2.0]))) > 0.5


def test_matmul_batched_grad(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    _, (ga, gb) = grads_of(lambda x, y: (x @ y).sum(), a, b)
    np.testing.assert_allclose(ga, np.ones((2, 3, 5)) @ np.swapaxes(b, 1, 2))
    np.testing.assert_allclose(gb, np.swapaxes(a, 1, 2) @ np.ones((2, 3, 5)))
