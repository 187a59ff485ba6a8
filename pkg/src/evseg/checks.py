"""Self-checks: tape gradients against central differences, evidential invariants.

Each gradient case draws a fresh random instance per repetition and reduces
the op output to a scalar with a fixed random weighting, so every output
coordinate contributes to the checked gradient.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .euga import EugaConfig, EugaWeights, euga_forward
from .evidential import evi_generate, exp_evidence, predict_mask, softplus_evidence, to_field
from .losses import GroundTruth, LossConfig, adjusted_alpha, loss_ice, loss_kl, loss_terms, loss_u
from .network import KanLayer, Net, NetConfig, bspline_basis, kan_forward
from .special import digamma_t, lgamma_t
from .tensor import Tensor, finite_diff_check

OP_TOL = 1e-5
END_TO_END_TOL = 1e-4

Case = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _away(rng, shape, lo=-2.0, hi=2.0, gap=1e-2):
    """Uniform draws kept at least ``gap`` from 0, where relu-like kinks sit."""
    x = rng.uniform(lo, hi, size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _weighted(op, shape_out_rng):
    """Wrap ``op`` so its output is contracted with a fixed random weight."""
    cache = {}

    def f(t):
        y = op(t)
        if "w" not in cache:
            cache["w"] = shape_out_rng.normal(size=y.shape)
        return (y * cache["w"]).sum()

    return f


def _unary(op, lo=-2.0, hi=2.0, shape=(3, 4)):
    def case(rng):
        return _weighted(op, rng), _away(rng, shape, lo, hi)
    return case


def _binary(op, which, shape_a=(3, 4), shape_b=(3, 4), positive_b=False):
    def case(rng):
        a = rng.normal(size=shape_a)
        b = rng.uniform(0.5, 2.0, size=shape_b) if positive_b else rng.normal(size=shape_b)
        if which == 0:
            return _weighted(lambda t: op(t, b), rng), a
        return _weighted(lambda t: op(a, t), rng), b
    return case


def _conv(which, dilation):
    def case(rng):
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        args = [x, w, b]

        def op(t):
            vals = list(args)
            vals[which] = t
            return T.conv2d(vals[0], vals[1], vals[2], dilation=dilation)
        return _weighted(op, rng), args[which]
    return case


def _field_from(logits, gen=evi_generate):
    return to_field(gen(logits))


def _labels(rng, n=2, c=2, h=3, w=3):
    return GroundTruth.from_labels(rng.integers(0, c, size=(n, h, w)), c)


def _loss_case(kind):
    def case(rng):
        gt = _labels(rng)
        logits = _away(rng, (2, 2, 3, 3), -3.0, 3.0)

        def f(t):
            field = _field_from(t)
            if kind == "ice":
                return loss_ice(field, gt)
            if kind == "kl":
                return loss_kl(adjusted_alpha(field, gt))
            if kind == "u":
                return loss_u(field, gt)
            return loss_terms(field, gt, epoch=30, cfg=LossConfig()).total
        return f, logits
    return case


def _euga_case(which):
    cfg = EugaConfig(rank=2, token_stride=2, feature_channels=3)

    def case(rng):
        feats = rng.normal(size=(1, 3, 4, 4))
        umap = rng.uniform(0.05, 1.0, size=(1, 1, 4, 4))
        qw, kw = rng.normal(size=(2, 1, 3, 3)), rng.normal(size=(2, 1, 3, 3))
        qb, kb = rng.normal(size=2), rng.normal(size=2)
        args = [feats, umap, qw, qb, kw, kb]

        def op(t):
            v = list(args)
            v[which] = t
            return euga_forward(v[0], v[1], EugaWeights(*map(T.as_tensor, v[2:])), cfg)
        return _weighted(op, rng), args[which]
    return case


def _kan_case(which):
    def case(rng):
        tokens = rng.uniform(-3.5, 3.5, size=(5, 3))
        base = rng.normal(size=(3, 2))
        coef = rng.normal(size=(3, 11, 2))
        args = [tokens, base, coef]

        def op(t):
            v = list(args)
            v[which] = t
            return kan_forward(v[0], KanLayer(T.as_tensor(v[1]), T.as_tensor(v[2]), 8, 3, -3.0, 3.0))
        return _weighted(op, rng), args[which]
    return case


def op_cases() -> dict[str, Case]:
    cases: dict[str, Case] = {
        "add": _binary(T.add, 0, (3, 4), (4,)),
        "add/rhs-broadcast": _binary(T.add, 1, (3, 4), (4,)),
        "sub": _binary(T.sub, 0),
        "sub/rhs": _binary(T.sub, 1),
        "mul": _binary(T.mul, 0, (2, 3, 4), (3, 1)),
        "mul/rhs-broadcast": _binary(T.mul, 1, (2, 3, 4), (3, 1)),
        "div": _binary(T.div, 0, positive_b=True),
        "div/rhs": _binary(T.div, 1, positive_b=True),
        "neg": _unary(T.neg),
        "relu": _unary(T.relu),
        "exp": _unary(T.exp),
        "neg_exp": _unary(T.neg_exp),
        "log": _unary(T.log, 0.1, 3.0),
        "clip": _unary(lambda t: T.clip(t, -1.0, 1.0)),
        "sigmoid": _unary(T.sigmoid),
        "silu": _unary(T.silu),
        "softmax": _unary(T.softmax, shape=(2, 3, 5)),
        "sum": _unary(lambda t: T.sum_(t, axis=1, keepdims=True)),
        "mean": _unary(lambda t: T.mean(t, axis=0)),
        "broadcast_to": _unary(lambda t: T.broadcast_to(t, (2, 3, 4))),
        "reshape": _unary(lambda t: T.reshape(t, (4, 3))),
        "transpose": _unary(lambda t: T.transpose(t, (0, 2, 1)), shape=(2, 3, 4)),
        "concat": _unary(lambda t: T.concat([t, t * t], axis=1), shape=(2, 2, 3)),
        "matmul": _binary(T.matmul, 0, (2, 3, 4), (2, 4, 5)),
        "matmul/rhs": _binary(T.matmul, 1, (2, 3, 4), (2, 4, 5)),
        "conv2d/input": _conv(0, 1),
        "conv2d/kernel": _conv(1, 1),
        "conv2d/bias": _conv(2, 1),
        "conv2d/dilated": _conv(0, 2),
        "conv2d/dilated-kernel": _conv(1, 4),
        "avgpool": _unary(lambda t: T.avgpool(t, 2), shape=(1, 2, 4, 4)),
        "upsample": _unary(lambda t: T.upsample(t, 2), shape=(1, 2, 2, 3)),
        "lgamma": _unary(lgamma_t, 0.05, 30.0),
        "digamma": _unary(digamma_t, 0.2, 30.0),
        "evidence/evi": _unary(evi_generate, -4.0, 4.0, shape=(2, 3, 3)),
        "evidence/exp": _unary(exp_evidence, -4.0, 4.0, shape=(2, 3, 3)),
        "evidence/softplus": _unary(softplus_evidence, -4.0, 4.0, shape=(2, 3, 3)),
        "loss/ice": _loss_case("ice"),
        "loss/kl": _loss_case("kl"),
        "loss/u": _loss_case("u"),
        "loss/total": _loss_case("total"),
        "euga/features": _euga_case(0),
        "euga/umap": _euga_case(1),
        "euga/q-weight": _euga_case(2),
        "euga/k-bias": _euga_case(5),
        "bspline": _unary(lambda t: bspline_basis(t, 8, 3, -3.0, 3.0), -3.5, 3.5, shape=(4, 3)),
        "kan/tokens": _kan_case(0),
        "kan/base": _kan_case(1),
        "kan/coef": _kan_case(2),
    }
    return cases


def check_op(name: str, case: Case, instances: int, rng) -> float:
    worst = 0.0
    for _ in range(instances):
        f, x = case(rng)
        worst = max(worst, finite_diff_check(f, Tensor(x)))
    return worst


def _tiny_net(rng) -> Net:
    return Net(NetConfig(seed=int(rng.integers(2**31))))


def check_network(instances: int, rng, coords: int = 4, size: int = 16) -> float:
    """Full forward + total loss, gradient w.r.t. random parameter coordinates."""
    worst = 0.0
    cfg = LossConfig(total_epochs=10)
    for _ in range(instances):
        net = _tiny_net(rng)
        # biases start at zero; randomise everything so no path is trivially dead
        for p in net.params.values():
            if p.data.ndim == 1:
                p.data = rng.normal(0.0, 0.1, size=p.shape)
        image = rng.uniform(0.0, 1.0, size=(1, 3, size, size))
        umap = rng.uniform(0.05, 1.0, size=(1, 1, size, size))
        gt = _labels(rng, 1, 2, size, size)
        name = list(net.params)[int(rng.integers(len(net.params)))]
        original = net.params[name]
        idx = [tuple(int(rng.integers(s)) for s in original.shape) for _ in range(coords)]

        def f(t, name=name):
            net.params[name] = t
            try:
                return loss_terms(net.field(image, umap), gt, epoch=5, cfg=cfg).total
            finally:
                net.params[name] = original

        worst = max(worst, finite_diff_check(f, Tensor(original.data), indices=idx))
    return worst


def evidential_invariants(n: int = 10_000, classes: int = 4, seed: int = 0) -> dict[str, bool]:
    """Property checks on ``n`` random logit vectors drawn from [-10, 10]."""
    rng = np.random.default_rng(seed)
    logits = rng.uniform(-10.0, 10.0, size=(n, classes, 1, 1))
    x = Tensor(logits, requires_grad=True)
    with T.Tape() as tape:
        ev = evi_generate(x)
        total = ev.sum()
    slope = tape.backward(total)[x]
    field = to_field(ev)
    e, alpha, s = field.evidence.data, field.alpha.data, field.strength.data
    u, p = field.uncertainty.data, field.prob.data
    pos = logits > 0
    return {
        "e>=0": bool(np.all(e >= 0)),
        "alpha=e+1": bool(np.array_equal(alpha, e + 1.0)),
        "sum p=1": bool(np.max(np.abs(p.sum(axis=1) - 1.0)) <= 1e-12),
        "u=C/S in (0,1]": bool(np.allclose(u, classes / s, rtol=0, atol=1e-15) and np.all((u > 0) & (u <= 1))),
        "argmax p=argmax e": bool(np.array_equal(predict_mask(field), np.argmax(e, axis=1))),
        "evi(x<=0)=0": bool(np.all(e[~pos] == 0.0)),
        "0<evi'(x>0)<1": bool(np.all((slope[pos] > 0) & (slope[pos] < 1))),
    }


def run_checks(instances: int = 20, seed: int = 0, network_instances: int | None = None):
    """[(name, ok, detail)] for every op, the full network and the invariants."""
    rng = np.random.default_rng(seed)
    results = []
    for name, case in op_cases().items():
        t0 = time.perf_counter()
        err = check_op(name, case, instances, rng)
        results.append((f"grad {name}", err <= OP_TOL, f"max rel err {err:.2e} ({time.perf_counter() - t0:.2f}s)"))
    t0 = time.perf_counter()
    err = check_network(instances if network_instances is None else network_instances, rng)
    results.append(("grad network end-to-end", err <= END_TO_END_TOL,
                    f"max rel err {err:.2e} ({time.perf_counter() - t0:.2f}s)"))
    for name, ok in evidential_invariants(seed=seed).items():
        results.append((f"invariant {name}", ok, ""))
    return results
