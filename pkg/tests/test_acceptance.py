"""Acceptance gate: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
The full model and its two single-component ablations are trained once per
session and shared by the last three criteria, roughly a quarter of an hour
on one core.
"""

from __future__ import annotations

import dataclasses
import math
import sys
import time

import numpy as np
import pytest

from evseg.checks import END_TO_END_TOL, OP_TOL, evidential_invariants, run_checks
from evseg.config import load_config
from evseg.evidential import predict_mask, to_field
from evseg.losses import GroundTruth, LossConfig, lambda1, loss_ice, loss_kl, loss_u
from evseg.metrics import UEO_THRESHOLDS, assd, dice, iou, ueo, ueo_max
from evseg.network import Net, NetConfig
from evseg.progressive import ProgressiveConfig, progressive_segment
from evseg.synth import make_corpus, noisy_copies
from evseg.train import evaluate, train

_CAPTURE = None


@pytest.fixture(scope="session", autouse=True)
def _terminal(pytestconfig):
    global _CAPTURE
    _CAPTURE = pytestconfig.pluginmanager.getplugin("capturemanager")


def say(line: str) -> None:
    """Print past pytest's output capture so the line shows in any run mode."""
    if _CAPTURE is None:
        print(line, flush=True)
        return
    with _CAPTURE.global_and_fixture_disabled():
        print("\n" + line, flush=True)


def emit(name: str, ok: bool, detail: str = "") -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    say(line)
    assert ok, line


# ---------------------------------------------------------------- 1


def test_gradient_suite():
    t0 = time.perf_counter()
    results = run_checks(instances=20, seed=0)
    elapsed = time.perf_counter() - t0
    grads = [r for r in results if r[0].startswith("grad ")]
    bad = [f"{n} ({d})" for n, ok, d in grads if not ok]
    ok = not bad and elapsed < 300
    emit("gradient suite", ok,
         f"{len(grads)} ops x 20 instances, op tol {OP_TOL:g}, end-to-end tol {END_TO_END_TOL:g}, "
         f"{elapsed:.1f}s" + (f"; failing: {bad}" if bad else ""))


# ---------------------------------------------------------------- 2


def test_evidential_invariants():
    failed = []
    for classes, seed in ((2, 0), (5, 1)):
        for name, ok in evidential_invariants(n=10_000, classes=classes, seed=seed).items():
            if not ok:
                failed.append(f"{name} (C={classes})")
    emit("evidential invariants", not failed, "10^4 logit vectors in [-10, 10], C=2 and C=5"
         + (f"; failing: {failed}" if failed else ""))


# ---------------------------------------------------------------- 3


def _field(alpha):
    return to_field(np.asarray(alpha, dtype=np.float64).reshape(1, -1, 1, 1) - 1.0)


def _gt(label):
    return GroundTruth.from_labels(np.array([[[label]]]), 2)


def test_loss_anchors():
    ice = loss_ice(_field([1, 1]), _gt(0)).item()
    kl21 = loss_kl(np.array([2.0, 1.0]).reshape(1, 2, 1, 1)).item()
    kl11 = loss_kl(np.ones((1, 2, 1, 1))).item()
    lu_u1 = loss_u(_field([1, 1]), _gt(0)).item()
    lu_p1 = loss_u(_field([1e16, 1]), _gt(0)).item()
    cfg = LossConfig(total_epochs=30)
    checks = {
        "L_ice=ln2": abs(ice - math.log(2)) <= 1e-10,
        "L_KL(2,1)=ln2-0.5": abs(kl21 - (math.log(2) - 0.5)) <= 1e-8,
        "L_KL(1,1)=0": abs(kl11) <= 1e-12,
        "L_u(u=1)=0": lu_u1 == 0.0,
        "L_u(p_gt->1)=0": abs(lu_p1) <= 1e-12,
        "lambda1(0)=0": lambda1(0, cfg) == 0.0,
        "lambda1(total/10)=1": lambda1(3, cfg) == 1.0,
    }
    failed = [k for k, v in checks.items() if not v]
    emit("loss anchors", not failed,
         f"ice={ice:.12f} kl21={kl21:.12f} kl11={kl11:.1e} lu={lu_u1:.1e},{lu_p1:.1e}"
         + (f"; failing: {failed}" if failed else ""))


# ---------------------------------------------------------------- 4


def _brute_counts(r, g):
    tp = fp = fn = 0
    for a, b in zip(r.ravel().tolist(), g.ravel().tolist()):
        tp += a and b
        fp += a and not b
        fn += b and not a
    return tp, fp, fn


def _brute_dice(r, g):
    tp, fp, fn = _brute_counts(r, g)
    return 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def _brute_iou(r, g):
    tp, fp, fn = _brute_counts(r, g)
    return 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)


def _brute_surface(m):
    h, w = m.shape
    out = []
    for i in range(h):
        for j in range(w):
            if m[i, j] and any(not (0 <= a < h and 0 <= b < w) or not m[a, b]
                               for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1))):
                out.append((i, j))
    return out


def _brute_assd(r, g):
    sr, sg = _brute_surface(r), _brute_surface(g)
    if not sr or not sg:
        return math.inf
    total = 0.0
    for p in sr:
        total += min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in sg)
    for q in sg:
        total += min(math.hypot(p[0] - q[0], p[1] - q[1]) for p in sr)
    return total / (len(sr) + len(sg))


def test_metric_oracles():
    rng = np.random.default_rng(2024)
    mismatches = []
    worst_assd = 0.0
    for k in range(200):
        h, w = rng.integers(1, 17, size=2)
        r = rng.random((h, w)) < rng.uniform(0.05, 0.95)
        g = rng.random((h, w)) < rng.uniform(0.05, 0.95)
        u = rng.uniform(size=(h, w))
        err = r != g
        if dice(r, g) != _brute_dice(r, g) or iou(r, g) != _brute_iou(r, g):
            mismatches.append(f"overlap #{k}")
        if any(ueo(err, u, t) != _brute_dice(err, u >= t) for t in UEO_THRESHOLDS):
            mismatches.append(f"ueo #{k}")
        if ueo_max(err, u) != max(_brute_dice(err, u >= t) for t in UEO_THRESHOLDS):
            mismatches.append(f"ueo_max #{k}")
        a, b = assd(r, g), _brute_assd(r, g)
        if math.isinf(a) != math.isinf(b):
            mismatches.append(f"assd #{k}")
        elif not math.isinf(a):
            worst_assd = max(worst_assd, abs(a - b))
        i = iou(r, g)
        if abs(dice(r, g) - 2 * i / (1 + i)) > 1e-15:
            mismatches.append(f"identity #{k}")
    ok = not mismatches and worst_assd <= 1e-12
    emit("metric oracles", ok, f"200 pairs <=16x16, max |ASSD - oracle| {worst_assd:.1e}"
         + (f"; mismatches: {mismatches[:5]}" if mismatches else ""))


# ---------------------------------------------------------------- 5


class _Recorder:
    def __init__(self, net):
        self.net, self.seen, self.fields = net, [], []

    def field(self, image, umap):
        self.seen.append(np.array(umap))
        self.fields.append(self.net.field(image, umap))
        return self.fields[-1]


def test_progressive_loop_contract():
    rng = np.random.default_rng(5)
    image = rng.uniform(size=(3, 32, 32))
    notes = {}
    rec = _Recorder(Net(NetConfig(seed=1)))
    cfg = ProgressiveConfig(epsilon=1e-12, max_iters=4)
    res = progressive_segment(image, rec, cfg)
    notes["starts at ones"] = np.array_equal(rec.seen[0], np.ones((1, 1, 32, 32)))
    notes["within max_iters"] = res.iterations == len(rec.seen) <= cfg.max_iters
    notes["final argmax"] = np.array_equal(res.mask, predict_mask(rec.fields[-1])[0])
    notes["eps=2 -> 1 iter"] = progressive_segment(image, Net(NetConfig(seed=1)), ProgressiveConfig(epsilon=2.0)).iterations == 1
    flat = Net(NetConfig(seed=1))
    for name in ("euga.q.w", "euga.q.b", "euga.k.w", "euga.k.b"):
        flat.params[name].data[...] = 0.0
    res2 = progressive_segment(image, flat, ProgressiveConfig(epsilon=1e-12, max_iters=5))
    notes["umap-independent -> delta 0 at iter 2"] = res2.iterations == 2 and res2.trace[1] == 0.0
    failed = [k for k, v in notes.items() if not v]
    emit("progressive loop contract", not failed, ", ".join(notes) + (f"; failing: {failed}" if failed else ""))


# ---------------------------------------------------------------- 6-8: trained models


@dataclasses.dataclass
class Cell:
    name: str
    seconds: float
    final_val_dice: float
    val: object
    clean: object
    noisy: object


class Bench:
    """Trains each ablation cell at most once per session."""

    def __init__(self):
        self.cfg = load_config(env={})
        d = self.cfg.data
        self.corpus = make_corpus(d.synth, seed=self.cfg.seed, size=d.size, blur_range=(d.blur_min, d.blur_max))
        self.noisy_test = noisy_copies(self.corpus["test"], self.cfg.noise.sigma, seed=self.cfg.noise.seed)
        self.cells: dict[tuple[bool, bool], Cell] = {}

    def cell(self, euga: bool, sael: bool) -> Cell:
        key = (euga, sael)
        if key not in self.cells:
            cfg = self.cfg
            net_cfg = dataclasses.replace(cfg.net, use_euga=euga, evidence_fn="evi" if sael else "exp")
            loss_cfg = dataclasses.replace(cfg.loss, lambda2=cfg.loss.lambda2 if sael else 0.0)
            net = Net(net_cfg)
            t0 = time.perf_counter()
            hist = train(net, self.corpus["train"], self.corpus["val"], loss_cfg, cfg.train, cfg.prog)
            secs = time.perf_counter() - t0
            self.cells[key] = Cell(
                f"euga={'on' if euga else 'off'} sael={'on' if sael else 'off'}", secs, hist[-1].val_dice,
                evaluate(net, self.corpus["val"], cfg.prog)[0],
                evaluate(net, self.corpus["test"], cfg.prog)[0],
                evaluate(net, self.noisy_test, cfg.prog)[0])
            c = self.cells[key]
            say(f"      [{c.name}] train {secs:.0f}s  val dice {c.val.dice:.4f}  test dice {c.clean.dice:.4f} "
                f"ueo_max {c.clean.ueo_max:.4f} u {c.clean.mean_uncertainty:.4f} | noisy dice {c.noisy.dice:.4f} "
                f"ueo_max {c.noisy.ueo_max:.4f} u {c.noisy.mean_uncertainty:.4f}")
        return self.cells[key]


@pytest.fixture(scope="session")
def bench():
    return Bench()


def test_desk_training(bench):
    c = bench.cell(True, True)
    ok = c.final_val_dice >= 0.90 and c.val.ueo_max >= 0.15 and c.seconds <= 1800
    emit("desk-scale training", ok,
         f"val dice {c.final_val_dice:.4f} (>=0.90), val UEO_max {c.val.ueo_max:.4f} (>=0.15), "
         f"{c.seconds:.0f}s (<=1800s)")


def test_ablation_trends(bench):
    full, no_euga, no_sael = bench.cell(True, True), bench.cell(False, True), bench.cell(True, False)
    d_dice = full.clean.dice - no_euga.clean.dice
    d_ueo = full.clean.ueo_max - no_sael.clean.ueo_max
    emit("ablation trends", d_dice > 0 and d_ueo > 0,
         f"dice EUGA on-off {full.clean.dice:.4f}-{no_euga.clean.dice:.4f}={d_dice:+.4f}; "
         f"UEO_max SAEL on-off {full.clean.ueo_max:.4f}-{no_sael.clean.ueo_max:.4f}={d_ueo:+.4f}")


def test_noise_trends(bench):
    full, no_sael = bench.cell(True, True), bench.cell(True, False)
    dice_drop = full.noisy.dice < full.clean.dice
    u_rise = full.noisy.mean_uncertainty > full.clean.mean_uncertainty
    d_ueo = full.noisy.ueo_max - no_sael.noisy.ueo_max
    emit("noise trends", dice_drop and u_rise and d_ueo >= 0,
         f"sigma={bench.cfg.noise.sigma}: dice {full.clean.dice:.4f}->{full.noisy.dice:.4f}, "
         f"mean u {full.clean.mean_uncertainty:.4f}->{full.noisy.mean_uncertainty:.4f}, "
         f"noisy UEO_max SAEL on-off {full.noisy.ueo_max:.4f}-{no_sael.noisy.ueo_max:.4f}={d_ueo:+.4f}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
