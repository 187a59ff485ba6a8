"""Training loop and corpus evaluation."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .losses import GroundTruth, LossConfig, LossTerms, loss_terms
from .metrics import MetricReport, evaluate_pair
from .network import Adam, Net
from .progressive import ProgressiveConfig, progressive_segment
from .synth import SegSample
from .tensor import NumericError, Tape, Tensor

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "lambda1", "L_ice", "L_KL", "L_u", "L_total", "val_dice")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0
    # forwards per step; all but the last only produce the guidance map
    guidance_iters: int = 2
    # backpropagate through the guidance forward as well (2-iteration unroll)
    unroll_iters: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.guidance_iters < 1:
            raise ValueError("epochs, batch_size and guidance_iters must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, cause: Exception):
        super().__init__(f"numeric failure at epoch {epoch}, step {step}: {cause}")
        self.epoch = epoch
        self.step = step


@dataclass
class EpochLog:
    epoch: int
    lambda1: float
    ice: float
    kl: float
    u: float
    total: float
    val_dice: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [f"{v:.10g}" for v in
                                    (self.lambda1, self.ice, self.kl, self.u, self.total, self.val_dice)]


def _batch(samples: list[SegSample]):
    images = np.stack([s.image for s in samples])
    gt = GroundTruth(np.stack([s.mask for s in samples]))
    return images, gt


def train_step(net: Net, opt: Adam, images: np.ndarray, gt: GroundTruth, epoch: int,
               loss_cfg: LossConfig, cfg: TrainConfig) -> LossTerms:
    x = Tensor(images)
    umap = None
    # a skip without attention ignores the map, so extra guidance passes are wasted work
    guidance = cfg.guidance_iters - 1 if net.cfg.use_euga else 0
    if cfg.unroll_iters and guidance:
        for _ in range(guidance - 1):
            umap = net.field(x, umap).uncertainty.detach()
        with Tape() as tape:
            umap = net.field(x, umap).uncertainty
            field = net.field(x, umap)
            terms = loss_terms(field, gt, epoch, loss_cfg)
    else:
        for _ in range(guidance):
            umap = net.field(x, umap).uncertainty.detach()
        with Tape() as tape:
            field = net.field(x, umap)
            terms = loss_terms(field, gt, epoch, loss_cfg)
    opt.step(tape.backward(terms.total))
    return terms


def train(net: Net, train_set: list[SegSample], val_set: list[SegSample], loss_cfg: LossConfig,
          cfg: TrainConfig, prog_cfg: ProgressiveConfig | None = None, log_path=None) -> list[EpochLog]:
    prog_cfg = prog_cfg or ProgressiveConfig()
    opt = Adam(net.params.values(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochLog] = []
    fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(LOG_HEADER)
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_set))
            sums = np.zeros(4)
            steps = 0
            lam1 = 0.0
            for step, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
                images, gt = _batch(batch)
                try:
                    terms = train_step(net, opt, images, gt, epoch, loss_cfg, cfg)
                except NumericError as e:
                    raise TrainingDiverged(epoch, step, e) from e
                if not np.isfinite(terms.total.item()):
                    raise TrainingDiverged(epoch, step, NumericError("loss is not finite"))
                sums += (terms.ice, terms.kl, terms.u, terms.total.item())
                steps += 1
                lam1 = terms.lambda1
            val = evaluate(net, val_set, prog_cfg)[0].dice if val_set else float("nan")
            entry = EpochLog(epoch, lam1, *(sums / max(steps, 1)), val)
            history.append(entry)
            log.info("epoch %d  loss %.4f  val dice %.4f", epoch, entry.total, val)
            if writer:
                writer.writerow(entry.row())
                fh.flush()
    finally:
        if fh:
            fh.close()
    return history


def evaluate(net: Net, samples: list[SegSample], prog_cfg: ProgressiveConfig | None = None,
             threads: int = 1):
    """Progressive inference per image -> (MetricReport, [(image_id, iter, delta)], results).

    Rows come back in input order whatever the thread count.
    """
    prog_cfg = prog_cfg or ProgressiveConfig()

    def one(s: SegSample):
        res = progressive_segment(s.image, net, prog_cfg)
        return res, evaluate_pair(s.id, res.mask, s.labels, res.umap.values[0])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(one, samples))
    else:
        outs = [one(s) for s in samples]
    report = MetricReport([row for _, row in outs])
    trace = [(s.id, i + 1, d) for s, (res, _) in zip(samples, outs) for i, d in enumerate(res.trace)]
    return report, trace, [res for res, _ in outs]
