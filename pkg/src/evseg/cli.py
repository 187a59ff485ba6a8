"""Command-line front end.

Exit codes: 0 success, 2 bad input or config, 3 numeric failure,
4 checkpoint/data mismatch.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import imageio
from .config import ConfigError, RunConfig, dump_config, load_config
from .metrics import MetricReport
from .network import CheckpointError, Net, load_checkpoint, save_checkpoint
from .progressive import progressive_segment
from .synth import load_corpus, make_corpus, noisy_copies, save_corpus
from .tensor import DimensionError, NumericError
from .train import TrainingDiverged, evaluate, train

log = logging.getLogger("evseg")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    for flag, key in (("seed", "seed"), ("epochs", "train.epochs"), ("lr", "train.lr"),
                      ("synth", "data.synth"), ("corpus", "data.corpus"), ("out", "out_dir"),
                      ("threads", "threads")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    try:
        return load_config(getattr(args, "config", None), overrides)
    except ConfigError as e:
        raise CliError(f"config error: {e}", EXIT_INPUT) from None


def _corpus(cfg: RunConfig):
    if cfg.data.corpus:
        try:
            return load_corpus(cfg.data.corpus, cfg.net.classes)
        except (OSError, ValueError) as e:
            raise CliError(f"cannot read corpus: {e}", EXIT_INPUT) from None
    return make_corpus(cfg.data.synth, seed=cfg.seed, size=cfg.data.size,
                       blur_range=(cfg.data.blur_min, cfg.data.blur_max))


def _load_net(path) -> Net:
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint {path} not found", EXIT_INPUT) from None
    except CheckpointError as e:
        raise CliError(str(e), EXIT_MISMATCH) from None


def _write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image_id", "iter", "delta"])
        for image_id, it, delta in rows:
            wr.writerow([image_id, it, f"{delta:.10g}"])


def _fit(cfg: RunConfig, corpus, out: Path, log_name="train_log.csv") -> Net:
    net = Net(cfg.net)
    try:
        train(net, corpus["train"], corpus.get("val", []), cfg.loss, cfg.train, cfg.prog, out / log_name)
    except TrainingDiverged as e:
        raise CliError(str(e), EXIT_NUMERIC) from None
    return net


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    corpus = make_corpus(cfg.data.synth, seed=cfg.seed, size=cfg.data.size,
                         blur_range=(cfg.data.blur_min, cfg.data.blur_max))
    save_corpus(out, corpus, image_format=args.format)
    print(f"wrote {sum(len(v) for v in corpus.values())} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = _corpus(cfg)
    (out / "run.cfg").write_text(dump_config(cfg))
    net = _fit(cfg, corpus, out)
    save_checkpoint(out / "model.ckpt", net)
    print(f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def _eval_samples(cfg: RunConfig, split: str, noise: float | None):
    corpus = _corpus(cfg)
    if split not in corpus:
        raise CliError(f"corpus has no '{split}' split", EXIT_INPUT)
    samples = corpus[split]
    if noise is not None:
        try:
            samples = noisy_copies(samples, noise, seed=cfg.noise.seed)
        except ValueError as e:
            raise CliError(str(e), EXIT_INPUT) from None
    return samples


def cmd_eval(args) -> int:
    cfg = _config(args)
    net = _load_net(args.checkpoint)
    samples = _eval_samples(cfg, args.split, args.noise)
    if samples and samples[0].image.shape[0] != net.cfg.in_channels:
        raise CliError("image channels do not match the checkpoint", EXIT_MISMATCH)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        report, trace, _ = evaluate(net, samples, cfg.prog, threads=cfg.threads)
    except DimensionError as e:
        raise CliError(f"data does not fit the checkpoint: {e}", EXIT_MISMATCH) from None
    except NumericError as e:
        raise CliError(str(e), EXIT_NUMERIC) from None
    report.write_csv(out / "metrics.csv")
    _write_trace(out / "trace.csv", trace)
    print(f"dice={report.dice:.4f} iou={report.iou:.4f} assd={report.assd:.4f} "
          f"ueo@0.5={report.ueo:.4f} ueo_max={report.ueo_max:.4f} mean_u={report.mean_uncertainty:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    net = _load_net(args.checkpoint)
    try:
        image = imageio.read_image(args.image, net.cfg.in_channels)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read image: {e}", EXIT_INPUT) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = progressive_segment(image, net)
    except DimensionError as e:
        raise CliError(f"image does not fit the checkpoint: {e}", EXIT_MISMATCH) from None
    except NumericError as e:
        raise CliError(str(e), EXIT_NUMERIC) from None
    u32 = res.umap.values[0].astype(np.float32)
    imageio.write_pgm(out / "pred.pgm", res.mask.astype(np.uint8), maxval=255)
    imageio.write_f32(out / "umap.f32", u32)
    imageio.write_pgm(out / "umap.pgm", imageio.encode_unit16(u32.astype(np.float64)), maxval=65535)
    _write_trace(out / "trace.csv", [("input", i + 1, d) for i, d in enumerate(res.trace)])
    if args.mask:
        try:
            gt = imageio.read_pgm(args.mask)
        except (OSError, ValueError) as e:
            raise CliError(f"cannot read mask: {e}", EXIT_INPUT) from None
        if gt.shape != res.mask.shape:
            raise CliError("mask shape does not match the image", EXIT_INPUT)
        imageio.write_pgm(out / "diff.pgm", (gt != res.mask).astype(np.uint8), maxval=255)
    print(f"iterations={res.iterations} wrote {out}")
    return EXIT_OK


ABLATE_HEADER = ("euga", "sael", "evidence_fn", "lambda2", "literal_lu_sign",
                 "dice", "iou", "assd", "ueo@0.5", "ueo_max", "mean_u",
                 "noise_sigma", "noisy_dice", "noisy_ueo_max", "noisy_mean_u")


def ablation_cell(cfg: RunConfig, euga: bool, sael: bool) -> RunConfig:
    """SAEL off means the classic generator (exp) and no fidelity term."""
    net = dataclasses.replace(cfg.net, use_euga=euga, evidence_fn="evi" if sael else "exp")
    loss = dataclasses.replace(cfg.loss, lambda2=cfg.loss.lambda2 if sael else 0.0, literal_lu_sign=False)
    return dataclasses.replace(cfg, net=net, loss=loss)


def _fmt(v: float) -> str:
    return f"{v:.6f}" if np.isfinite(v) else "undefined"


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = _corpus(cfg)
    test = corpus.get("test") or corpus.get("val")
    noisy = noisy_copies(test, cfg.noise.sigma, seed=cfg.noise.seed)
    with open(out / "ablation.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(ABLATE_HEADER)
        for euga in (False, True):
            for sael in (False, True):
                cell = ablation_cell(cfg, euga, sael)
                tag = f"euga{int(euga)}_sael{int(sael)}"
                net = _fit(cell, corpus, out, f"train_log_{tag}.csv")
                save_checkpoint(out / f"model_{tag}.ckpt", net)
                clean: MetricReport = evaluate(net, test, cell.prog, cfg.threads)[0]
                dirty: MetricReport = evaluate(net, noisy, cell.prog, cfg.threads)[0]
                wr.writerow([int(euga), int(sael), cell.net.evidence_fn, cell.loss.lambda2,
                             int(cell.loss.literal_lu_sign),
                             _fmt(clean.dice), _fmt(clean.iou), _fmt(clean.assd), _fmt(clean.ueo),
                             _fmt(clean.ueo_max), _fmt(clean.mean_uncertainty), cfg.noise.sigma,
                             _fmt(dirty.dice), _fmt(dirty.ueo_max), _fmt(dirty.mean_uncertainty)])
                fh.flush()
                print(f"{tag}: dice={clean.dice:.4f} ueo_max={clean.ueo_max:.4f}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks(instances=args.instances, seed=args.seed if args.seed is not None else 0)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        failed += not ok
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evseg", description="Evidential segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    common(sp, out_required=True)
    sp.add_argument("--n", dest="synth", type=int, help="training images (val/test get n/4 each)")
    sp.add_argument("--format", choices=("f32", "pgm"), default="f32")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--synth", type=int, help="train on N synthetic images")
    sp.add_argument("--corpus", help="corpus directory with index.csv")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--synth", type=int)
    sp.add_argument("--corpus")
    sp.add_argument("--split", default="test")
    sp.add_argument("--noise", type=float, metavar="SIGMA")
    sp.add_argument("--threads", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="segment one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask", help="ground-truth label PGM; enables diff.pgm")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("ablate", help="2x2 EUGA/SAEL ablation")
    common(sp)
    sp.add_argument("--synth", type=int)
    sp.add_argument("--corpus")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--threads", type=int)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("check", help="gradient and invariant self-checks")
    sp.add_argument("--instances", type=int, default=5)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"evseg: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
