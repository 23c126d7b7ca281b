"""Command line: ``stablab {run,sweep,calibrate,demo-softmax,report}``.

Exit status is 0 whenever the requested work completed, diverged runs
included; 2 for usage and config errors; 1 for I/O and other operational
failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from stablab import harness
from stablab.config import RunConfig, SweepPlan, load_config
from stablab.stability import VARIANT_KINDS, ConfigError
from stablab.telemetry import InconclusiveError

log = logging.getLogger("stablab")


def _common(p, out_default):
    p.add_argument("--config", help="TOML run config (see configs/desk.toml)")
    p.add_argument("--steps", type=int, help="training steps per run")
    p.add_argument("--seed", type=int, help="model and data seed")
    p.add_argument("--out", default=None, help=f"output directory (default {out_default})")


def build_parser():
    ap = argparse.ArgumentParser(prog="stablab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration")
    _common(p, "runs")
    p.add_argument("--variant", choices=VARIANT_KINDS)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint", action="store_true", help="save final parameters (params.bin + manifest.txt)")

    p = sub.add_parser("sweep", help="learning-rate x variant grid")
    _common(p, "[sweep].output_dir")
    p.add_argument("--variant", action="append", choices=VARIANT_KINDS, help="repeatable")
    p.add_argument("--lr", type=float, action="append", help="repeatable")
    p.add_argument("--parallel", type=int, default=1, help="worker processes")
    p.add_argument("--calibrate", action="store_true", help="find the baseline edge first and sweep around it")

    p = sub.add_parser("calibrate", help="print the calibrated LR grid")
    _common(p, "-")
    p.add_argument("--refine", type=int, default=4, help="bisection steps between ladder rungs")

    p = sub.add_parser("demo-softmax", help="softmax saturation table")
    p.add_argument("--out", default="runs/demo")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--magnitudes", default="1,10,40", help="comma-separated")
    p.add_argument("--capping", type=float, default=10.0)

    p = sub.add_parser("report", help="summarize a run or sweep directory")
    p.add_argument("--out", default="runs")
    return ap


def _base(args):
    cfg, plan = load_config(args.config) if args.config else (RunConfig(), None)
    cfg = cfg.with_(steps=args.steps, seed=args.seed)
    return cfg, plan


def cmd_run(args):
    cfg, _ = _base(args)
    cfg = cfg.with_(variant=args.variant, lr=args.lr)
    verdict, tel = harness.run_single(cfg, args.out or "runs", checkpoint=args.checkpoint)
    step = "" if verdict.divergence_step is None else f" at step {verdict.divergence_step} ({verdict.reason})"
    print(f"{cfg.name}: {verdict.status}{step}")
    print(f"telemetry: {tel}")


def cmd_sweep(args):
    cfg, plan = _base(args)
    lrs = args.lr or (plan.learning_rates if plan else None)
    variants = args.variant or (tuple(v.kind for v in plan.variants) if plan else (cfg.variant.kind,))
    if args.calibrate:
        lrs, lo, hi = harness.calibrate_lr_grid(cfg)
        print(f"baseline edge between {lo:.4g} and {hi:.4g}")
    if not lrs:
        raise ConfigError("no learning rates: pass --lr, --calibrate or a [sweep] table")
    out = args.out or (plan.output_dir if plan else "runs/sweep")
    kinds = [dataclasses.replace(cfg.variant, kind=k) for k in variants]
    sweep = SweepPlan(tuple(lrs), tuple(kinds), cfg.steps, cfg.seed, out)
    result = harness.run_sweep(sweep, cfg, parallel=max(1, args.parallel))
    print(result.table())
    for (kind, lr), err in sorted(result.errors.items()):
        print(f"cell {kind}@{lr:g} failed: {err}", file=sys.stderr)
    print(f"matrix: {out}/matrix.csv")


def cmd_calibrate(args):
    cfg, _ = _base(args)
    grid, lo, hi = harness.calibrate_lr_grid(cfg, refine_iters=args.refine)
    print(f"baseline edge between {lo:.4g} and {hi:.4g}")
    print("grid: " + ", ".join(f"{lr:.4g}" for lr in grid))


def cmd_demo(args):
    mags = [float(m) for m in args.magnitudes.split(",") if m.strip()]
    rows = harness.run_demo(args.out, mags, n=args.n, seed=args.seed, capping=args.capping)
    print(f"{'magnitude':>9}  {'kind':<6}  {'max_weight':>10}  {'entropy':>8}  nonzero")
    for r in rows:
        print(f"{r['magnitude']:>9g}  {r['kind']:<6}  {r['max_weight']:>10.4f}  {r['entropy']:>8.4f}  {r['nonzero_count']}")


def cmd_report(args):
    print(harness.report(args.out), end="")


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "calibrate": cmd_calibrate,
    "demo-softmax": cmd_demo,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, InconclusiveError, ValueError) as exc:
        print(f"stablab: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError) as exc:
        print(f"stablab: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
