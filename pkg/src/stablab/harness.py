"""Single runs, learning-rate sweeps, LR-grid calibration and reports."""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import logging
import math
import os
import statistics
import time

import numpy as np

from stablab.config import RunConfig, SweepPlan
from stablab.data import next_batch
from stablab.model import forward_loss, init_params, save_checkpoint
from stablab.optim import LRSchedule, NonFiniteGradientError, OptimizerState, adam_step, clip_global_norm, lr_at
from stablab.telemetry import (
    DivergenceDetector,
    InconclusiveError,
    RunVerdict,
    TelemetryWriter,
    capture,
    read_telemetry,
    softmax_saturation_demo,
    write_demo_csv,
)
from stablab.tensor import no_grad

log = logging.getLogger(__name__)

VERDICT_FIELDS = ("run_id", "variant", "lr", "status", "divergence_step", "reason")
LOSS_FIELDS = ("step", "loss", "lr", "grad_norm")
# Grid shape relative to the last LR at which the baseline converges.
GRID_RATIOS = (1.0, 8 / 6, 20 / 6, 40 / 6, 60 / 6, 80 / 6)


@dataclasses.dataclass
class TrainResult:
    verdict: RunVerdict
    losses: list
    steps_run: int
    val_loss: float = math.nan
    telemetry_path: str | None = None
    elapsed: float = 0.0
    model: object = dataclasses.field(default=None, repr=False)


def evaluate(model, source, batches=4) -> float:
    model.set_sigma_updates(False)
    try:
        with no_grad():
            vals = [float(forward_loss(model, next_batch(source, "val", i))[0].data) for i in range(batches)]
    finally:
        model.set_sigma_updates(True)
    return float(np.mean(vals))


def train(config: RunConfig, telemetry_path=None, loss_path=None, on_step=None) -> TrainResult:
    """Train one model; stop at ``config.steps`` or (optionally) at divergence.

    ``on_step(step, model, batch)`` is called after each backward pass, before
    the parameters are updated.
    """
    if config.steps < 1:
        raise InconclusiveError("steps_per_run must be >= 1")
    t0 = time.perf_counter()
    model = init_params(config.model)
    params = model.named_parameters()
    no_decay = model.no_decay_names()
    source = config.source()
    oc = config.optim
    schedule = LRSchedule.for_run(oc.lr, config.steps, oc.warmup_frac, oc.min_lr_ratio)
    state = OptimizerState(oc.beta1, oc.beta2, oc.eps, oc.weight_decay, oc.clip_norm)
    detector = DivergenceDetector(config.telemetry.rules)
    blocks = config.capture_blocks()
    stride = max(1, config.telemetry.stride)
    writer = TelemetryWriter(telemetry_path, config.name) if telemetry_path else None
    loss_fh = open(loss_path, "w", newline="", encoding="utf-8") if loss_path else None
    loss_csv = csv.writer(loss_fh, lineterminator="\n") if loss_fh else None
    if loss_csv:
        loss_csv.writerow(LOSS_FIELDS)
    losses = []
    verdict = None
    step = 0
    try:
        for step in range(1, config.steps + 1):
            batch = next_batch(source, "train", step - 1)
            want_tel = step % stride == 0 or step == 1
            taps = {b: {} for b in blocks} if want_tel else None
            lr = lr_at(schedule, step)
            loss, _ = forward_loss(model, batch, taps)
            loss_val = float(loss.data)
            losses.append(loss_val)
            model.zero_grad()
            grad_norm = math.nan
            records = []
            if math.isfinite(loss_val):
                loss.backward()
                try:
                    _, grad_norm = clip_global_norm(params.values(), oc.clip_norm)
                except NonFiniteGradientError:
                    grad_norm = math.inf
            if taps:
                for b in blocks:
                    records += capture(taps[b], b, step, loss_val, lr)
                if writer:
                    writer.write(records)
            if on_step is not None:
                on_step(step, model, batch)
            if loss_csv:
                loss_csv.writerow([step, repr(loss_val), repr(lr), repr(float(grad_norm))])
            y_norms = {(r.layer_block, r.layer_name): r.y_norm for r in records} if records else None
            verdict = detector.update(step, loss_val, y_norms)
            if verdict is None and not math.isfinite(grad_norm):
                verdict = detector._diverge(step, "norm_explosion")
            if verdict is not None and config.abort_on_divergence:
                break
            if math.isfinite(grad_norm):
                adam_step(params, state, lr, no_decay)
    finally:
        if writer:
            writer.close()
        if loss_fh:
            loss_fh.close()
    if verdict is None:
        verdict = detector.finish()
    val = math.nan
    if config.eval_batches > 0 and not verdict.diverged:
        val = evaluate(model, source, config.eval_batches)
    return TrainResult(verdict, losses, step, val, telemetry_path, time.perf_counter() - t0, model)


def run_dir(out_dir, config: RunConfig):
    return os.path.join(out_dir, "runs", config.name)


def write_verdicts(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VERDICT_FIELDS)
        for run_id, variant, lr, v in rows:
            w.writerow(
                [run_id, variant, repr(float(lr)), v.status, "" if v.divergence_step is None else v.divergence_step, v.reason or ""]
            )


def read_verdicts(path):
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            step = int(row["divergence_step"]) if row["divergence_step"] else None
            v = RunVerdict(row["status"], step, row["reason"] or None)
            out.append((row["run_id"], row["variant"], float(row["lr"]), v))
    return out


def run_single(config: RunConfig, out_dir="runs", checkpoint=False):
    """Train one configuration; write telemetry, loss and verdict CSVs.

    With ``checkpoint`` the final parameters go to ``<run dir>/checkpoint``.
    Returns ``(verdict, telemetry_csv_path)``.
    """
    if config.steps < 1:
        raise InconclusiveError("steps_per_run must be >= 1 to classify a run")
    d = run_dir(out_dir, config)
    os.makedirs(d, exist_ok=True)
    tel = os.path.join(d, "telemetry.csv")
    res = train(config, tel, os.path.join(d, "loss.csv"))
    write_verdicts(os.path.join(d, "verdict.csv"), [(config.name, config.variant.kind, config.optim.lr, res.verdict)])
    if checkpoint:
        save_checkpoint(res.model, os.path.join(d, "checkpoint"))
    log.info("%s: %s at step %s (%.1fs)", config.name, res.verdict.status, res.verdict.divergence_step, res.elapsed)
    return res.verdict, tel


def _cell(args):
    config, out_dir = args
    try:
        verdict, tel = run_single(config, out_dir)
        return config.name, config.variant.kind, config.optim.lr, verdict, None
    except Exception as exc:  # per-cell failure is recorded, the sweep continues
        return config.name, config.variant.kind, config.optim.lr, None, f"{type(exc).__name__}: {exc}"


@dataclasses.dataclass
class SweepResult:
    learning_rates: tuple
    variants: tuple
    cells: dict  # (variant kind, lr) -> RunVerdict | None
    errors: dict
    run_ids: dict

    def max_converging_lr(self, kind):
        ok = [lr for lr in self.learning_rates if (v := self.cells.get((kind, lr))) is not None and not v.diverged]
        return max(ok) if ok else None

    def non_monotone(self):
        """Variants that converge at some LR above one where they diverge."""
        flagged = []
        for kind in self.variants:
            seen_div = False
            for lr in self.learning_rates:
                v = self.cells.get((kind, lr))
                if v is None:
                    continue
                if v.diverged:
                    seen_div = True
                elif seen_div:
                    flagged.append(kind)
                    break
        return flagged

    def table(self) -> str:
        head = ["variant"] + [f"{lr:.3g}" for lr in self.learning_rates]
        rows = [head]
        for kind in self.variants:
            row = [kind]
            for lr in self.learning_rates:
                v = self.cells.get((kind, lr))
                row.append("?" if v is None else v.mark)
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        lines.insert(1, "-+-".join("-" * w for w in widths))
        return "\n".join(lines)


def run_sweep(plan: SweepPlan, base: RunConfig = RunConfig(), parallel=1, order=None) -> SweepResult:
    """Run every (variant, LR) cell of ``plan`` and write the convergence matrix.

    ``order`` optionally permutes the cell execution order (cells are
    independent, so the matrix does not depend on it).
    """
    os.makedirs(plan.output_dir, exist_ok=True)
    lrs = tuple(sorted(plan.learning_rates))
    cells = [
        base.with_(variant=v, lr=lr, steps=plan.steps_per_run, seed=plan.seed, run_id=None)
        for v in plan.variants
        for lr in lrs
    ]
    if order is not None:
        cells = [cells[i] for i in order]
    jobs = [(c, plan.output_dir) for c in cells]
    if parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_cell, jobs))
    else:
        results = [_cell(j) for j in jobs]
    kinds = tuple(v.kind for v in plan.variants)
    grid, errors, ids = {}, {}, {}
    for run_id, kind, lr, verdict, err in results:
        grid[(kind, lr)] = verdict
        ids[(kind, lr)] = run_id
        if err:
            errors[(kind, lr)] = err
            log.error("cell %s failed: %s", run_id, err)
    result = SweepResult(lrs, kinds, grid, errors, ids)
    write_sweep_outputs(plan.output_dir, result)
    return result


def write_sweep_outputs(out_dir, result: SweepResult):
    rows = [
        (result.run_ids[(k, lr)], k, lr, result.cells[(k, lr)])
        for k in result.variants
        for lr in result.learning_rates
        if result.cells.get((k, lr)) is not None
    ]
    write_verdicts(os.path.join(out_dir, "verdicts.csv"), rows)
    with open(os.path.join(out_dir, "matrix.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant"] + [repr(lr) for lr in result.learning_rates])
        for k in result.variants:
            w.writerow(
                [k]
                + [
                    "error" if result.cells.get((k, lr)) is None else result.cells[(k, lr)].status
                    for lr in result.learning_rates
                ]
            )
    with open(os.path.join(out_dir, "matrix.txt"), "w", encoding="utf-8") as fh:
        fh.write(result.table() + "\n")
    if result.errors:
        with open(os.path.join(out_dir, "errors.txt"), "w", encoding="utf-8") as fh:
            for (k, lr), err in sorted(result.errors.items()):
                fh.write(f"{k}\t{lr!r}\t{err}\n")


def stability_ordering(result: SweepResult) -> dict:
    """Max converging LR per variant and the expected orderings among them."""
    best = {k: result.max_converging_lr(k) for k in result.variants}

    def le(a, b):
        if a not in best or b is None or best.get(a) is None:
            return None
        return best[a] <= b

    out = {"max_converging_lr": best}
    if {"baseline", "qk_norm"} <= best.keys():
        out["baseline<=qk_norm"] = le("baseline", best["qk_norm"])
    cands = [best[k] for k in ("qkv_norm", "qk_norm_cap") if best.get(k) is not None]
    if "qk_norm" in best and ({"qkv_norm", "qk_norm_cap"} & best.keys()):
        out["qk_norm<=max(qkv_norm,qk_norm_cap)"] = le("qk_norm", max(cands)) if cands else False
    return out


# -- calibration -------------------------------------------------------------------
def _verdict(base, lr, steps, memo=None) -> RunVerdict:
    key = (lr, steps)
    if memo is not None and key in memo:
        return memo[key]
    v = train(base.with_(variant="baseline", lr=lr, steps=steps)).verdict
    if memo is not None:
        memo[key] = v
    return v


def _diverges(base, lr, steps, memo=None):
    return _verdict(base, lr, steps, memo).diverged


def calibrate_lr_grid(base: RunConfig, start=1e-4, factor=math.sqrt(10), max_lr=30.0, refine_iters=4, steps=None, memo=None):
    """Find the baseline's divergence edge and lay the sweep grid around it.

    Climb a geometric ladder from ``start`` until the baseline diverges after
    having converged at a lower rung (rungs too small to make progress are
    skipped), then bisect geometrically between the last converging and the
    first diverging rung. The grid is the last converging LR times
    ``GRID_RATIOS``. Returns ``(grid, edge_lo, edge_hi)``. Pass a dict
    as ``memo`` to reuse ladder verdicts across calls with the same base.
    """
    steps = steps or base.steps
    lo, lr = None, start
    while lr <= max_lr:
        if not _diverges(base, lr, steps, memo):
            lo = lr
        elif lo is not None:
            break
        lr *= factor
    else:
        raise RuntimeError(f"no converge-then-diverge edge below lr={max_lr}")
    hi = lr
    for _ in range(refine_iters):
        mid = math.sqrt(lo * hi)
        if _diverges(base, mid, steps, memo):
            hi = mid
        else:
            lo = mid
    return tuple(lo * r for r in GRID_RATIOS), lo, hi


def divergence_pair(base: RunConfig, start=1e-4, factor=math.sqrt(10), max_lr=30.0, steps=None, memo=None):
    """``(lo, hi)``: the last converging ladder rung and the first rung above it that blows up.

    "Blows up" means a non-finite loss, a loss explosion or a norm explosion;
    rungs that merely stall are stepped over. Same ladder as
    :func:`calibrate_lr_grid`, so a shared ``memo`` avoids repeated runs.
    """
    steps = steps or base.steps
    _, lo, _ = calibrate_lr_grid(base, start, factor, max_lr, refine_iters=0, steps=steps, memo=memo)
    lr = start
    while lr <= max_lr:
        if lr > lo:
            v = _verdict(base, lr, steps, memo)
            if v.diverged and v.reason != "stalled":
                return lo, lr
        lr *= factor
    raise RuntimeError(f"baseline never blows up below lr={max_lr}")


# -- quality comparison (final validation loss over seeds) -------------------------
_T95 = {1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571, 6: 2.447, 7: 2.365, 8: 2.306, 9: 2.262, 10: 2.228}


def compare_quality(base: RunConfig, variants, lr, steps=2000, seeds=(0, 1, 2)):
    """Final validation loss per variant: mean and 95% half-width over ``seeds``."""
    rows = []
    for kind in variants:
        vals = []
        for s in seeds:
            res = train(base.with_(variant=kind, lr=lr, steps=steps, seed=s))
            vals.append(res.val_loss if not res.verdict.diverged else math.nan)
        finite = [v for v in vals if math.isfinite(v)]
        n = len(finite)
        mean = statistics.fmean(finite) if finite else math.nan
        half = _T95.get(n - 1, 1.96) * statistics.stdev(finite) / math.sqrt(n) if n > 1 else math.nan
        rows.append({"variant": kind, "val_loss": mean, "ci95": half, "seeds": n, "values": vals})
    return rows


# -- report --------------------------------------------------------------------------
LAYERS_OF_INTEREST = ("QKV", "Proj", "FC2")


def norm_ratio_at(diverged_tel, converged_tel, step=None, block=None):
    """y_norm ratio (diverged / converged) per layer at a matched step.

    Uses ``step`` if both runs recorded it, else the latest common step before it.
    """

    def index(rows):
        return {(r["step"], r["block"], r["layer"]): r["y_norm"] for r in rows}

    d_idx, c_idx = index(diverged_tel), index(converged_tel)
    common = sorted({k[0] for k in d_idx} & {k[0] for k in c_idx})
    if not common:
        return None, {}
    if step not in common:
        earlier = [s for s in common if step is None or s <= step]
        step = earlier[-1] if earlier else common[0]
    blocks = sorted({k[1] for k in d_idx if k[0] == step})
    block = block if block is not None else blocks[0]
    ratios = {}
    for layer in LAYERS_OF_INTEREST:
        d, c = d_idx.get((step, block, layer)), c_idx.get((step, block, layer))
        if d is not None and c:
            ratios[layer] = d / c
    return step, ratios


def report(out_dir) -> str:
    """Summarize a run/sweep directory into ``report.txt`` and return the text."""
    lines = ["stability sweep report", "=" * 22, ""]
    verdict_files = []
    top = os.path.join(out_dir, "verdicts.csv")
    if os.path.exists(top):
        verdict_files.append(top)
    else:
        runs = os.path.join(out_dir, "runs")
        if os.path.isdir(runs):
            for name in sorted(os.listdir(runs)):
                p = os.path.join(runs, name, "verdict.csv")
                if os.path.exists(p):
                    verdict_files.append(p)
    rows = [r for p in verdict_files for r in read_verdicts(p)]
    if not rows:
        lines.append("no runs")
    else:
        lrs = tuple(sorted({r[2] for r in rows}))
        kinds = tuple(dict.fromkeys(r[1] for r in rows))
        cells = {(r[1], r[2]): r[3] for r in rows}
        ids = {(r[1], r[2]): r[0] for r in rows}
        res = SweepResult(lrs, kinds, cells, {}, ids)
        lines += [f"runs: {len(rows)}", "", "convergence matrix (✓ converged, x diverged)", res.table(), ""]
        lines.append("per-run verdicts")
        for run_id, kind, lr, v in rows:
            extra = f" at step {v.divergence_step} ({v.reason})" if v.diverged else ""
            lines.append(f"  {run_id}: {v.status}{extra}")
        lines.append("")
        missing = [f"{k}@{lr:g}" for k in kinds for lr in lrs if (k, lr) not in cells]
        if missing:
            lines += ["incomplete cells: " + ", ".join(missing), ""]
        flagged = res.non_monotone()
        lines.append("non-monotone rows: " + (", ".join(flagged) if flagged else "none"))
        order = stability_ordering(res)
        lines.append("max converging LR: " + ", ".join(f"{k}={v if v is None else f'{v:.3g}'}" for k, v in order["max_converging_lr"].items()))
        for key, val in order.items():
            if key != "max_converging_lr":
                lines.append(f"  {key}: {val}")
        lines.append("")
        lines += _norm_highlights(out_dir, res)
    demo = os.path.join(out_dir, "softmax_demo.csv")
    if os.path.exists(demo):
        lines += ["", "softmax saturation table", open(demo, encoding="utf-8").read().rstrip()]
    text = "\n".join(lines) + "\n"
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    return text


def _norm_highlights(out_dir, res: SweepResult):
    lines = ["norm growth (diverged / converged y_norm at matched step)"]
    any_pair = False
    for kind in res.variants:
        conv = [lr for lr in res.learning_rates if (v := res.cells.get((kind, lr))) and not v.diverged]
        div = [lr for lr in res.learning_rates if (v := res.cells.get((kind, lr))) and v.diverged]
        if not conv or not div:
            continue
        c_lr, d_lr = max(conv), min(div)
        c_path = os.path.join(out_dir, "runs", res.run_ids[(kind, c_lr)], "telemetry.csv")
        d_path = os.path.join(out_dir, "runs", res.run_ids[(kind, d_lr)], "telemetry.csv")
        if not (os.path.exists(c_path) and os.path.exists(d_path)):
            continue
        step, ratios = norm_ratio_at(read_telemetry(d_path), read_telemetry(c_path), res.cells[(kind, d_lr)].divergence_step)
        if ratios:
            any_pair = True
            body = ", ".join(f"{k} {v:.2f}x" for k, v in ratios.items())
            lines.append(f"  {kind}: lr {d_lr:.3g} vs {c_lr:.3g} at step {step}: {body}")
    if not any_pair:
        lines.append("  (no diverged/converged pair)")
    return lines


def run_demo(out_dir, magnitudes=(1, 10, 40), n=16, seed=None, capping=10.0):
    from stablab.telemetry import DEMO_SEED

    rows = softmax_saturation_demo(magnitudes, n=n, seed=DEMO_SEED if seed is None else seed, capping=capping)
    os.makedirs(out_dir, exist_ok=True)
    write_demo_csv(rows, os.path.join(out_dir, "softmax_demo.csv"))
    return rows
