"""Per-layer norm telemetry, divergence classification and the softmax saturation table."""

from __future__ import annotations

import collections
import csv
import dataclasses
import math
from typing import Iterable

import numpy as np

from stablab.attention import LAYER_NAMES
from stablab.stability import capped_softmax
from stablab.tensor import Tensor, l2_norm, no_grad, softmax

TELEMETRY_FIELDS = (
    "run_id",
    "step",
    "block",
    "layer",
    "w_norm",
    "x_norm",
    "y_norm",
    "x_grad_norm",
    "loss",
    "lr",
    "attn_max_weight",
    "attn_entropy",
)
NONZERO_THRESHOLD = 1e-3
# Draw whose collapse pattern mirrors the classic saturation picture.
DEMO_SEED = 20


DIVERGENCE_REASONS = ("nonfinite_loss", "loss_explosion", "norm_explosion", "stalled")


class InconclusiveError(ValueError):
    """Not enough history to classify a run."""


@dataclasses.dataclass
class TelemetryRecord:
    step: int
    layer_block: int
    layer_name: str
    w_norm: float
    x_norm: float
    y_norm: float
    x_grad_norm: float
    loss: float = math.nan
    lr: float = math.nan
    attn_max_weight: float = math.nan
    attn_entropy: float = math.nan

    @property
    def flagged(self) -> bool:
        return not all(math.isfinite(v) for v in (self.w_norm, self.x_norm, self.y_norm, self.x_grad_norm))

    def row(self, run_id=""):
        return [
            run_id,
            self.step,
            self.layer_block,
            self.layer_name,
            *(_fmt(v) for v in (self.w_norm, self.x_norm, self.y_norm, self.x_grad_norm, self.loss, self.lr)),
            _fmt(self.attn_max_weight),
            _fmt(self.attn_entropy),
        ]


@dataclasses.dataclass(frozen=True)
class RunVerdict:
    status: str
    divergence_step: int | None = None
    reason: str | None = None

    def __post_init__(self):
        if self.status not in ("converged", "diverged"):
            raise ValueError(f"bad status {self.status!r}")
        if (self.status == "diverged") != (self.divergence_step is not None):
            raise ValueError("divergence_step must be set exactly when diverged")
        if self.reason not in (None,) + DIVERGENCE_REASONS:
            raise ValueError(f"bad reason {self.reason!r}")

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    @property
    def mark(self) -> str:
        return "x" if self.diverged else "✓"


CONVERGED = RunVerdict("converged")


def _fmt(v) -> str:
    return repr(float(v))


def attention_stats(weights) -> tuple[float, float]:
    """Mean row max and mean row entropy of attention weights (..., T, T).

    Rows are renormalized before the entropy so clipped-softmax rows that do not
    sum to one still give an entropy in [0, ln T].
    """
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    w = w.reshape(-1, w.shape[-1])
    if not np.all(np.isfinite(w)):
        return math.nan, math.nan
    max_w = float(w.max(axis=1).mean())
    s = w.sum(axis=1, keepdims=True)
    q = np.divide(w, s, out=np.zeros_like(w), where=s > 0)
    plogp = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    ent = float(np.clip(-plogp.sum(axis=1), 0.0, None).mean())
    return max_w, ent


def capture(tap: dict, block_index: int, step: int, loss=math.nan, lr=math.nan) -> list[TelemetryRecord]:
    """Records for QKV, Proj, FC1 and FC2 of one block, after forward+backward.

    ``tap`` is the dict a block fills during its forward pass: per layer the
    applied weight, the layer input and its output, plus ``attn_weights``.
    The input-gradient norm covers only the gradient flowing through that layer.
    """
    max_w, ent = attention_stats(tap["attn_weights"]) if "attn_weights" in tap else (math.nan, math.nan)
    records = []
    for name in LAYER_NAMES:
        if name not in tap:
            continue
        w, x, y = tap[name]
        gx = l2_norm(x.grad) if x.grad is not None else math.nan
        records.append(
            TelemetryRecord(
                step=step,
                layer_block=block_index,
                layer_name=name,
                w_norm=l2_norm(w),
                x_norm=l2_norm(x),
                y_norm=l2_norm(y),
                x_grad_norm=gx,
                loss=float(loss),
                lr=float(lr),
                attn_max_weight=max_w,
                attn_entropy=ent,
            )
        )
    return records


class TelemetryWriter:
    """Append-only CSV sink; floats are written with round-trip precision."""

    def __init__(self, path, run_id=""):
        self.path = path
        self.run_id = run_id
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(TELEMETRY_FIELDS)

    def write(self, records: Iterable[TelemetryRecord]):
        for r in records:
            self._w.writerow(r.row(self.run_id))

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_telemetry(path) -> list[dict]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rec = dict(row)
            rec["step"] = int(rec["step"])
            rec["block"] = int(rec["block"])
            for key in TELEMETRY_FIELDS[4:]:
                rec[key] = float(rec[key])
            out.append(rec)
    return out


# -- divergence classification ---------------------------------------------------
@dataclasses.dataclass(frozen=True)
class DivergenceRules:
    window: int = 20
    explosion_factor: float = 2.0
    norm_factor: float = 50.0
    norm_baseline_step: int = 100
    min_improvement: float = 0.2

    def __post_init__(self):
        if self.window < 1 or self.explosion_factor <= 1 or self.norm_factor <= 1:
            raise ValueError("window >= 1 and factors > 1 required")
        if not 0 <= self.min_improvement < 1:
            raise ValueError("min_improvement must be in [0, 1)")


class _Window:
    def __init__(self, n):
        self.values = collections.deque(maxlen=n)

    def push(self, v):
        self.values.append(v)

    @property
    def full(self):
        return len(self.values) == self.values.maxlen

    def mean(self):
        # fsum: order-independent rounding keeps verdicts bit-reproducible
        return math.fsum(self.values) / len(self.values)


class DivergenceDetector:
    """Streaming form of :func:`classify_run`; the first trigger is final.

    Losses and per-layer output norms are both smoothed over ``window`` steps.
    """

    def __init__(self, rules: DivergenceRules = DivergenceRules()):
        self.rules = rules
        self._loss = _Window(rules.window)
        self._norms: dict = {}
        self.initial_loss = math.nan
        self.best_smoothed = math.inf
        self.smoothed = math.nan
        self.norm_baseline: dict | None = None
        self.last_step = None
        self.verdict: RunVerdict | None = None

    def update(self, step, loss, y_norms: dict | None = None) -> RunVerdict | None:
        if self.verdict is not None:
            return self.verdict
        self.last_step = step
        loss = float(loss)
        if not math.isfinite(loss):
            return self._diverge(step, "nonfinite_loss")
        if math.isnan(self.initial_loss):
            self.initial_loss = loss
        self._loss.push(loss)
        if self._loss.full:
            self.smoothed = self._loss.mean()
            if self.smoothed > self.best_smoothed * self.rules.explosion_factor:
                return self._diverge(step, "loss_explosion")
            self.best_smoothed = min(self.best_smoothed, self.smoothed)
        if y_norms:
            if any(not math.isfinite(y) for y in y_norms.values()):
                return self._diverge(step, "norm_explosion")
            for key, y in y_norms.items():
                self._norms.setdefault(key, _Window(self.rules.window)).push(y)
            smoothed = {k: w.mean() for k, w in self._norms.items()}
            if self.norm_baseline is None:
                if step >= self.rules.norm_baseline_step:
                    self.norm_baseline = smoothed
            else:
                for key, y in smoothed.items():
                    base = self.norm_baseline.get(key)
                    if base and y > base * self.rules.norm_factor:
                        return self._diverge(step, "norm_explosion")
        return None

    def finish(self) -> RunVerdict:
        """Verdict at the horizon: stalled runs count as diverged."""
        if self.verdict is not None:
            return self.verdict
        if self.rules.min_improvement > 0 and self._loss.full:
            if self.smoothed > (1.0 - self.rules.min_improvement) * self.initial_loss:
                return self._diverge(self.last_step, "stalled")
        return CONVERGED

    def _diverge(self, step, reason):
        self.verdict = RunVerdict("diverged", step, reason)
        return self.verdict


def classify_run(history, norms=None, rules: DivergenceRules = DivergenceRules()) -> RunVerdict:
    """Classify a loss history ``[(step, loss), ...]`` as converged or diverged.

    Diverged when the loss is non-finite, when the ``window``-step moving
    average exceeds ``explosion_factor`` times the best moving average so far,
    when a layer's moving-average output norm exceeds ``norm_factor`` times
    its value at ``norm_baseline_step``, or (at the end of the history) when
    the moving-average loss sits less than ``min_improvement`` below the
    first recorded loss. ``norms`` maps step -> {layer key: y_norm}.
    """
    history = list(history)
    norms = norms or {}
    det = DivergenceDetector(rules)
    for step, loss in history:
        v = det.update(step, loss, norms.get(step))
        if v is not None:
            return v
    if len(history) < rules.window:
        raise InconclusiveError(f"need at least {rules.window} steps of history, got {len(history)}")
    return det.finish()


# -- softmax saturation table ------------------------------------------------------
def softmax_saturation_demo(magnitudes, n=16, seed=DEMO_SEED, capping=10.0):
    """Softmax statistics of ``m * x`` for ``x ~ U[-0.5, 0.5]^n`` at each magnitude ``m``.

    Returns rows ``{magnitude, kind, max_weight, entropy, nonzero_count}`` for
    plain and tanh-capped softmax. ``nonzero_count`` counts weights above
    ``NONZERO_THRESHOLD``.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    x = np.random.default_rng(seed).uniform(-0.5, 0.5, n)
    rows = []
    with no_grad():
        for m in magnitudes:
            logits = Tensor((m * x)[None, :], dtype=np.float64)
            for kind, p in (("plain", softmax(logits)), ("capped", capped_softmax(logits, capping))):
                w = p.data[0]
                nz = w[w > 0]
                rows.append(
                    {
                        "magnitude": float(m),
                        "kind": kind,
                        "max_weight": float(w.max()),
                        "entropy": float(-(nz * np.log(nz)).sum()),
                        "nonzero_count": int((w > NONZERO_THRESHOLD).sum()),
                    }
                )
    return rows


DEMO_FIELDS = ("magnitude", "kind", "max_weight", "entropy", "nonzero_count")


def write_demo_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=DEMO_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def demo_logits(n=16, seed=DEMO_SEED):
    return np.random.default_rng(seed).uniform(-0.5, 0.5, n)
