"""Run configuration: dataclasses plus a TOML loader.

A config file has optional tables ``[model]``, ``[variant]``, ``[optim]``,
``[data]``, ``[telemetry]``, ``[run]`` and ``[sweep]``; every key defaults to
the value documented on the dataclass below. See ``configs/desk.toml``.
"""

from __future__ import annotations

import dataclasses
import os

from stablab.data import BatchSource
from stablab.model import ModelConfig
from stablab.stability import ConfigError, StabilityVariant
from stablab.telemetry import DivergenceRules

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclasses.dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    warmup_frac: float = 0.01
    min_lr_ratio: float = 0.1


@dataclasses.dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic_markov"
    batch_size: int = 16
    split_fraction: float = 0.1
    corpus_path: str | None = None
    branching: int = 4
    concentration: float = 0.5


@dataclasses.dataclass(frozen=True)
class TelemetryConfig:
    blocks: tuple = (1,)
    stride: int = 1
    window: int = 20
    explosion_factor: float = 2.0
    norm_factor: float = 50.0
    norm_baseline_step: int = 100
    min_improvement: float = 0.2

    @property
    def rules(self) -> DivergenceRules:
        return DivergenceRules(
            self.window, self.explosion_factor, self.norm_factor, self.norm_baseline_step, self.min_improvement
        )


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    optim: OptimConfig = OptimConfig()
    data: DataConfig = DataConfig()
    telemetry: TelemetryConfig = TelemetryConfig()
    steps: int = 1500
    seed: int = 0
    run_id: str | None = None
    abort_on_divergence: bool = True
    eval_every: int = 0
    eval_batches: int = 4

    def __post_init__(self):
        if self.model.seed != self.seed:
            object.__setattr__(self, "model", dataclasses.replace(self.model, seed=self.seed))

    @property
    def variant(self) -> StabilityVariant:
        return self.model.variant

    @property
    def name(self) -> str:
        return self.run_id or f"{self.variant.kind}_lr{self.optim.lr:g}_s{self.seed}"

    def source(self) -> BatchSource:
        return BatchSource(
            kind=self.data.kind,
            vocab_size=self.model.vocab_size,
            seq_len=self.model.seq_len,
            batch_size=self.data.batch_size,
            seed=self.seed,
            split_fraction=self.data.split_fraction,
            corpus_path=self.data.corpus_path,
            branching=self.data.branching,
            concentration=self.data.concentration,
        )

    def capture_blocks(self):
        if self.telemetry.blocks == "all":
            return tuple(range(self.model.layers))
        picked = tuple(b for b in self.telemetry.blocks if 0 <= b < self.model.layers)
        return picked or (self.model.layers - 1,)

    def with_(self, variant=None, lr=None, steps=None, seed=None, run_id=None):
        """Copy with the usual sweep overrides applied."""
        cfg = self
        if variant is not None:
            v = variant if isinstance(variant, StabilityVariant) else dataclasses.replace(self.variant, kind=variant)
            cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, variant=v))
        if lr is not None:
            cfg = dataclasses.replace(cfg, optim=dataclasses.replace(cfg.optim, lr=float(lr)))
        if steps is not None:
            cfg = dataclasses.replace(cfg, steps=int(steps))
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=int(seed))
        if run_id is not None:
            cfg = dataclasses.replace(cfg, run_id=run_id)
        return cfg


@dataclasses.dataclass(frozen=True)
class SweepPlan:
    learning_rates: tuple
    variants: tuple
    steps_per_run: int = 1500
    seed: int = 0
    output_dir: str = "runs/sweep"

    def __post_init__(self):
        if not self.learning_rates or not self.variants:
            raise ConfigError("a sweep needs at least one learning rate and one variant")
        object.__setattr__(self, "learning_rates", tuple(float(x) for x in self.learning_rates))
        object.__setattr__(
            self,
            "variants",
            tuple(v if isinstance(v, StabilityVariant) else StabilityVariant(v) for v in self.variants),
        )


def _build(cls, table, section):
    if table is None:
        return cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    return cls(**table)


def from_dict(doc: dict):
    """Build ``(RunConfig, SweepPlan | None)`` from a parsed config document."""
    known = {"model", "variant", "optim", "data", "telemetry", "run", "sweep"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    variant = _build(StabilityVariant, doc.get("variant"), "variant")
    model_tbl = dict(doc.get("model", {}))
    if "variant" in model_tbl:
        raise ConfigError("set the variant in the [variant] table")
    model = _build(ModelConfig, {**model_tbl, "variant": variant}, "model")
    tel_tbl = dict(doc.get("telemetry", {}))
    if isinstance(tel_tbl.get("blocks"), list):
        tel_tbl["blocks"] = tuple(tel_tbl["blocks"])
    run_tbl = dict(doc.get("run", {}))
    run = _build(
        RunConfig,
        {
            **run_tbl,
            "model": model,
            "optim": _build(OptimConfig, doc.get("optim"), "optim"),
            "data": _build(DataConfig, doc.get("data"), "data"),
            "telemetry": _build(TelemetryConfig, tel_tbl, "telemetry"),
        },
        "run",
    )
    plan = None
    if "sweep" in doc:
        sw = dict(doc["sweep"])
        sw.setdefault("steps_per_run", run.steps)
        sw.setdefault("seed", run.seed)
        sw.setdefault("variants", [variant.kind])
        sw["variants"] = [dataclasses.replace(variant, kind=k) for k in sw["variants"]]
        plan = _build(SweepPlan, sw, "sweep")
    return run, plan


def load_config(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        return from_dict(tomllib.load(fh))
