"""Shared configs and small utilities for the test suite."""

import contextlib
import dataclasses

import numpy as np

from stablab.config import DataConfig, OptimConfig, RunConfig, TelemetryConfig
from stablab.model import ModelConfig

# Filled by the acceptance tests, printed by conftest at the end of the session.
ACCEPTANCE_LOG = []

TINY = ModelConfig(vocab_size=11, seq_len=4, hidden=8, layers=1, heads=2)
SMALL = ModelConfig(vocab_size=64, seq_len=16, hidden=32, layers=2, heads=2)
# Acceptance shape: same as configs/quick.toml.
QUICK = ModelConfig(vocab_size=512, seq_len=64, hidden=128, layers=2, heads=2)


def small_run(steps=30, lr=1e-2, variant="baseline", **kw):
    cfg = RunConfig(
        model=SMALL,
        data=DataConfig(batch_size=4),
        telemetry=TelemetryConfig(blocks="all"),
        steps=steps,
        eval_batches=0,
        **kw,
    )
    return cfg.with_(variant=variant, lr=lr)


def quick_run(steps=300, lr=1e-2, variant="baseline", seed=0, **kw):
    cfg = RunConfig(model=QUICK, data=DataConfig(batch_size=8), optim=OptimConfig(), steps=steps, seed=seed, **kw)
    return cfg.with_(variant=variant, lr=lr)


def f64(cfg: ModelConfig, **kw) -> ModelConfig:
    return dataclasses.replace(cfg, dtype="float64", **kw)


def tokens(cfg: ModelConfig, batch=2, seed=0):
    return np.random.default_rng(seed).integers(0, cfg.vocab_size, size=(batch, cfg.seq_len + 1))


@contextlib.contextmanager
def criterion(number, title):
    """Record PASS/FAIL for one acceptance criterion; failures still raise."""
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        if isinstance(exc, AssertionError):
            ACCEPTANCE_LOG.append((number, title, "FAIL", detail.get("msg", "") or str(exc).splitlines()[0]))
        else:
            ACCEPTANCE_LOG.append((number, title, "ERROR", f"{type(exc).__name__}: {exc}"))
        raise
    ACCEPTANCE_LOG.append((number, title, detail.get("status", "PASS"), detail.get("msg", "")))
