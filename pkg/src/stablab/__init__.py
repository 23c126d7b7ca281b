"""Desk-scale transformer training-stability lab.

Stability variants plug into one transformer block; every run records
per-layer norm telemetry and gets a converged/diverged verdict; sweeps lay
those verdicts out over a learning-rate grid.
"""

from stablab.config import RunConfig, SweepPlan, load_config
from stablab.model import ModelConfig, forward_loss, init_params
from stablab.stability import VARIANT_KINDS, ConfigError, StabilityVariant
from stablab.telemetry import RunVerdict, TelemetryRecord, classify_run

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ModelConfig",
    "RunConfig",
    "RunVerdict",
    "StabilityVariant",
    "SweepPlan",
    "TelemetryRecord",
    "VARIANT_KINDS",
    "classify_run",
    "forward_loss",
    "init_params",
    "load_config",
]
