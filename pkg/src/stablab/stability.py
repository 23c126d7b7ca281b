"""Catalog of training-stability mechanisms.

Each :class:`StabilityVariant` selects a softmax flavour, a layer-norm
placement and optional weight/branch transforms for a transformer block.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from stablab.tensor import (
    Tensor,
    clip,
    mul,
    softmax,
    spectral_norm,
    tanh,
)

VARIANT_KINDS = (
    "baseline",
    "soft_temp",
    "soft_cap",
    "soft_clip",
    "sigma_reparam",
    "layer_scale",
    "qk_norm",
    "qk_norm_cap",
    "qkv_norm",
    "qk_fc_norm",
)

# Layer-norm sites inside one block:
#   ln_attn  before QKV           ln_q / ln_k  on per-head queries / keys
#   ln_qkv   on the fused QKV out  ln_proj      after Proj (inside the branch)
#   ln_ff    before FC1           ln_fc2       after FC2 (inside the branch)
_PRE_LN = frozenset({"ln_attn", "ln_ff"})
_QK_LN = _PRE_LN | {"ln_q", "ln_k"}

LN_SITES = {
    "baseline": _PRE_LN,
    "soft_temp": _PRE_LN,
    "soft_cap": _PRE_LN,
    "soft_clip": _PRE_LN,
    "sigma_reparam": _PRE_LN,
    "layer_scale": _PRE_LN,
    "qk_norm": _QK_LN,
    "qk_norm_cap": _QK_LN,
    "qkv_norm": frozenset({"ln_qkv", "ln_ff"}),
    "qk_fc_norm": _QK_LN | {"ln_proj", "ln_fc2"},
}

SOFTMAX_FLAVOR = {
    "soft_temp": "temp",
    "soft_cap": "cap",
    "qk_norm_cap": "cap",
    "soft_clip": "clip",
}


class ConfigError(ValueError):
    """Invalid model or variant configuration."""


@dataclasses.dataclass(frozen=True)
class StabilityVariant:
    kind: str = "baseline"
    beta: float = 0.5
    capping: float = 50.0
    zeta: float = 1.03
    gamma_clip: float = -0.03
    layerscale_init: float = 0.1

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ConfigError(f"unknown stability variant {self.kind!r}; choose from {', '.join(VARIANT_KINDS)}")
        if not self.beta > 0:
            raise ConfigError("beta must be > 0")
        if not self.capping > 0:
            raise ConfigError("capping must be > 0")
        if self.zeta < 1:
            raise ConfigError("zeta must be >= 1")
        if self.gamma_clip > 0:
            raise ConfigError("gamma_clip must be <= 0")

    @property
    def ln_sites(self) -> frozenset:
        return LN_SITES[self.kind]

    @property
    def softmax_flavor(self) -> str:
        return SOFTMAX_FLAVOR.get(self.kind, "plain")

    @property
    def sigma_reparam(self) -> bool:
        return self.kind == "sigma_reparam"

    @property
    def layer_scale(self) -> bool:
        return self.kind == "layer_scale"


def make_variant(kind, **overrides) -> StabilityVariant:
    return StabilityVariant(kind=kind, **overrides)


# -- softmax flavours -------------------------------------------------------
def _masked(z, mask):
    return z if mask is None else z + mask


def softmax_temp(logit: Tensor, beta: float, mask=None) -> Tensor:
    """``softmax(beta * logit)``."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    return softmax(_masked(mul(logit, beta), mask))


def cap_logits(logit: Tensor, capping: float) -> Tensor:
    """``tanh(logit / capping) * capping``; bounded in (-capping, capping)."""
    if not capping > 0:
        raise ValueError("capping must be > 0")
    return mul(tanh(mul(logit, 1.0 / capping)), capping)


def capped_softmax(logit: Tensor, capping: float, mask=None) -> Tensor:
    """Softmax of tanh-capped logits. The mask is added after capping."""
    return softmax(_masked(cap_logits(logit, capping), mask))


def clipped_softmax(logit: Tensor, zeta: float, gamma: float, mask=None) -> Tensor:
    """``clip((zeta - gamma) * softmax(logit) + gamma, 0, 1)``."""
    if zeta < 1 or gamma > 0:
        raise ValueError("clipped_softmax needs zeta >= 1 and gamma <= 0")
    p = softmax(_masked(logit, mask))
    return clip(mul(p, zeta - gamma) + gamma, 0.0, 1.0)


def attention_weights(logit: Tensor, variant: StabilityVariant, mask=None) -> Tensor:
    """Apply the variant's softmax flavour to raw attention logits."""
    flavor = variant.softmax_flavor
    if flavor == "temp":
        return softmax_temp(logit, variant.beta, mask)
    if flavor == "cap":
        return capped_softmax(logit, variant.capping, mask)
    if flavor == "clip":
        return clipped_softmax(logit, variant.zeta, variant.gamma_clip, mask)
    return softmax(_masked(logit, mask))


# -- weight and branch transforms ---------------------------------------------
def sigma_reparam_weight(w: Tensor, gamma, u=None, v=None, iters=None, tol=1e-5) -> Tensor:
    """Scale ``w`` by ``gamma / sigma(w)``.

    ``sigma`` is written as ``u^T w v`` with the power-iteration vectors held
    constant, so gradients reach both ``w`` and ``gamma``. Passing converged
    ``u``/``v`` skips the power iteration.
    """
    if not isinstance(gamma, Tensor):
        gamma = Tensor(np.asarray(gamma, dtype=w.dtype))
    if u is None or v is None:
        s, u, v = spectral_norm(w, iters=iters, tol=tol, v0=v, return_vectors=True)
        if s == 0.0:
            raise ValueError("sigma_reparam_weight: weight matrix is all zeros")
    uv = np.outer(u, v).astype(w.dtype)
    sigma = mul(w, uv).sum()
    if float(sigma.data) == 0.0:
        raise ValueError("sigma_reparam_weight: spectral norm estimate is zero")
    return mul(w, gamma / sigma)


def layer_scale_apply(branch_out: Tensor, scale: Tensor) -> Tensor:
    """Per-channel scaling of a residual branch output (last axis)."""
    if scale.shape != (branch_out.shape[-1],):
        raise ValueError(f"layer-scale vector must have shape ({branch_out.shape[-1]},)")
    return mul(branch_out, scale)


def assemble_block(cfg, variant: StabilityVariant | None = None, rng=None, index=0):
    """Build one transformer block for ``variant`` (defaults to ``cfg.variant``)."""
    from stablab.model import TransformerBlock

    variant = variant or cfg.variant
    if not isinstance(variant, StabilityVariant):
        raise ConfigError(f"not a StabilityVariant: {variant!r}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return TransformerBlock(cfg, variant, rng, index=index)
