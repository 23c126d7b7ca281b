"""Causal multi-head self-attention with rotary position embeddings."""

from __future__ import annotations

import dataclasses
import functools
import math

import numpy as np

from stablab.stability import ConfigError, StabilityVariant, attention_weights, layer_scale_apply, sigma_reparam_weight
from stablab.tensor import Tensor, identity, layer_norm, linear, matmul, mul, record, accumulate, spectral_norm

LN_EPS = 1e-5
MASK_VALUE = -1e9
LAYER_NAMES = ("QKV", "Proj", "FC1", "FC2")


@dataclasses.dataclass(frozen=True)
class AttentionConfig:
    hidden_size: int
    num_heads: int
    rope_base: float = 10000.0
    causal: bool = True
    rotary: bool = True

    def __post_init__(self):
        if self.num_heads < 1 or self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        if self.rotary and self.head_dim % 2:
            raise ConfigError(f"rotary embeddings need an even head_dim, got {self.head_dim}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads


@dataclasses.dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def create(cls, dim, dtype=np.float32, name=""):
        return cls(
            Tensor(np.ones(dim, dtype=dtype), requires_grad=True, name=f"{name}.gain"),
            Tensor(np.zeros(dim, dtype=dtype), requires_grad=True, name=f"{name}.bias"),
        )

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, LN_EPS)


class LinearLayer:
    """Bias-free linear layer ``y = x @ W.T`` with ``W`` of shape (out, in).

    With ``reparam=True`` the applied weight is ``gamma / sigma(W) * W``, where
    ``gamma`` is a learnable scalar starting at 1 and ``sigma`` is tracked by a
    power iteration refreshed on every forward while ``update_sigma`` is set,
    warm-started from the previous vectors.
    """

    def __init__(self, weight: Tensor, name: str, reparam=False, sigma_iters=16, sigma_tol=1e-5):
        if weight.ndim != 2:
            raise ConfigError("LinearLayer weight must be 2-D")
        self.weight = weight
        self.name = name
        self.reparam_gamma = (
            Tensor(np.ones((), dtype=weight.dtype), requires_grad=True, name=f"{name}.gamma") if reparam else None
        )
        self.sigma_iters = sigma_iters
        self.sigma_tol = sigma_tol
        self.update_sigma = True
        self._u = None
        self._v = None

    def effective_weight(self) -> Tensor:
        if self.reparam_gamma is None:
            return self.weight
        if self.update_sigma or self._v is None:
            # 16 rounds suffice once warm; the first estimate runs to tolerance
            iters = self.sigma_iters if self._v is not None else None
            s, u, v = spectral_norm(self.weight, iters=iters, tol=self.sigma_tol, v0=self._v, return_vectors=True)
            if s == 0.0:
                raise ValueError(f"{self.name}: spectral reparameterization of an all-zero weight")
            if np.isfinite(s):
                self._u, self._v = u, v
        return sigma_reparam_weight(self.weight, self.reparam_gamma, self._u, self._v)

    def __call__(self, x: Tensor, tap: dict | None = None) -> Tensor:
        w = self.effective_weight()
        x_in = identity(x) if tap is not None else x
        y = linear(x_in, w)
        if tap is not None:
            tap[self.name] = (w, x_in, y)
        return y


# -- rotary -------------------------------------------------------------------
@functools.lru_cache(maxsize=64)
def _rotary_tables(positions: tuple, half: int, base: float, dtype_str: str):
    head_dim = 2 * half
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype_str), np.sin(angles).astype(dtype_str)


def apply_rotary(t: Tensor, positions=None, base=10000.0) -> Tensor:
    """Rotate consecutive feature pairs of ``t`` (..., seq, head_dim) by position.

    Pair ``i`` at position ``p`` turns by ``p * base ** (-2 i / head_dim)``.
    """
    seq, hd = t.shape[-2], t.shape[-1]
    if hd % 2:
        raise ConfigError(f"rotary embeddings need an even head_dim, got {hd}")
    if positions is None:
        positions = range(seq)
    positions = tuple(int(p) for p in positions)
    if len(positions) != seq:
        raise ValueError("positions must match the sequence axis")
    cos, sin = _rotary_tables(positions, hd // 2, float(base), t.dtype.str)
    x = t.data
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        dx = np.empty_like(g)
        dx[..., 0::2] = ge * cos + go * sin
        dx[..., 1::2] = go * cos - ge * sin
        accumulate(t, dx)

    return record(out, (t,), backward)


# -- logits and the attention sublayer ------------------------------------------
@functools.lru_cache(maxsize=32)
def causal_mask(seq: int, dtype_str: str = "<f4") -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, a large negative above."""
    m = np.triu(np.full((seq, seq), MASK_VALUE, dtype=np.float64), k=1).astype(dtype_str)
    m.setflags(write=False)
    return m


def split_heads(t: Tensor, num_heads: int) -> Tensor:
    """(B, T, H*hd) -> (B, H, T, hd)."""
    b, s, d = t.shape
    return t.reshape(b, s, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def merge_heads(t: Tensor) -> Tensor:
    b, h, s, hd = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, s, h * hd)


def qk_logits(q: Tensor, k: Tensor, cfg: AttentionConfig, qk_ln=None, positions=None) -> Tensor:
    """Scaled dot-product logits from head-split queries and keys.

    ``qk_ln`` is an optional ``(ln_q, ln_k)`` pair applied per head over
    head_dim before the rotary rotation.
    """
    if qk_ln is not None:
        ln_q, ln_k = qk_ln
        q, k = ln_q(q), ln_k(k)
    if cfg.rotary:
        q = apply_rotary(q, positions, cfg.rope_base)
        k = apply_rotary(k, positions, cfg.rope_base)
    return mul(matmul(q, k.swapaxes(-1, -2)), 1.0 / math.sqrt(q.shape[-1]))


def attention_logits(x: Tensor, wq: LinearLayer, wk: LinearLayer, cfg: AttentionConfig, qk_ln=None, positions=None) -> Tensor:
    """Logits (B, H, T, T) for separate query and key projections of ``x`` (B, T, D)."""
    q = split_heads(wq(x), cfg.num_heads)
    k = split_heads(wk(x), cfg.num_heads)
    return qk_logits(q, k, cfg, qk_ln, positions)


def attention_forward(x: Tensor, block, variant: StabilityVariant | None = None, tap: dict | None = None) -> Tensor:
    """Attention branch of ``block`` applied to ``x`` (B, T, D); residual not added.

    Covers every LN placement: pre-LN before QKV, LN on the fused QKV output,
    per-head Q/K LN, and LN after Proj, plus the variant's softmax flavour and
    optional layer scaling.
    """
    variant = variant or block.variant
    cfg = block.attn_cfg
    sites = variant.ln_sites
    b, s, d = x.shape
    h = block.ln["ln_attn"](x) if "ln_attn" in sites else x
    qkv = block.qkv(h, tap)
    if "ln_qkv" in sites:
        qkv = block.ln["ln_qkv"](qkv)
    heads = qkv.reshape(b, s, 3, cfg.num_heads, cfg.head_dim).transpose(2, 0, 3, 1, 4)
    q, k, v = heads[0], heads[1], heads[2]
    qk_ln = (block.ln["ln_q"], block.ln["ln_k"]) if "ln_q" in sites else None
    logits = qk_logits(q, k, cfg, qk_ln)
    mask = causal_mask(s, logits.dtype.str) if cfg.causal else None
    weights = attention_weights(logits, variant, mask)
    if tap is not None:
        tap["attn_weights"] = weights
    y = block.proj(merge_heads(matmul(weights, v)), tap)
    if "ln_proj" in sites:
        y = block.ln["ln_proj"](y)
    if variant.layer_scale:
        y = layer_scale_apply(y, block.layer_scale["attn"])
    return y
