"""Tiny causal language model assembled from stability-variant blocks.

Token embedding -> N blocks -> final layer norm -> untied output projection.
"""

from __future__ import annotations

import dataclasses
import math
import os
from collections import OrderedDict

import numpy as np

from stablab.attention import AttentionConfig, LayerNormParams, LinearLayer, attention_forward
from stablab.stability import ConfigError, StabilityVariant, layer_scale_apply
from stablab.tensor import Tensor, cross_entropy, embedding, linear, squared_relu

CHECKPOINT_MAGIC = "# stablab checkpoint v1"


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    seq_len: int = 128
    hidden: int = 128
    layers: int = 4
    heads: int = 4
    variant: StabilityVariant = StabilityVariant()
    seed: int = 0
    ff_mult: int = 4
    rope_base: float = 10000.0
    init_std: float = 0.02
    zero_init_residual: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} must be divisible by heads {self.heads}")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")
        if self.layers < 1 or self.vocab_size < 2:
            raise ConfigError("need at least one layer and a vocabulary of >= 2 tokens")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if isinstance(self.variant, str):
            object.__setattr__(self, "variant", StabilityVariant(self.variant))

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.hidden, self.heads, rope_base=self.rope_base)


class TransformerBlock:
    """One pre-LN block whose LN sites and mechanisms follow ``variant``."""

    def __init__(self, cfg: ModelConfig, variant: StabilityVariant, rng: np.random.Generator, index=0):
        self.cfg = cfg
        self.variant = variant
        self.index = index
        self.attn_cfg = cfg.attention
        dt = np.dtype(cfg.dtype)
        d, hd = cfg.hidden, self.attn_cfg.head_dim
        ff = cfg.ff_mult * d
        std = cfg.init_std
        out_std = 0.0 if cfg.zero_init_residual else std / math.sqrt(2 * cfg.layers)

        def weight(out_dim, in_dim, s, label):
            w = rng.standard_normal((out_dim, in_dim)) * s
            return Tensor(w.astype(dt), requires_grad=True, name=f"blocks.{index}.{label}.weight")

        reparam = variant.sigma_reparam
        self.qkv = LinearLayer(weight(3 * d, d, std, "qkv"), "QKV", reparam)
        self.proj = LinearLayer(weight(d, d, out_std, "proj"), "Proj", reparam)
        self.fc1 = LinearLayer(weight(ff, d, std, "fc1"), "FC1", reparam)
        self.fc2 = LinearLayer(weight(d, ff, out_std, "fc2"), "FC2", reparam)

        widths = {"ln_attn": d, "ln_q": hd, "ln_k": hd, "ln_qkv": 3 * d, "ln_proj": d, "ln_ff": d, "ln_fc2": d}
        self.ln = {
            site: LayerNormParams.create(widths[site], dt, name=f"blocks.{index}.{site}")
            for site in sorted(variant.ln_sites)
        }
        self.layer_scale = {}
        if variant.layer_scale:
            for branch in ("attn", "ff"):
                self.layer_scale[branch] = Tensor(
                    np.full(d, variant.layerscale_init, dtype=dt),
                    requires_grad=True,
                    name=f"blocks.{index}.ls_{branch}",
                )

    @property
    def linears(self):
        return (self.qkv, self.proj, self.fc1, self.fc2)

    def named_parameters(self):
        params = OrderedDict()
        for lin in self.linears:
            params[lin.weight.name] = lin.weight
            if lin.reparam_gamma is not None:
                params[f"blocks.{self.index}.{lin.name.lower()}.gamma"] = lin.reparam_gamma
        for site, ln in self.ln.items():
            params[ln.gain.name] = ln.gain
            params[ln.bias.name] = ln.bias
        for t in self.layer_scale.values():
            params[t.name] = t
        return params

    def feed_forward(self, x: Tensor, tap=None) -> Tensor:
        sites = self.variant.ln_sites
        h = self.ln["ln_ff"](x) if "ln_ff" in sites else x
        y = self.fc2(squared_relu(self.fc1(h, tap)), tap)
        if "ln_fc2" in sites:
            y = self.ln["ln_fc2"](y)
        if self.variant.layer_scale:
            y = layer_scale_apply(y, self.layer_scale["ff"])
        return y

    def __call__(self, x: Tensor, tap=None) -> Tensor:
        x = x + attention_forward(x, self, tap=tap)
        return x + self.feed_forward(x, tap)


class Model:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = np.dtype(cfg.dtype)
        d = cfg.hidden
        self.wte = Tensor(
            (rng.standard_normal((cfg.vocab_size, d)) * cfg.init_std).astype(dt), requires_grad=True, name="wte"
        )
        self.blocks = [TransformerBlock(cfg, cfg.variant, rng, index=i) for i in range(cfg.layers)]
        self.ln_f = LayerNormParams.create(d, dt, name="ln_f")
        self.head = Tensor(
            (rng.standard_normal((cfg.vocab_size, d)) * cfg.init_std).astype(dt), requires_grad=True, name="head"
        )

    def named_parameters(self):
        params = OrderedDict(wte=self.wte)
        for blk in self.blocks:
            params.update(blk.named_parameters())
        params["ln_f.gain"] = self.ln_f.gain
        params["ln_f.bias"] = self.ln_f.bias
        params["head"] = self.head
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def no_decay_names(self):
        """LN affine params, layer-scale vectors and reparam gammas."""
        return {
            n
            for n in self.named_parameters()
            if n.endswith((".gain", ".bias", ".gamma")) or ".ls_" in n
        }

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_sigma_updates(self, enabled: bool):
        for blk in self.blocks:
            for lin in blk.linears:
                lin.update_sigma = enabled

    def __call__(self, ids, taps=None) -> Tensor:
        x = embedding(self.wte, ids)
        for blk in self.blocks:
            x = blk(x, taps.get(blk.index) if taps else None)
        x = self.ln_f(x)
        return linear(x, self.head)


def init_params(cfg: ModelConfig) -> Model:
    """Deterministic initialization from ``cfg.seed``.

    Normal(0, init_std) for embeddings, head, QKV and FC1; Proj and FC2 use
    init_std / sqrt(2 * layers) (or zeros with ``zero_init_residual``). LN gains
    start at 1 and biases at 0.
    """
    return Model(cfg)


def forward_loss(model: Model, tokens, taps=None, reduction="mean"):
    """Next-token cross-entropy for ``tokens`` (batch, seq + 1).

    Returns ``(loss, logits)``; logits cover the first ``seq`` positions.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise ValueError("tokens must be a (batch, seq+1) index matrix with seq >= 1")
    if tokens.min() < 0 or tokens.max() >= model.cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {model.cfg.vocab_size})")
    logits = model(tokens[:, :-1], taps)
    loss = cross_entropy(logits, tokens[:, 1:], reduction=reduction)
    return loss, logits


# -- checkpoints ---------------------------------------------------------------
def save_checkpoint(model: Model, directory) -> None:
    """Write ``params.bin`` (raw little-endian arrays) and ``manifest.txt``."""
    os.makedirs(directory, exist_ok=True)
    lines = [CHECKPOINT_MAGIC]
    offset = 0
    with open(os.path.join(directory, "params.bin"), "wb") as fh:
        for name, p in model.named_parameters().items():
            raw = np.ascontiguousarray(p.data, dtype=p.dtype.newbyteorder("<")).tobytes()
            fh.write(raw)
            shape = ",".join(str(n) for n in p.shape)
            lines.append(f"{name}\t{p.dtype.name}\t{shape}\t{offset}")
            offset += len(raw)
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(directory):
    with open(os.path.join(directory, "manifest.txt"), encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{directory}: not a stablab checkpoint")
    entries = []
    for line in lines[1:]:
        if not line.strip():
            continue
        name, dtype, shape, offset = line.split("\t")
        dims = tuple(int(n) for n in shape.split(",")) if shape else ()
        entries.append((name, np.dtype(dtype), dims, int(offset)))
    return entries


def load_checkpoint(model: Model, directory) -> Model:
    """Load parameters saved by :func:`save_checkpoint` into ``model`` in place."""
    params = model.named_parameters()
    entries = read_manifest(directory)
    missing = set(params) - {e[0] for e in entries}
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
    blob = np.fromfile(os.path.join(directory, "params.bin"), dtype=np.uint8)
    for name, dtype, shape, offset in entries:
        if name not in params:
            raise ValueError(f"checkpoint has unknown parameter {name!r}")
        p = params[name]
        if tuple(p.shape) != shape:
            raise ValueError(f"{name}: shape {shape} != model shape {p.shape}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        arr = blob[offset : offset + nbytes].view(dtype.newbyteorder("<")).reshape(shape)
        p.data = arr.astype(p.dtype)
    return model
