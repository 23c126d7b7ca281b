import math

import numpy as np
import pytest

from stablab.attention import (
    MASK_VALUE,
    AttentionConfig,
    LayerNormParams,
    apply_rotary,
    attention_forward,
    causal_mask,
    merge_heads,
    qk_logits,
    split_heads,
)
from stablab.model import ModelConfig, TransformerBlock, forward_loss, init_params
from stablab.stability import ConfigError, StabilityVariant
from stablab.tensor import Tensor, finite_diff_grad

from helpers import f64, tokens

rng = np.random.default_rng(7)


def test_config_validation():
    with pytest.raises(ConfigError):
        AttentionConfig(10, 3)
    with pytest.raises(ConfigError):
        AttentionConfig(6, 2)  # odd head_dim with rotary on
    assert AttentionConfig(6, 2, rotary=False).head_dim == 3


def test_rotary_preserves_norm_and_is_identity_at_zero():
    t = Tensor(rng.standard_normal((2, 5, 8)))
    r = apply_rotary(t).data
    np.testing.assert_allclose(np.linalg.norm(r, axis=-1), np.linalg.norm(t.data, axis=-1), rtol=1e-12)
    np.testing.assert_allclose(r[:, 0], t.data[:, 0])


def test_rotary_pairs_are_consecutive():
    t = np.zeros((1, 2, 4))
    t[0, 1, 0] = 1.0  # first pair at position 1 turns by exactly 1 radian
    r = apply_rotary(Tensor(t)).data
    np.testing.assert_allclose(r[0, 1], [math.cos(1), math.sin(1), 0, 0], atol=1e-12)


def test_rotary_logits_depend_on_relative_position_only():
    q, k = rng.standard_normal(8), rng.standard_normal(8)

    def dot(pq, pk):
        qq = apply_rotary(Tensor(q[None, :]), positions=[pq]).data[0]
        kk = apply_rotary(Tensor(k[None, :]), positions=[pk]).data[0]
        return qq @ kk

    assert dot(3, 1) == pytest.approx(dot(12, 10), rel=1e-10)
    assert dot(5, 5) == pytest.approx(q @ k, rel=1e-10)


def test_rotary_gradient():
    t = Tensor(rng.standard_normal((1, 3, 4)), requires_grad=True)
    probe = rng.standard_normal((1, 3, 4))
    f = lambda x: (apply_rotary(x) * probe).sum()
    f(t).backward()
    np.testing.assert_allclose(t.grad, finite_diff_grad(f, t, h=1e-6), atol=1e-8)


def test_causal_mask_shape_and_read_only():
    m = causal_mask(4)
    assert m[0, 1] == np.float32(MASK_VALUE) and m[1, 0] == 0 and np.all(np.diag(m) == 0)
    with pytest.raises(ValueError):
        m[0, 0] = 1.0


def test_split_merge_round_trip():
    x = Tensor(rng.standard_normal((2, 3, 8)))
    assert split_heads(x, 4).shape == (2, 4, 3, 2)
    np.testing.assert_array_equal(merge_heads(split_heads(x, 4)).data, x.data)


def test_qk_ln_runs_before_rotary():
    cfg = AttentionConfig(8, 2)
    q, k = Tensor(rng.standard_normal((1, 2, 3, 4)) * 5), Tensor(rng.standard_normal((1, 2, 3, 4)) * 5)
    ln = LayerNormParams.create(4, np.float64)
    got = qk_logits(q, k, cfg, (ln, ln)).data

    def norm(a):
        return (a - a.mean(-1, keepdims=True)) / np.sqrt(a.var(-1, keepdims=True) + 1e-5)

    qr = apply_rotary(Tensor(norm(q.data))).data
    kr = apply_rotary(Tensor(norm(k.data))).data
    np.testing.assert_allclose(got, qr @ kr.swapaxes(-1, -2) / 2.0, rtol=1e-10)


def _block(kind, seq=5, **kw):
    cfg = f64(ModelConfig(vocab_size=13, seq_len=seq, hidden=8, layers=1, heads=2, variant=StabilityVariant(kind)), **kw)
    return cfg, TransformerBlock(cfg, cfg.variant, np.random.default_rng(0))


@pytest.mark.parametrize("kind", ["baseline", "qk_norm", "qkv_norm", "soft_clip", "qk_fc_norm", "layer_scale"])
def test_attention_is_causal(kind):
    _, blk = _block(kind)
    x = rng.standard_normal((1, 5, 8))
    y1 = attention_forward(Tensor(x), blk).data
    x2 = x.copy()
    x2[:, 3:] += 10 * rng.standard_normal((1, 2, 8))
    y2 = attention_forward(Tensor(x2), blk).data
    np.testing.assert_allclose(y1[:, :3], y2[:, :3], atol=1e-12)
    assert not np.allclose(y1[:, 3:], y2[:, 3:])


def test_single_token_attends_to_itself():
    _, blk = _block("baseline", seq=2)
    tap = {}
    attention_forward(Tensor(rng.standard_normal((3, 1, 8))), blk, tap=tap)
    np.testing.assert_allclose(tap["attn_weights"].data, 1.0)


def test_uniform_logits_give_uniform_causal_rows():
    _, blk = _block("baseline")
    blk.qkv.weight.data[:16] = 0.0  # q = k = 0 -> every logit is 0
    tap = {}
    attention_forward(Tensor(rng.standard_normal((1, 5, 8))), blk, tap=tap)
    w = tap["attn_weights"].data[0, 0]
    expected = np.tril(np.ones((5, 5))) / np.arange(1, 6)[:, None]
    np.testing.assert_allclose(w, expected, atol=1e-12)


def test_tap_records_every_linear():
    cfg = ModelConfig(vocab_size=13, seq_len=4, hidden=8, layers=2, heads=2)
    model = init_params(cfg)
    taps = {1: {}}
    forward_loss(model, tokens(cfg), taps)
    assert set(taps[1]) == {"QKV", "Proj", "FC1", "FC2", "attn_weights"}
    w, x, y = taps[1]["QKV"]
    assert x.shape == (2, 4, 8) and y.shape == (2, 4, 24) and w is model.blocks[1].qkv.weight
