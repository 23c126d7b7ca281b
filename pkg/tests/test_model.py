import math

import numpy as np
import pytest

from stablab.model import ModelConfig, forward_loss, init_params, load_checkpoint, read_manifest, save_checkpoint
from stablab.stability import ConfigError, StabilityVariant

from helpers import SMALL, tokens


def test_config_validation():
    for bad in ({"hidden": 10, "heads": 3}, {"seq_len": 1}, {"layers": 0}, {"dtype": "float16"}):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)
    assert ModelConfig(variant="qk_norm").variant == StabilityVariant("qk_norm")


def test_init_statistics():
    cfg = ModelConfig(vocab_size=512, seq_len=8, hidden=128, layers=4, heads=4)
    p = init_params(cfg).named_parameters()
    assert np.std(p["wte"].data) == pytest.approx(0.02, rel=0.05)
    assert np.std(p["blocks.0.qkv.weight"].data) == pytest.approx(0.02, rel=0.05)
    assert np.std(p["blocks.3.fc2.weight"].data) == pytest.approx(0.02 / math.sqrt(8), rel=0.05)
    assert np.all(p["blocks.2.ln_attn.gain"].data == 1) and np.all(p["ln_f.bias"].data == 0)
    assert p["head"] is not p["wte"]


def test_zero_init_residual_gives_zero_proj_output():
    cfg = ModelConfig(vocab_size=16, seq_len=4, hidden=8, layers=1, heads=2, zero_init_residual=True)
    taps = {0: {}}
    forward_loss(init_params(cfg), tokens(cfg), taps)
    assert np.all(taps[0]["Proj"][2].data == 0)


def test_init_is_deterministic_and_seeded():
    a = init_params(SMALL).named_parameters()
    b = init_params(SMALL).named_parameters()
    c = init_params(ModelConfig(**{**SMALL.__dict__, "seed": 1})).named_parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not np.array_equal(a["wte"].data, c["wte"].data)


def test_initial_loss_near_log_vocab():
    loss, logits = forward_loss(init_params(SMALL), tokens(SMALL, batch=4))
    assert logits.shape == (4, SMALL.seq_len, SMALL.vocab_size)
    assert float(loss.data) == pytest.approx(math.log(SMALL.vocab_size), rel=0.02)


def test_logits_are_causal():
    model = init_params(SMALL)
    t = tokens(SMALL, batch=1)
    t2 = t.copy()
    t2[0, 10:] = (t2[0, 10:] + 1) % SMALL.vocab_size
    a = forward_loss(model, t)[1].data
    b = forward_loss(model, t2)[1].data
    np.testing.assert_array_equal(a[0, :10], b[0, :10])


def test_token_range_checked():
    model = init_params(SMALL)
    with pytest.raises(ValueError):
        forward_loss(model, np.full((1, SMALL.seq_len + 1), SMALL.vocab_size))
    with pytest.raises(ValueError):
        forward_loss(model, np.zeros((1, 1), dtype=int))


def test_no_decay_names():
    names = init_params(ModelConfig(vocab_size=8, seq_len=4, hidden=8, layers=1, heads=2, variant=StabilityVariant("sigma_reparam"))).no_decay_names()
    assert "blocks.0.qkv.gamma" in names and "ln_f.gain" in names and "blocks.0.qkv.weight" not in names
    ls = init_params(ModelConfig(vocab_size=8, seq_len=4, hidden=8, layers=1, heads=2, variant=StabilityVariant("layer_scale")))
    assert {"blocks.0.ls_attn", "blocks.0.ls_ff"} <= ls.no_decay_names()


@pytest.mark.parametrize("kind", ["baseline", "sigma_reparam", "qk_fc_norm"])
def test_checkpoint_round_trip(tmp_path, kind):
    cfg = ModelConfig(**{**SMALL.__dict__, "variant": StabilityVariant(kind)})
    src = init_params(cfg)
    for p in src.parameters():
        p.data = p.data + np.float32(0.5)
    save_checkpoint(src, tmp_path)
    entries = read_manifest(tmp_path)
    assert entries[0][0] == "wte" and entries[0][3] == 0
    dst = load_checkpoint(init_params(ModelConfig(**{**cfg.__dict__, "seed": 9})), tmp_path)
    for name, p in src.named_parameters().items():
        assert np.array_equal(p.data, dst.named_parameters()[name].data), name
    t = tokens(cfg)
    assert float(forward_loss(src, t)[0].data) == float(forward_loss(dst, t)[0].data)


def test_checkpoint_rejects_mismatch(tmp_path):
    save_checkpoint(init_params(SMALL), tmp_path)
    other = init_params(ModelConfig(**{**SMALL.__dict__, "variant": StabilityVariant("qk_norm")}))
    with pytest.raises(ValueError):
        load_checkpoint(other, tmp_path)
    (tmp_path / "manifest.txt").write_text("garbage\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path)
