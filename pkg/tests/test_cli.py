import numpy as np
import pytest

from stablab.cli import main
from stablab.config import from_dict, load_config
from stablab.model import init_params, load_checkpoint
from stablab.stability import ConfigError

TINY_TOML = """
[model]
vocab_size = 32
seq_len = 8
hidden = 16
layers = 1
heads = 2

[data]
batch_size = 2

[run]
steps = 25
eval_batches = 0

[sweep]
learning_rates = [1e-3, 2.0]
variants = ["baseline", "qk_norm"]
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY_TOML)
    return str(p)


def test_shipped_configs_load():
    for name in ("configs/desk.toml", "configs/quick.toml"):
        run, plan = load_config(name)
        assert run.steps > 0 and plan is not None and plan.learning_rates


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        from_dict({"model": {"hiddn": 4}})
    with pytest.raises(ConfigError):
        from_dict({"modle": {}})
    with pytest.raises(ConfigError):
        from_dict({"variant": {"kind": "magic"}})


def test_config_tables_are_applied(cfg_path):
    run, plan = load_config(cfg_path)
    assert run.model.hidden == 16 and run.data.batch_size == 2
    assert plan.steps_per_run == 25 and [v.kind for v in plan.variants] == ["baseline", "qk_norm"]


def test_run_command(cfg_path, tmp_path, capsys):
    assert main(["run", "--config", cfg_path, "--variant", "qk_norm", "--lr", "0.01", "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("qk_norm_lr0.01_s0:")
    d = tmp_path / "o" / "runs" / "qk_norm_lr0.01_s0"
    assert (d / "telemetry.csv").exists() and not (d / "checkpoint").exists()


def test_run_checkpoint_reloads(cfg_path, tmp_path):
    assert main(["run", "--config", cfg_path, "--steps", "3", "--out", str(tmp_path), "--checkpoint"]) == 0
    run, _ = load_config(cfg_path)
    ck = tmp_path / "runs" / run.name / "checkpoint"
    assert (ck / "params.bin").exists() and (ck / "manifest.txt").exists()
    fresh = init_params(run.model)
    trained = load_checkpoint(init_params(run.model), ck)
    names = fresh.named_parameters()
    assert any(not np.array_equal(p.data, names[n].data) for n, p in trained.named_parameters().items())


def test_sweep_and_report(cfg_path, tmp_path, capsys):
    out = str(tmp_path / "sw")
    assert main(["sweep", "--config", cfg_path, "--out", out]) == 0
    assert "matrix:" in capsys.readouterr().out
    assert main(["report", "--out", out]) == 0
    text = capsys.readouterr().out
    assert "runs: 4" in text and "convergence matrix" in text


def test_demo_command(tmp_path, capsys):
    assert main(["demo-softmax", "--out", str(tmp_path), "--magnitudes", "1,40"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 5


def test_exit_codes(tmp_path, cfg_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nwidth = 3\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--config", cfg_path, "--steps", "0", "--out", str(tmp_path)]) == 2
    assert main(["sweep", "--steps", "1", "--out", str(tmp_path / "x")]) == 2
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["run", "--variant", "nope"])
    assert exc.value.code == 2
