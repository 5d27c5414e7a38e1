import contextlib
import io
import json
import os
from pathlib import Path

import numpy as np
import pytest

from lpsr import cli, config
from lpsr.alphabet import ALPHABET
from lpsr.config import ConfigError, RunConfig
from lpsr.data import save_png
from lpsr.trainer import AblationFlags

GOLDEN = Path(__file__).parent / "golden"


def run_cli(argv, monkeypatch=None):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = cli.main(argv)
        except SystemExit as exc:
            code = exc.code
    return code, out.getvalue(), err.getvalue()


# config loading

def test_defaults():
    cfg = config.load()
    assert cfg == RunConfig()
    assert cfg.train_config().alpha == 0.1 and cfg.data.num_plates == 650


def test_file_formats_agree(tmp_path):
    (tmp_path / "c.toml").write_text('seed = 4\n[train]\nepochs = 3\n[loss]\nalpha = 0.2\n')
    (tmp_path / "c.yaml").write_text("seed: 4\ntrain:\n  epochs: 3\nloss:\n  alpha: 0.2\n")
    (tmp_path / "c.json").write_text(json.dumps({"seed": 4, "train": {"epochs": 3}, "loss": {"alpha": 0.2}}))
    cfgs = [config.load(tmp_path / f"c.{ext}") for ext in ("toml", "yaml", "json")]
    assert cfgs[0] == cfgs[1] == cfgs[2]
    assert cfgs[0].train.epochs == 3 and cfgs[0].train_config().alpha == 0.2
    assert cfgs[0].data.seed == 4 and cfgs[0].train.seed == 4


def test_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv(config.WORKDIR_ENV, raising=False)
    (tmp_path / "c.toml").write_text('seed = 4\n[train]\nepochs = 3\nseed = 9\n')
    cfg = config.load(tmp_path / "c.toml", ["train.epochs=7"])
    assert cfg.train.epochs == 7 and cfg.train.seed == 9 and cfg.data.seed == 4
    cfg = config.load(tmp_path / "c.toml", ["train.epochs=7"], seed=11)
    assert cfg.train.seed == 11 and cfg.data.seed == 11 and cfg.seed == 11


def test_workdir_env(monkeypatch):
    monkeypatch.setenv(config.WORKDIR_ENV, "/tmp/envwork")
    assert config.load().paths.workdir == "/tmp/envwork"
    assert config.load(overrides=["paths.workdir=/x"]).paths.workdir == "/x"


def test_nested_sections_and_ablation():
    cfg = config.load(overrides=["model.generator.base_channels=16", "train.ablation.lcofl=false"])
    assert cfg.model.generator.base_channels == 16 and cfg.model.generator.num_rcb == 4
    assert cfg.train.ablation == AblationFlags(lcofl=False)


@pytest.mark.parametrize(
    "override",
    ["train.nope=1", "train.epochs=many", "train.alpha=0.3", "model.generator.conv_kind=dense", "noequals", "train.steplr_factor=2"],
)
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        config.load(overrides=[override])


def test_missing_and_unsupported_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        config.load(tmp_path / "missing.toml")
    (tmp_path / "c.ini").write_text("[x]\n")
    with pytest.raises(ConfigError):
        config.load(tmp_path / "c.ini")
    (tmp_path / "bad.toml").write_text("seed = = 1\n")
    with pytest.raises(ConfigError):
        config.load(tmp_path / "bad.toml")


def test_snapshot_reloads_identically(tmp_path):
    cfg = config.load(overrides=["train.epochs=2", "loss.beta=2.0", "train.ablation.gan_style=false"], seed=3)
    path = config.write_snapshot(cfg, tmp_path)
    assert config.load(path) == cfg


def test_documented_keys_cover_every_section():
    keys = config.documented_keys()
    assert {"(top)", "data", "train", "loss", "model.generator", "paths"} <= set(keys)
    assert keys["train"]["lr"] == 1e-4


# CLI

def test_help_goldens(monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    for name in (None,) + cli.SUBCOMMANDS:
        argv = ["--help"] if name is None else [name, "--help"]
        code, out, _ = run_cli(argv)
        assert code == 0
        golden = GOLDEN / f"help_{name or 'main'}.txt"
        assert out == golden.read_text(), f"help text for {name or 'main'} changed"


def test_usage_errors_exit_2():
    assert run_cli([])[0] == 2
    assert run_cli(["fly"])[0] == 2
    assert run_cli(["train", "--bogus"])[0] == 2


def test_missing_config_is_one_json_line(tmp_path):
    code, _, err = run_cli(["train", "--config", str(tmp_path / "missing.toml")])
    assert code == 1
    lines = err.strip().splitlines()
    assert len(lines) == 1
    payload = json.loads(lines[0])
    assert payload["error"] == "ConfigError" and "missing.toml" in payload["message"]


def test_bad_ablation_flag_is_reported(tmp_path):
    code, _, err = run_cli(["train", "--ablate", "warp=off", "--set", f"paths.workdir={tmp_path}"])
    assert code == 1 and json.loads(err)["error"] == "ValueError"


def _case(tmp_path, probs, gt):
    img = np.full((32, 96, 3), 0.5)
    save_png(img, tmp_path / "sr.png")
    save_png(img, tmp_path / "hr.png")
    path = tmp_path / "case.json"
    path.write_text(json.dumps({"probs": probs, "gt": gt, "sr_path": "sr.png", "hr_path": "hr.png"}))
    return path


def test_loss_eval_uniform(tmp_path):
    path = _case(tmp_path, [[1 / 36] * 36] * 7, "ABC1234")
    code, out, _ = run_cli(["loss-eval", "--input", str(path), "--mode", "soft"])
    assert code == 0
    d = json.loads(out)
    assert d["l_c"] == pytest.approx(np.log(36), abs=1e-9)
    assert d["l_p"] == pytest.approx(134 / 36, abs=1e-9)
    assert d["l_s"] == pytest.approx(0.0, abs=1e-12)


def test_loss_eval_hard_one_hot(tmp_path):
    probs = np.eye(36)[ALPHABET.encode("AB81234")].tolist()
    code, out, _ = run_cli(["loss-eval", "--input", str(_case(tmp_path, probs, "ABC1234")), "--beta", "2"])
    assert code == 0 and json.loads(out)["l_p"] == 2.0


def test_loss_eval_missing_input(tmp_path):
    code, _, err = run_cli(["loss-eval", "--input", str(tmp_path / "none.json")])
    assert code == 1 and json.loads(err)["error"] == "FileNotFoundError"


def test_degrade_command(tmp_path):
    from lpsr.alphabet import LpLabel
    from lpsr.data import load_png, render_plate

    save_png(render_plate(LpLabel("ABC1234", "brazilian"), rng_seed=1), tmp_path / "hr.png")
    args = ["degrade", "--input", str(tmp_path / "hr.png"), "--output", str(tmp_path / "lr.png"), "--seed", "3"]
    code, out, _ = run_cli(args)
    assert code == 0 and json.loads(out)["ssim"] < 0.1
    assert load_png(tmp_path / "lr.png").shape == (16, 48, 3)
    first = (tmp_path / "lr.png").read_bytes()
    run_cli(args)
    assert (tmp_path / "lr.png").read_bytes() == first


def test_gen_data_writes_manifest_and_snapshot(tmp_path, monkeypatch):
    monkeypatch.delenv(config.WORKDIR_ENV, raising=False)
    (tmp_path / "c.toml").write_text(
        f'seed = 2\n[paths]\nworkdir = "{tmp_path}"\n[data]\nnum_plates = 10\n'
        '[data.split_fractions]\ntrain = 0.8\nval = 0.1\ntest = 0.1\n'
    )
    code, out, _ = run_cli(["gen-data", "--config", str(tmp_path / "c.toml")])
    assert code == 0
    d = json.loads(out)
    assert (d["train"], d["val"], d["test"]) == (8, 1, 1)
    snap = tmp_path / "data" / "run_config.json"
    assert config.load(snap).data.num_plates == 10


def test_report_command(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    (run / "history.csv").write_text("epoch,l_c,l_p,l_s,total,val_rr,lr\n1,3.0,1.0,0.4,4.4,0.0,0.0001\n")
    code, out, _ = run_cli(["report", "--run", str(run)])
    assert code == 0 and len(json.loads(out)["figures"]) == 2


def test_ablate_report_missing_runs(tmp_path):
    code, _, err = run_cli(["ablate-report", "--runs", str(tmp_path), "--out", str(tmp_path / "t.md")])
    assert code == 1 and json.loads(err)["error"] == "ReportError"
