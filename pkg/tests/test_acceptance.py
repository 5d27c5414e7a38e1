"""Acceptance criteria, each printing one PASS/FAIL line.

The desk-scale criteria drive the real CLI end to end: 650 synthetic plates
(500/50/100), a 20-epoch default run, a repeat run for determinism, and the
8-combination ablation at 5 epochs. Expect roughly an hour on one CPU core.
"""

import csv
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from lpsr import cli, selfcheck
from lpsr.data import LR_SIZE, DataConfig, Manifest, build_dataset
from lpsr.trainer import read_history

MA_WINDOW = 3


def record(name: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def _fmt(results):
    return "; ".join(f"{r.name} {r.measured:.3g} (bound {r.bound:.3g})" for r in results)


def test_gradient_suite():
    t0 = time.perf_counter()
    results = [selfcheck.gradient_check(t, trials=20) for t in ("classification", "layout_soft", "dissimilarity", "composite")]
    secs = time.perf_counter() - t0
    record("gradient suite", all(r.passed for r in results) and secs < 60, f"{_fmt(results)}; {secs:.1f}s (< 60s)")


def test_ssim_oracle():
    results = [selfcheck.ssim_oracle_check(pairs=5), selfcheck.ssim_identity_check()]
    record("SSIM oracle", all(r.passed for r in results), _fmt(results))


def test_layout_penalty_oracle():
    r = selfcheck.layout_oracle_check(pairs=1000)
    record("layout-penalty oracle", r.passed, f"mismatches={r.measured:g} ({r.detail})")


def test_closed_form_values():
    results = selfcheck.closed_form_check()[:2]
    record("closed-form loss values", all(r.passed for r in results), _fmt(results))


def test_degradation_contract(tmp_path):
    cfg = DataConfig(out_dir=str(tmp_path / "a"), num_plates=100,
                     split_fractions={"train": 0.8, "val": 0.1, "test": 0.1}, seed=0)
    t0 = time.perf_counter()
    m = build_dataset(cfg)
    secs = time.perf_counter() - t0
    samples = [m.load(e) for e in m.entries]
    worst = max(s.degradation_ssim for s in samples)
    shapes_ok = all(s.lr.shape == LR_SIZE + (3,) for s in samples)
    again = build_dataset(DataConfig(**{**cfg.__dict__, "out_dir": str(tmp_path / "b")}))
    same = all(
        np.array_equal(m.load(a).lr, again.load(b).lr) and a.ssim == b.ssim for a, b in zip(m.entries, again.entries)
    )
    record(
        "degradation contract",
        len(samples) == 100 and worst < 0.1 and shapes_ok and same and secs < 120,
        f"n={len(samples)} max_ssim={worst:.4f} (< 0.1) lr_16x48={shapes_ok} deterministic={same} {secs:.1f}s (< 120s)",
    )


def test_deformable_degeneracy():
    r = selfcheck.deformable_degeneracy_check()
    record("deformable degeneracy", r.passed, f"max_abs_diff={r.measured:.3g} (< 1e-6) {r.detail}")


def test_weight_update_behavior():
    results = selfcheck.weight_update_check(alpha=0.1)
    record("weight-update behavior", all(r.passed for r in results), _fmt(results))


def test_steplr():
    r = selfcheck.steplr_check()
    record("StepLR", r.passed, r.detail)


# desk scale

def _cli(*argv):
    code = cli.main(list(argv))
    assert code == 0, f"lpsr {' '.join(argv)} exited {code}"


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = Path(os.environ.get("LPSR_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("desk"))
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "desk.toml"
    cfg.write_text(f'seed = 0\n[paths]\nworkdir = "{root}"\n')
    timings = {}
    t0 = time.perf_counter()
    _cli("gen-data", "--config", str(cfg))
    timings["gen_data"] = time.perf_counter() - t0
    return {"root": root, "config": cfg, "timings": timings}


@pytest.fixture(scope="module")
def desk_run(desk):
    t0 = time.perf_counter()
    run = desk["root"] / "runs" / "default"
    _cli("train", "--config", str(desk["config"]), "--run-dir", str(run))
    desk["timings"]["train"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    _cli("evaluate", "--config", str(desk["config"]), "--ckpt", str(run))
    desk["timings"]["evaluate"] = time.perf_counter() - t0
    return run


def _moving_average(values, window=MA_WINDOW):
    return [float(np.mean(values[max(0, i - window + 1) : i + 1])) for i in range(len(values))]


@pytest.mark.slow
def test_desk_scale_training(desk, desk_run):
    m = Manifest.read(desk["root"] / "data" / "manifest.jsonl")
    sizes = tuple(len(m.split(s)) for s in ("train", "val", "test"))
    hist = read_history(desk_run / "history.csv")
    ma = _moving_average([h["total"] for h in hist])
    a = len(hist) == 20 and ma[-1] < ma[0]
    rows = json.loads((desk_run / "report" / "metrics.json").read_text())
    hr, lr, sr = (rows[k]["rr_all"] for k in ("HR", "LR", "SR"))
    b = sr - lr >= 0.10
    c = hr > lr and hr > sr
    hours = desk["timings"]["train"] / 3600
    detail = (
        f"splits={sizes} epochs={len(hist)}; "
        f"(a) {'PASS' if a else 'FAIL'} total MA{MA_WINDOW} epoch1={ma[0]:.4f} epoch20={ma[-1]:.4f}; "
        f"(b) {'PASS' if b else 'FAIL'} SR rr={100 * sr:.1f}% LR rr={100 * lr:.1f}% gain={100 * (sr - lr):.1f}pp (>= 10pp); "
        f"(c) {'PASS' if c else 'FAIL'} HR rr={100 * hr:.1f}%; train {hours:.2f}h (< 3h CPU)"
    )
    record("desk-scale training", sizes == (500, 50, 100) and a and b and c and hours < 3, detail)


@pytest.mark.slow
def test_evaluator_reads_clean_plates(desk, desk_run):
    # supporting check: the held-out OCR should read HR test plates at > 90% per character
    with open(desk_run / "report" / "samples_HR.csv") as fh:
        rows = list(csv.DictReader(fh))
    acc = sum(int(r["correct_chars"]) for r in rows) / (7 * len(rows))
    print(f"evaluator HR per-character accuracy {acc:.3f}")
    assert acc > 0.9


@pytest.mark.slow
def test_determinism(desk, desk_run):
    repeat = desk["root"] / "runs" / "repeat"
    _cli("train", "--config", str(desk["config"]), "--run-dir", str(repeat))
    a = (desk_run / "history.csv").read_bytes()
    b = (repeat / "history.csv").read_bytes()
    record("determinism", a == b, f"history.csv identical={a == b} ({len(a.splitlines())} lines)")


@pytest.mark.slow
def test_ablation_harness(desk, desk_run):
    out = desk["root"] / "ablation"
    t0 = time.perf_counter()
    _cli("ablate", "--config", str(desk["config"]), "--epochs", "5", "--out", str(out))
    secs = time.perf_counter() - t0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    last = rows[-1] if rows else {}
    all_on = bool(rows) and all(last[k] == "1" for k in ("arch_mod", "gan_style", "lcofl"))
    ladder = ", ".join(f"{r['arch_mod']}{r['gan_style']}{r['lcofl']}:{100 * float(r['rr_all']):.1f}%" for r in rows)
    record(
        "ablation harness",
        len(rows) == 8 and all_on and len({r["run"] for r in rows}) == 8,
        f"rows={len(rows)} all-on reported last={all_on} [{ladder}] {secs / 60:.1f} min",
    )
