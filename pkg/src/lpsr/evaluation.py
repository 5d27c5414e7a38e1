"""Test-time evaluation with the held-out OCR, Table-style reports, ablation tables and plots."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from lpsr.alphabet import ALPHABET
from lpsr.data import Manifest, TensorSplit, load_split, render_pool
from lpsr.losses import ssim
from lpsr.metrics import PSNR_CAP_DB, correct_chars, psnr, recognition_rates
from lpsr.models import BranchOcr, Generator, OcrBase, OcrConfig, load_weights, save_weights
from lpsr.trainer import FLAG_NAMES, load_generator, predict, pretrain_ocr, super_resolve

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("row", "n", "rr_all", "rr_ge6", "rr_ge5", "mean_psnr", "mean_ssim")
SAMPLE_COLUMNS = ("id", "gt", "pred", "correct_chars", "psnr", "ssim")
ABLATION_COLUMNS = FLAG_NAMES + ("rr_all", "rr_ge6", "rr_ge5", "mean_psnr", "mean_ssim", "n", "run")
ROW_ORDER = ("HR", "LR", "SR")
PSNR_FOOTNOTE = f"PSNR of identical images is reported as {PSNR_CAP_DB:g} dB."


class ReportError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleResult:
    id: str
    gt: str
    pred: str
    correct_chars: int
    psnr: float
    ssim: float


@dataclass
class MetricsReport:
    rr_all: float
    rr_ge6: float
    rr_ge5: float
    mean_psnr: float
    mean_ssim: float
    n: int
    per_sample: list[SampleResult] = field(default_factory=list)

    def __post_init__(self):
        if not self.rr_all <= self.rr_ge6 <= self.rr_ge5:
            raise ReportError(f"recognition rates not nested: {self.rr_all}, {self.rr_ge6}, {self.rr_ge5}")

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("n", "rr_all", "rr_ge6", "rr_ge5", "mean_psnr", "mean_ssim")}


def build_report(ids: Sequence[str], gts: Sequence[str], preds: Sequence[str], images: torch.Tensor, hr: torch.Tensor) -> MetricsReport:
    """Score predictions and image quality of ``images`` against ``hr`` (both ``(N, 3, 32, 96)``)."""
    if not (len(ids) == len(gts) == len(preds) == len(images) == len(hr)):
        raise ValueError("ids, labels, predictions and images must have equal length")
    if not ids:
        raise ReportError("cannot report on an empty split")
    rr = recognition_rates(zip(preds, gts))
    s = ssim(images.double(), hr.double()).reshape(-1).tolist()
    samples = [
        SampleResult(i, g, p, correct_chars(p, g), psnr(a, b), float(q))
        for i, g, p, a, b, q in zip(ids, gts, preds, images, hr, s)
    ]
    return MetricsReport(
        *rr,
        mean_psnr=float(np.mean([r.psnr for r in samples])),
        mean_ssim=float(np.mean([r.ssim for r in samples])),
        n=len(samples),
        per_sample=samples,
    )


def decode(ocr: OcrBase, images: torch.Tensor) -> list[str]:
    return [ALPHABET.decode(row.tolist()) for row in predict(ocr, images)]


@dataclass(frozen=True)
class EvaluatorTraining:
    """How the held-out evaluation OCR is trained: on its own pool of clean renders."""

    pool_size: int = 3200
    epochs: int = 10
    lr: float = 1e-3
    lr_halving_every: int = 4
    batch_size: int = 32
    seed: int = 1_000_003


def train_evaluator(spec: EvaluatorTraining = EvaluatorTraining(), path: str | Path | None = None) -> BranchOcr:
    torch.manual_seed(spec.seed)
    imgs, texts = render_pool(spec.pool_size, spec.seed)
    x = torch.from_numpy(imgs).permute(0, 3, 1, 2).float().contiguous()
    y = torch.tensor([ALPHABET.encode(t) for t in texts], dtype=torch.long)
    ocr = BranchOcr(OcrConfig.evaluator())
    losses = pretrain_ocr(
        ocr, x, y, epochs=spec.epochs, lr=spec.lr, batch_size=spec.batch_size,
        seed=spec.seed, stream=2, lr_halving_every=spec.lr_halving_every,
    )
    log.info("evaluator losses %s", ["%.4f" % l for l in losses])
    if path is not None:
        save_weights(ocr, path)
        Path(path).with_suffix(".json").write_text(json.dumps(asdict(spec), indent=2))
    return ocr


def load_or_train_evaluator(path: str | Path, spec: EvaluatorTraining = EvaluatorTraining()) -> BranchOcr:
    """Load the cached evaluator at ``path``, training and caching it first if absent."""
    path = Path(path)
    if path.exists():
        return load_weights(BranchOcr(OcrConfig.evaluator()), path)
    log.info("no evaluator at %s; training one", path)
    return train_evaluator(spec, path)


@dataclass
class Evaluation:
    rows: dict[str, MetricsReport]

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for name in ROW_ORDER:
                if name in self.rows:
                    r = self.rows[name]
                    w.writerow([name, r.n, f"{r.rr_all:.4f}", f"{r.rr_ge6:.4f}", f"{r.rr_ge5:.4f}",
                                f"{r.mean_psnr:.4f}", f"{r.mean_ssim:.4f}"])
        for name, r in self.rows.items():
            with open(out / f"samples_{name}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(SAMPLE_COLUMNS)
                for s in r.per_sample:
                    w.writerow([s.id, s.gt, s.pred, s.correct_chars, f"{s.psnr:.4f}", f"{s.ssim:.6f}"])
        (out / "metrics.json").write_text(json.dumps({k: v.summary() for k, v in self.rows.items()}, indent=2))
        (out / "metrics.md").write_text(self.markdown())

    def markdown(self) -> str:
        lines = [
            "| Input | n | All (%) | >= 6 (%) | >= 5 (%) | PSNR (dB) | SSIM |",
            "|---|---:|---:|---:|---:|---:|---:|",
        ]
        for name in ROW_ORDER:
            if name in self.rows:
                r = self.rows[name]
                lines.append(
                    f"| {name} | {r.n} | {100 * r.rr_all:.1f} | {100 * r.rr_ge6:.1f} | {100 * r.rr_ge5:.1f} "
                    f"| {r.mean_psnr:.2f} | {r.mean_ssim:.4f} |"
                )
        return "\n".join(lines) + f"\n\n{PSNR_FOOTNOTE}\n"


def evaluate(
    split: TensorSplit,
    generator: Generator | str | Path,
    evaluator: OcrBase,
) -> Evaluation:
    """HR ceiling, bicubic-LR baseline and SR rows, all read by the same evaluation OCR."""
    if isinstance(generator, (str, Path)):
        generator = load_generator(generator)
    if len(split) == 0:
        raise ReportError("cannot evaluate an empty split")
    bicubic = torch.nn.functional.interpolate(split.lr, size=(32, 96), mode="bicubic", align_corners=False).clamp(0, 1)
    sr = super_resolve(generator, split.lr)
    rows = {}
    for name, images in (("HR", split.hr), ("LR", bicubic), ("SR", sr)):
        rows[name] = build_report(split.ids, split.texts, decode(evaluator, images), images, split.hr)
    return Evaluation(rows)


def evaluate_manifest(manifest: Manifest, split: str, ckpt_dir: str | Path, evaluator_path: str | Path) -> Evaluation:
    return evaluate(load_split(manifest, split), ckpt_dir, load_or_train_evaluator(evaluator_path))


def _flags_of(run_dir: Path) -> dict[str, bool]:
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise ReportError(f"{run_dir}: missing config.json")
    flags = json.loads(cfg_path.read_text())["train"]["ablation"]
    return {k: bool(flags[k]) for k in FLAG_NAMES}


def ablation_report(run_dirs: Sequence[str | Path], row: str = "SR") -> tuple[list[dict], str]:
    """Rows sorted ascending by rr_all with the all-on configuration last, plus a markdown table."""
    if not run_dirs:
        raise ReportError("ablation_report needs at least one run directory")
    rows = []
    for d in map(Path, run_dirs):
        metrics = d / "report" / "metrics.json"
        if not metrics.exists():
            raise ReportError(f"{d}: missing report/metrics.json")
        m = json.loads(metrics.read_text())[row]
        rows.append({**_flags_of(d), **{k: m[k] for k in ("rr_all", "rr_ge6", "rr_ge5", "mean_psnr", "mean_ssim", "n")}, "run": d.name})
    rows.sort(key=lambda r: (all(r[k] for k in FLAG_NAMES), r["rr_all"], r["run"]))

    def mark(v: bool) -> str:
        return "x" if v else ""

    md = [
        "| ArchMod | GAN-style | LCOFL | All (%) | >= 6 (%) | >= 5 (%) | PSNR (dB) | SSIM |",
        "|:-:|:-:|:-:|---:|---:|---:|---:|---:|",
    ]
    for r in rows:
        md.append(
            f"| {mark(r['arch_mod'])} | {mark(r['gan_style'])} | {mark(r['lcofl'])} | {100 * r['rr_all']:.1f} "
            f"| {100 * r['rr_ge6']:.1f} | {100 * r['rr_ge5']:.1f} | {r['mean_psnr']:.2f} | {r['mean_ssim']:.4f} |"
        )
    return rows, "\n".join(md) + f"\n\n{PSNR_FOOTNOTE}\n"


def write_ablation_report(run_dirs: Sequence[str | Path], out: str | Path) -> list[dict]:
    """Write ``out`` (markdown) and a sibling ``.csv`` with :data:`ABLATION_COLUMNS`."""
    rows, md = ablation_report(run_dirs)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(md)
    with open(out.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([int(r[k]) for k in FLAG_NAMES] + [f"{r[k]:.4f}" for k in ("rr_all", "rr_ge6", "rr_ge5", "mean_psnr", "mean_ssim")] + [r["n"], r["run"]])
    return rows


def plot_history(history_csv: str | Path, out_dir: str | Path) -> list[Path]:
    """Loss curves and validation recognition rate per epoch, as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from lpsr.trainer import read_history

    hist = read_history(history_csv)
    if not hist:
        raise ReportError(f"{history_csv}: empty history")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    epochs = [h["epoch"] for h in hist]

    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("l_c", "l_p", "l_s", "total"):
        ax.plot(epochs, [h[key] for h in hist], marker="o", ms=3, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    loss_png = out / "loss_curves.png"
    fig.savefig(loss_png, dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [100 * h["val_rr"] for h in hist], marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation recognition rate (%)")
    fig.tight_layout()
    rr_png = out / "rr_vs_epoch.png"
    fig.savefig(rr_png, dpi=100)
    plt.close(fig)
    return [loss_png, rr_png]
