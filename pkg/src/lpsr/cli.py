"""Command-line entry point: ``lpsr <subcommand> [options]``.

Usage errors exit with status 2 and argparse's usage text. Any other failure
prints one JSON line ``{"error": <kind>, "message": <text>}`` on stderr and
exits with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("lpsr")

SUBCOMMANDS = ("gen-data", "degrade", "train", "evaluate", "ablate", "ablate-report", "report", "loss-eval", "selfcheck")


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", metavar="FILE", help="run config (.toml, .yaml or .json)")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="override a config value, e.g. --set train.epochs=5 (repeatable)",
        )
    p.add_argument("--seed", type=int, default=None, help="master seed; overrides every seed in the config")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lpsr", description="License-plate super-resolution with LCOFL.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="render and degrade a synthetic dataset, write its manifest")
    _common(p)
    p.add_argument("--out", metavar="DIR", help="output directory (default: <workdir>/<data.out_dir>)")
    p.add_argument("--workers", type=int, default=None, help="worker processes")

    p = sub.add_parser("degrade", help="degrade one 32x96 HR image to a 16x48 LR image")
    _common(p, config=False)
    p.add_argument("--input", required=True, metavar="PNG", help="HR image (resized to 32x96 after gray padding)")
    p.add_argument("--output", required=True, metavar="PNG", help="where to write the LR image")
    p.add_argument("--threshold", type=float, default=0.1, help="target SSIM (default 0.1)")
    p.add_argument("--max-iters", type=int, default=50, help="iteration budget (default 50)")

    p = sub.add_parser("train", help="GAN-style training of the generator")
    _common(p)
    p.add_argument("--resume", metavar="CKPT_DIR", help="resume from a run's last/ checkpoint directory")
    p.add_argument("--ablate", metavar="FLAGS", default="", help="e.g. arch_mod=off,gan_style=off,lcofl=off")
    p.add_argument("--run-dir", metavar="DIR", help="run directory (default: <workdir>/runs/<flag tag>)")

    p = sub.add_parser("evaluate", help="HR / bicubic LR / SR recognition report with the evaluation OCR")
    _common(p)
    p.add_argument("--ckpt", required=True, metavar="DIR", help="run directory or checkpoint directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", metavar="DIR", help="report directory (default: <run>/report)")
    p.add_argument("--evaluator", metavar="FILE", help="evaluation OCR weights (trained and cached if missing)")

    p = sub.add_parser("ablate", help="train and evaluate all 8 ablation flag combinations")
    _common(p)
    p.add_argument("--out", metavar="DIR", help="parent directory for the 8 runs (default: <workdir>/ablation)")
    p.add_argument("--epochs", type=int, default=None, help="epochs per run (default: train.epochs)")

    p = sub.add_parser("ablate-report", help="tabulate finished ablation runs")
    _common(p, config=False)
    p.add_argument("--runs", nargs="+", required=True, metavar="DIR", help="run directories with report/")
    p.add_argument("--out", required=True, metavar="FILE", help="markdown output; a .csv sibling is written too")

    p = sub.add_parser("report", help="loss and recognition-rate plots for a run")
    _common(p, config=False)
    p.add_argument("--run", required=True, metavar="DIR", help="run directory containing history.csv")
    p.add_argument("--out", metavar="DIR", help="figure directory (default: <run>/figures)")

    p = sub.add_parser("loss-eval", help="evaluate LCOFL on a JSON case and print its breakdown")
    _common(p, config=False)
    p.add_argument("--input", required=True, metavar="JSON", help='{"probs", "gt", "sr_path", "hr_path"}')
    p.add_argument("--beta", type=float, default=None, help="override beta from the input file")
    p.add_argument("--mode", choices=("soft", "hard"), default="hard", help="layout penalty mode")

    p = sub.add_parser("selfcheck", help="run the fast invariant suite")
    _common(p, config=False)
    return parser


def _load_config(args):
    from lpsr import config

    return config.load(args.config, args.overrides, args.seed)


def cmd_gen_data(args) -> int:
    from lpsr.config import write_snapshot
    from lpsr.data import build_dataset

    cfg = _load_config(args)
    out = Path(args.out) if args.out else cfg.paths.data_dir(cfg.data)
    data_cfg = replace(cfg.data, out_dir=str(out))
    if args.workers is not None:
        data_cfg = replace(data_cfg, workers=args.workers)
    manifest = build_dataset(data_cfg)
    write_snapshot(cfg, out)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(json.dumps({"manifest": str(out / "manifest.jsonl"), **counts}))
    return 0


def cmd_degrade(args) -> int:
    from lpsr.data import HR_SIZE, GRAY, degrade, load_png, pad_to_aspect, quantize, resize_bicubic, save_png

    img = load_png(args.input)
    if img.shape[:2] != HR_SIZE:
        img = quantize(np.clip(resize_bicubic(pad_to_aspect(img, HR_SIZE[1] / HR_SIZE[0], GRAY), HR_SIZE), 0, 1))
    lr, score = degrade(img, args.threshold, args.max_iters, 0 if args.seed is None else args.seed)
    save_png(lr, args.output)
    print(json.dumps({"output": args.output, "ssim": score}))
    return 0


def _manifest(cfg):
    from lpsr.data import Manifest

    return Manifest.read(cfg.paths.resolve_manifest(cfg.data))


def _train_one(cfg, run_dir: Path, resume: str | None = None):
    from lpsr.config import write_snapshot
    from lpsr.trainer import train

    manifest = _manifest(cfg)
    write_snapshot(cfg, run_dir)
    return train(
        manifest, cfg.train_config(), cfg.model.generator, run_dir,
        ocr_cfg=cfg.model.discriminator, resume=resume, snapshot=cfg.to_dict(),
    )


def cmd_train(args) -> int:
    from lpsr.trainer import AblationFlags

    cfg = _load_config(args)
    if args.ablate:
        cfg = cfg.with_ablation(AblationFlags.parse(args.ablate))
    run_dir = Path(args.run_dir) if args.run_dir else cfg.paths.runs / cfg.train.ablation.tag
    if args.resume and not Path(args.resume).is_dir():
        raise FileNotFoundError(f"resume checkpoint directory not found: {args.resume}")
    result = _train_one(cfg, run_dir, args.resume)
    last = result.state.history[-1] if result.state.history else None
    print(json.dumps({"run_dir": str(run_dir), "epochs": result.state.epoch,
                      "val_rr": None if last is None else last.val_rr}))
    return 0


def _ckpt_dir(path: Path) -> Path:
    """Accept a run directory (prefers best/, then last/) or a checkpoint directory."""
    if (path / "generator.pt").exists():
        return path
    for name in ("best", "last"):
        if (path / name / "generator.pt").exists():
            return path / name
    raise FileNotFoundError(f"no generator checkpoint under {path}")


def _evaluate(cfg, ckpt: Path, split: str, out: Path, evaluator_path: Path | None):
    from lpsr.data import load_split
    from lpsr.evaluation import evaluate, load_or_train_evaluator

    evaluator = load_or_train_evaluator(evaluator_path or cfg.paths.evaluator, cfg.evaluator_training)
    result = evaluate(load_split(_manifest(cfg), split), _ckpt_dir(ckpt), evaluator)
    result.write(out)
    return result


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    ckpt = Path(args.ckpt)
    run_root = ckpt.parent if ckpt.name in ("best", "last") else ckpt
    out = Path(args.out) if args.out else run_root / "report"
    result = _evaluate(cfg, ckpt, args.split, out, Path(args.evaluator) if args.evaluator else None)
    print(result.markdown())
    return 0


def cmd_ablate(args) -> int:
    from lpsr.evaluation import write_ablation_report
    from lpsr.trainer import AblationFlags

    cfg = _load_config(args)
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    out = Path(args.out) if args.out else Path(cfg.paths.workdir) / "ablation"
    run_dirs = []
    for flags in AblationFlags.all_combinations():
        run_dir = out / flags.tag
        log.info("ablation run %s", flags.tag)
        _train_one(cfg.with_ablation(flags), run_dir)
        _evaluate(cfg, run_dir, "test", run_dir / "report", None)
        run_dirs.append(run_dir)
    rows = write_ablation_report(run_dirs, out / "ablation.md")
    print((out / "ablation.md").read_text())
    log.info("%d-row ablation table at %s", len(rows), out / "ablation.md")
    return 0


def cmd_ablate_report(args) -> int:
    from lpsr.evaluation import write_ablation_report

    write_ablation_report(args.runs, args.out)
    print(Path(args.out).read_text())
    return 0


def cmd_report(args) -> int:
    from lpsr.evaluation import plot_history

    run = Path(args.run)
    out = Path(args.out) if args.out else run / "figures"
    paths = plot_history(run / "history.csv", out)
    if (run / "report" / "metrics.md").exists():
        shutil.copy(run / "report" / "metrics.md", out / "metrics.md")
    print(json.dumps({"figures": [str(p) for p in paths]}))
    return 0


def cmd_loss_eval(args) -> int:
    import torch

    from lpsr.alphabet import ALPHABET
    from lpsr.data import load_png
    from lpsr.losses import lcofl

    path = Path(args.input)
    if not path.exists():
        raise FileNotFoundError(f"loss-eval input not found: {path}")
    case = json.loads(path.read_text())
    probs = torch.tensor(case["probs"], dtype=torch.float64)
    gt = case["gt"]
    gt = torch.tensor(ALPHABET.encode(gt) if isinstance(gt, str) else gt)
    base = path.parent

    def img(key):
        p = Path(case[key])
        return torch.from_numpy(load_png(p if p.is_absolute() else base / p)).permute(2, 0, 1)

    weights = torch.tensor(case["weights"], dtype=torch.float64) if "weights" in case else None
    beta = args.beta if args.beta is not None else float(case.get("beta", 1.0))
    parts = lcofl(probs, gt, img("sr_path"), img("hr_path"), weights, beta, mode=args.mode)
    print(json.dumps(parts.as_dict()))
    return 0


def cmd_selfcheck(args) -> int:
    from lpsr import selfcheck

    results = selfcheck.run(seed=0 if args.seed is None else args.seed)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "degrade": cmd_degrade,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "ablate-report": cmd_ablate_report,
    "report": cmd_report,
    "loss-eval": cmd_loss_eval,
    "selfcheck": cmd_selfcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    import torch

    torch.set_num_threads(1)
    try:
        return HANDLERS[args.command](args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001  (one machine-readable line per failure)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
