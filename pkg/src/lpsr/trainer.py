"""GAN-style training: an OCR discriminator teaches the generator through LCOFL.

Each epoch alternates discriminator updates (cross-entropy on HR images) with
generator updates (LCOFL on the discriminator's reading of the SR output),
then validates, grows the penalty weights from the confusion matrix, steps the
learning-rate schedule and checkpoints.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from lpsr.data import Manifest, TensorSplit, load_split
from lpsr.losses import (
    ConfusionMatrix,
    LossBreakdown,
    LossConfig,
    PenaltyWeights,
    lcofl,
    update_penalty_weights,
)
from lpsr.alphabet import ALPHABET
from lpsr.metrics import char_accuracy, recognition_rates
from lpsr.models import (
    CheckpointError,
    Generator,
    GeneratorConfig,
    OcrBase,
    OcrConfig,
    build_ocr,
    load_weights,
    save_weights,
)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "l_c", "l_p", "l_s", "total", "val_rr", "lr")
FLAG_NAMES = ("arch_mod", "gan_style", "lcofl")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AblationFlags:
    arch_mod: bool = True
    gan_style: bool = True
    lcofl: bool = True

    @classmethod
    def parse(cls, text: str | None) -> "AblationFlags":
        """Parse ``"arch_mod=off,lcofl=on"``; unnamed flags stay on."""
        flags = {}
        for part in filter(None, (p.strip() for p in (text or "").split(","))):
            key, sep, value = part.partition("=")
            key = key.strip()
            if not sep or key not in FLAG_NAMES:
                raise ValueError(f"bad ablation flag {part!r}; expected one of {FLAG_NAMES} as name=on|off")
            value = value.strip().lower()
            if value not in ("on", "off", "true", "false", "1", "0"):
                raise ValueError(f"bad value for {key}: {value!r}")
            flags[key] = value in ("on", "true", "1")
        return cls(**flags)

    @classmethod
    def all_combinations(cls) -> list["AblationFlags"]:
        return [cls(a, g, l) for a in (False, True) for g in (False, True) for l in (False, True)]

    @property
    def tag(self) -> str:
        return "-".join(f"{n}_{'on' if getattr(self, n) else 'off'}" for n in FLAG_NAMES)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 20
    steplr_factor: float = 0.9
    steplr_patience_epochs: int = 5
    alpha: float = 0.1
    beta: float = 1.0
    w_max: float = 5.0
    confusion_min_count: int = 5
    confusion_min_fraction: float = 0.1
    freeze_discriminator: bool = False
    discriminator_warmup_epochs: int = 3
    discriminator_warmup_lr: float = 1e-3
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if not 0 < self.steplr_factor < 1:
            raise ValueError("steplr_factor must lie in (0, 1)")
        if self.lr <= 0 or self.discriminator_warmup_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.steplr_patience_epochs < 1:
            raise ValueError("batch_size and patience must be positive and epochs non-negative")
        if isinstance(self.ablation, dict):
            object.__setattr__(self, "ablation", AblationFlags(**self.ablation))

    def loss_config(self, base: LossConfig | None = None) -> LossConfig:
        return replace(
            base or LossConfig(),
            alpha=self.alpha,
            beta=self.beta,
            w_max=self.w_max,
            confusion_min_count=self.confusion_min_count,
            confusion_min_fraction=self.confusion_min_fraction,
        )


@dataclass(frozen=True)
class Variant:
    """What a set of ablation flags turns into."""

    generator: GeneratorConfig
    freeze_discriminator: bool
    use_layout: bool
    update_weights: bool


def ablation_variant(cfg: TrainConfig, gen_cfg: GeneratorConfig = GeneratorConfig()) -> Variant:
    flags = cfg.ablation
    if not flags.arch_mod:
        gen_cfg = replace(gen_cfg, conv_kind="depthwise", attention_shared=False)
    return Variant(
        generator=gen_cfg,
        freeze_discriminator=cfg.freeze_discriminator or not flags.gan_style,
        use_layout=flags.lcofl,
        update_weights=flags.lcofl,
    )


@dataclass
class EpochRecord:
    epoch: int
    l_c: float
    l_p: float
    l_s: float
    total: float
    val_rr: float
    lr: float
    d_loss: float | None = None
    val_char_acc: float = 0.0
    weights_digest: str = ""

    def csv_row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in HISTORY_COLUMNS[1:]]


@dataclass
class TrainState:
    epoch: int
    current_lr: float
    best_val_rr: float
    epochs_since_improvement: int
    penalty_weights: PenaltyWeights
    history: list[EpochRecord] = field(default_factory=list)
    reductions: int = 0

    @classmethod
    def initial(cls, cfg: TrainConfig) -> "TrainState":
        return cls(0, cfg.lr, -math.inf, 0, PenaltyWeights.ones(len(ALPHABET), cfg.w_max))

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "current_lr": self.current_lr,
            "best_val_rr": self.best_val_rr,
            "epochs_since_improvement": self.epochs_since_improvement,
            "penalty_weights": self.penalty_weights.values.tolist(),
            "w_max": self.penalty_weights.w_max,
            "reductions": self.reductions,
            "history": [asdict(r) for r in self.history],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainState":
        return cls(
            epoch=d["epoch"],
            current_lr=d["current_lr"],
            best_val_rr=d["best_val_rr"],
            epochs_since_improvement=d["epochs_since_improvement"],
            penalty_weights=PenaltyWeights(np.asarray(d["penalty_weights"]), d["w_max"]),
            history=[EpochRecord(**r) for r in d["history"]],
            reductions=d["reductions"],
        )


def observe_validation(state: TrainState, val_rr: float) -> TrainState:
    """Track the best validation rate and the count of epochs without improvement."""
    if val_rr > state.best_val_rr:
        return replace(state, best_val_rr=val_rr, epochs_since_improvement=0)
    return replace(state, epochs_since_improvement=state.epochs_since_improvement + 1)


def lr_schedule(state: TrainState, cfg: TrainConfig) -> TrainState:
    """Multiply the rate by ``steplr_factor`` once patience runs out, then restart the count."""
    if state.epochs_since_improvement >= cfg.steplr_patience_epochs:
        reductions = state.reductions + 1
        return replace(
            state,
            reductions=reductions,
            current_lr=cfg.lr * cfg.steplr_factor**reductions,
            epochs_since_improvement=0,
        )
    return state


@dataclass
class StepResult:
    generator_loss: LossBreakdown
    discriminator_loss: float | None


def _check_finite(value: torch.Tensor, what: str, context: str) -> None:
    if not torch.isfinite(value).all():
        raise TrainingError(f"non-finite {what} at {context}")


def discriminator_step(disc: OcrBase, hr: torch.Tensor, labels: torch.Tensor, opt: torch.optim.Optimizer) -> float:
    disc.train()
    logits = disc.logits(hr)
    loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1))
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return float(loss.detach())


def gan_step(
    batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    generator: Generator,
    discriminator: OcrBase,
    weights: torch.Tensor,
    cfg: TrainConfig,
    opt_g: torch.optim.Optimizer,
    opt_d: torch.optim.Optimizer | None,
    *,
    freeze_discriminator: bool | None = None,
    use_layout: bool = True,
    context: str = "step",
) -> StepResult:
    """One alternation: discriminator on HR labels, then generator through the fixed discriminator."""
    lr, hr, labels = batch
    frozen = cfg.freeze_discriminator if freeze_discriminator is None else freeze_discriminator
    d_loss = None
    if not frozen:
        if opt_d is None:
            raise ValueError("an unfrozen discriminator needs an optimizer")
        d_loss = discriminator_step(discriminator, hr, labels, opt_d)
        if not math.isfinite(d_loss):
            raise TrainingError(f"non-finite discriminator loss at {context}")

    discriminator.eval()
    flags = [p.requires_grad for p in discriminator.parameters()]
    for p in discriminator.parameters():
        p.requires_grad_(False)
    try:
        generator.train()
        sr = generator(lr)
        probs = discriminator(sr)
        parts = lcofl(probs, labels, sr, hr, weights, cfg.beta, mode="soft", use_layout=use_layout)
        _check_finite(parts.total, "generator loss", context)
        opt_g.zero_grad(set_to_none=True)
        parts.total.backward()
        opt_g.step()
    finally:
        for p, f in zip(discriminator.parameters(), flags):
            p.requires_grad_(f)
    return StepResult(LossBreakdown(*(t.detach() for t in (parts.l_c, parts.l_p, parts.l_s, parts.total))), d_loss)


@torch.no_grad()
def predict(ocr: OcrBase, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    """Class indices ``(N, 7)``; ties resolve to the lowest class index."""
    ocr.eval()
    out = [ocr(images[i : i + batch_size]).argmax(-1) for i in range(0, len(images), batch_size)]
    return torch.cat(out) if out else torch.empty(0, 7, dtype=torch.long)


@torch.no_grad()
def super_resolve(generator: Generator, lr: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    generator.eval()
    out = [generator(lr[i : i + batch_size]) for i in range(0, len(lr), batch_size)]
    return torch.cat(out) if out else torch.empty(0, 3, 32, 96)


def validate(generator: Generator, disc: OcrBase, split: TensorSplit) -> tuple[float, float, ConfusionMatrix]:
    """Recognition rate and character accuracy of the discriminator on SR images, plus the confusion matrix."""
    pred = predict(disc, super_resolve(generator, split.lr))
    texts = [ALPHABET.decode(row.tolist()) for row in pred]
    rr_all, _, _ = recognition_rates(zip(texts, split.texts))
    cm = ConfusionMatrix.from_indices(split.labels.numpy(), pred.numpy())
    return rr_all, char_accuracy(texts, split.texts), cm


def _shuffle(n: int, seed: int, stream: int, epoch: int) -> list[int]:
    return np.random.default_rng([seed, stream, epoch]).permutation(n).tolist()


def pretrain_ocr(
    ocr: OcrBase,
    images: torch.Tensor,
    labels: torch.Tensor,
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    stream: int = 1,
    lr_halving_every: int = 0,
) -> list[float]:
    """Plain cross-entropy training on labeled images; returns the mean loss per epoch."""
    opt = torch.optim.Adam(ocr.parameters(), lr=lr)
    losses = []
    for epoch in range(epochs):
        if lr_halving_every and epoch and epoch % lr_halving_every == 0:
            for g in opt.param_groups:
                g["lr"] *= 0.5
        order = _shuffle(len(images), seed, stream, epoch)
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            sel = torch.as_tensor(order[start : start + batch_size])
            total += discriminator_step(ocr, images[sel], labels[sel], opt) * len(sel)
            count += len(sel)
        losses.append(total / max(count, 1))
    ocr.eval()
    return losses


def rng_digest() -> str:
    return hashlib.sha256(torch.get_rng_state().numpy().tobytes()).hexdigest()[:16]


def _write_history(out_dir: Path, history: Sequence[EpochRecord]) -> None:
    with open(out_dir / "history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow(rec.csv_row())
    (out_dir / "history.json").write_text(json.dumps([asdict(r) for r in history], indent=1))


def _write_checkpoint(
    path: Path,
    generator: Generator,
    disc: OcrBase,
    state: TrainState,
    val_rr: float,
    snapshot: dict,
    extra: dict | None = None,
) -> None:
    path.mkdir(parents=True, exist_ok=True)
    save_weights(generator, path / "generator.pt")
    save_weights(disc, path / "discriminator.pt")
    (path / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True, default=str))
    meta = {
        "epoch": state.epoch,
        "val_recognition_rate": val_rr,
        "penalty_weights": state.penalty_weights.values.tolist(),
        "rng_state_digest": rng_digest(),
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2))
    if extra is not None:
        torch.save(extra, path / "trainer_state.pt")


@dataclass
class TrainResult:
    generator: Generator
    discriminator: OcrBase
    state: TrainState
    out_dir: Path | None


def _to_splits(data) -> tuple[TensorSplit, TensorSplit]:
    if isinstance(data, Manifest):
        train_split, val_split = load_split(data, "train"), load_split(data, "val")
    else:
        train_split, val_split = data
    if len(train_split) == 0 or len(val_split) == 0:
        raise TrainingError("training needs non-empty train and val splits")
    return train_split, val_split


def default_snapshot(cfg: TrainConfig, gen_cfg: GeneratorConfig, ocr_cfg: OcrConfig) -> dict:
    return {"train": asdict(cfg), "generator": asdict(gen_cfg), "discriminator": asdict(ocr_cfg)}


def train(
    data,
    cfg: TrainConfig = TrainConfig(),
    gen_cfg: GeneratorConfig = GeneratorConfig(),
    out_dir: str | Path | None = None,
    *,
    ocr_cfg: OcrConfig = OcrConfig.discriminator(),
    resume: str | Path | None = None,
    snapshot: dict | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of GAN-style training.

    ``data`` is a :class:`Manifest` or a ``(train, val)`` pair of tensor splits.
    With ``out_dir`` set, writes ``history.csv``, ``best/`` (on validation
    improvement) and ``last/`` (every epoch, resumable) checkpoints. ``snapshot``
    is an optional caller config stored under the ``run`` key of every
    ``config.json``.
    """
    train_split, val_split = _to_splits(data)
    variant = ablation_variant(cfg, gen_cfg)
    snapshot = {**default_snapshot(cfg, variant.generator, ocr_cfg), "run": snapshot or {}}
    out = Path(out_dir) if out_dir is not None else None

    torch.manual_seed(cfg.seed)
    generator = Generator(variant.generator)
    disc = build_ocr(ocr_cfg)
    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    state = TrainState.initial(cfg)

    if resume is not None:
        rdir = Path(resume)
        try:
            load_weights(generator, rdir / "generator.pt")
            load_weights(disc, rdir / "discriminator.pt")
            blob = torch.load(rdir / "trainer_state.pt", map_location="cpu", weights_only=False)
        except (FileNotFoundError, CheckpointError) as exc:
            raise TrainingError(f"cannot resume from {rdir}: {exc}") from exc
        if _resume_key(blob["snapshot"]) != _resume_key(snapshot):
            raise TrainingError(f"cannot resume from {rdir}: config differs from the checkpointed run")
        opt_g.load_state_dict(blob["opt_g"])
        opt_d.load_state_dict(blob["opt_d"])
        state = TrainState.from_json(blob["state"])
        torch.set_rng_state(blob["torch_rng"])
        log.info("resumed from %s at epoch %d", rdir, state.epoch)
    elif cfg.epochs > 0 and cfg.discriminator_warmup_epochs > 0:
        losses = pretrain_ocr(
            disc,
            train_split.hr,
            train_split.labels,
            epochs=cfg.discriminator_warmup_epochs,
            lr=cfg.discriminator_warmup_lr,
            batch_size=cfg.batch_size,
            seed=cfg.seed,
        )
        log.info("discriminator warm-up losses %s", ["%.4f" % l for l in losses])

    if out is not None and cfg.epochs > state.epoch:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True, default=str))

    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        for opt in (opt_g, opt_d):
            for g in opt.param_groups:
                g["lr"] = state.current_lr
        weights = state.penalty_weights.as_tensor()
        if not variant.update_weights:
            weights = torch.ones_like(weights)
        sums = np.zeros(4)
        d_sum, batches = 0.0, 0
        order = _shuffle(len(train_split), cfg.seed, 0, epoch)
        for step, batch in enumerate(train_split.batches(cfg.batch_size, order)):
            res = gan_step(
                batch, generator, disc, weights, cfg, opt_g, opt_d,
                freeze_discriminator=variant.freeze_discriminator,
                use_layout=variant.use_layout,
                context=f"epoch {epoch} step {step}",
            )
            d = res.generator_loss.as_dict()
            sums += [d["l_c"], d["l_p"], d["l_s"], d["total"]]
            if res.discriminator_loss is not None:
                d_sum += res.discriminator_loss
            batches += 1
        l_c, l_p, l_s, _ = sums / batches
        val_rr, val_acc, cm = validate(generator, disc, val_split)
        record = EpochRecord(
            epoch=epoch, l_c=l_c, l_p=l_p, l_s=l_s, total=l_c + l_p + l_s, val_rr=val_rr,
            lr=state.current_lr, d_loss=None if variant.freeze_discriminator else d_sum / batches,
            val_char_acc=val_acc,
        )
        improved = val_rr > state.best_val_rr
        if variant.update_weights:
            new_w = update_penalty_weights(state.penalty_weights, cm, cfg.alpha, cfg.loss_config().rule)
        else:
            new_w = state.penalty_weights
        record.weights_digest = new_w.digest()
        state = observe_validation(replace(state, epoch=epoch, penalty_weights=new_w), val_rr)
        state = lr_schedule(state, cfg)
        state.history = state.history + [record]
        log.info(
            "epoch %d: total %.4f (l_c %.4f l_p %.4f l_s %.4f) val_rr %.3f char %.3f lr %.2e",
            epoch, record.total, l_c, l_p, l_s, val_rr, val_acc, record.lr,
        )
        if out is not None:
            if improved:
                _write_checkpoint(out / "best", generator, disc, state, val_rr, snapshot)
            _write_checkpoint(
                out / "last", generator, disc, state, val_rr, snapshot,
                extra={
                    "opt_g": opt_g.state_dict(),
                    "opt_d": opt_d.state_dict(),
                    "state": state.to_json(),
                    "torch_rng": torch.get_rng_state(),
                    "snapshot": json.loads(json.dumps(snapshot, default=str)),
                },
            )
            _write_history(out, state.history)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(generator, disc, state, out)


def _resume_key(snapshot: dict) -> dict:
    # the epoch budget may grow on resume; everything else must match
    key = json.loads(json.dumps(snapshot, default=str))
    key["train"].pop("epochs", None)
    return key


def load_generator(ckpt_dir: str | Path) -> Generator:
    """Rebuild a generator from a checkpoint directory's config snapshot and weights."""
    ckpt_dir = Path(ckpt_dir)
    cfg_path = ckpt_dir / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"no config.json in {ckpt_dir}")
    snap = json.loads(cfg_path.read_text())
    gen = Generator(GeneratorConfig(**snap["generator"]))
    return load_weights(gen, ckpt_dir / "generator.pt")


def read_history(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
