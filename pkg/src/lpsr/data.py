"""Synthetic plate rendering, LR/HR pair construction and dataset manifests.

Images are ``H x W x 3`` float arrays in ``[0, 1]``. HR plates are 32x96 and
their degraded LR counterparts 16x48.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw, ImageFont

from lpsr.alphabet import ALPHABET, LAYOUTS, InvalidLabelError, LpLabel, get_layout
from lpsr.losses import ssim_numpy

log = logging.getLogger(__name__)

HR_SIZE = (32, 96)
LR_SIZE = (16, 48)
GRAY = 0.5
SPLITS = ("train", "val", "test")

_FONT_CANDIDATES = (
    "/usr/share/fonts/truetype/dejavu/DejaVuSansMono-Bold.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSansMono.ttf",
    "/Library/Fonts/Courier New Bold.ttf",
    "C:/Windows/Fonts/courbd.ttf",
)


class DegradationError(RuntimeError):
    def __init__(self, last_ssim: float, iterations: int):
        super().__init__(f"SSIM still {last_ssim:.4f} after {iterations} degradation iterations")
        self.last_ssim = last_ssim
        self.iterations = iterations


class ManifestError(RuntimeError):
    pass


@dataclass(frozen=True)
class LpSample:
    id: str
    lr: np.ndarray
    hr: np.ndarray
    label: LpLabel
    degradation_ssim: float


@dataclass(frozen=True)
class RenderStyle:
    """Appearance knobs for the synthetic renderer.

    ``palettes`` holds (plate, text) RGB pairs in 0-255; one is drawn per plate.
    """

    palettes: tuple[tuple[tuple[int, int, int], tuple[int, int, int]], ...] = (
        ((200, 200, 200), (20, 20, 20)),
        ((225, 222, 210), (30, 30, 30)),
        ((170, 30, 30), (235, 235, 235)),
        ((235, 235, 235), (15, 15, 15)),
    )
    band: tuple[int, int, int] | None = None
    brightness: tuple[float, float] = (0.7, 1.15)
    max_rotation_deg: float = 2.0
    max_shear: float = 0.05
    max_shift_px: float = 3.0
    canvas: tuple[int, int] = (128, 400)

    @classmethod
    def for_layout(cls, layout: str) -> "RenderStyle":
        if layout == "mercosur":
            return cls(
                palettes=(((240, 240, 240), (10, 10, 10)), ((228, 228, 220), (25, 25, 25))),
                band=(20, 60, 160),
            )
        get_layout(layout)
        return cls()


def _load_font(size: int) -> ImageFont.ImageFont:
    for path in _FONT_CANDIDATES:
        if os.path.exists(path):
            return ImageFont.truetype(path, size)
    return ImageFont.load_default(size=size)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    return to_uint8(img).astype(np.float64) / 255.0


def resize_bicubic(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bicubic resize of an ``H x W x 3`` array, antialiased when shrinking. Not clamped."""
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64)).permute(2, 0, 1)[None]
    shrink = size[0] < t.shape[-2] or size[1] < t.shape[-1]
    out = F.interpolate(t, size=size, mode="bicubic", align_corners=False, antialias=shrink)
    return out[0].permute(1, 2, 0).numpy()


def render_plate(label: LpLabel, style: RenderStyle | None = None, rng_seed: int = 0) -> np.ndarray:
    """Render a 32x96 plate showing exactly the 7 characters of ``label``."""
    if not isinstance(label, LpLabel):
        raise InvalidLabelError(f"expected LpLabel, got {type(label).__name__}")
    style = style or RenderStyle.for_layout(label.layout)
    rng = np.random.default_rng(rng_seed)
    h, w = style.canvas
    plate_rgb, text_rgb = style.palettes[rng.integers(len(style.palettes))]

    img = Image.new("RGB", (w, h), plate_rgb)
    draw = ImageDraw.Draw(img)
    top = 0
    if style.band is not None:
        top = int(h * 0.2)
        draw.rectangle([0, 0, w, top], fill=style.band)
    draw.rectangle([1, 1, w - 2, h - 2], outline=text_rgb, width=3)

    font = _load_font(int((h - top) * 0.62))
    margin = w * 0.05
    slot = (w - 2 * margin) / 7
    cy = top + (h - top) / 2
    for i, ch in enumerate(label.text):
        cx = margin + slot * (i + 0.5)
        draw.text((cx, cy), ch, fill=text_rgb, font=font, anchor="mm")

    rot = rng.uniform(-style.max_rotation_deg, style.max_rotation_deg)
    shear = rng.uniform(-style.max_shear, style.max_shear)
    dx, dy = rng.uniform(-style.max_shift_px, style.max_shift_px, size=2)
    c, s = math.cos(math.radians(rot)), math.sin(math.radians(rot))
    # inverse map (output -> input) about the canvas center
    ox, oy = w / 2, h / 2
    a, b = c, -s + shear
    d, e = s, c
    coeffs = (a, b, ox - a * ox - b * oy + dx, d, e, oy - d * ox - e * oy + dy)
    img = img.transform((w, h), Image.AFFINE, coeffs, resample=Image.BILINEAR, fillcolor=plate_rgb)

    arr = np.asarray(img, dtype=np.float64) / 255.0
    arr = np.clip(arr * rng.uniform(*style.brightness), 0.0, 1.0)
    arr = pad_to_aspect(arr, HR_SIZE[1] / HR_SIZE[0], GRAY)
    return np.clip(resize_bicubic(arr, HR_SIZE), 0.0, 1.0)


def pad_to_aspect(img: np.ndarray, target_aspect: float, fill: float = GRAY) -> np.ndarray:
    """Pad (never crop) the shorter axis with ``fill`` so width/height matches ``target_aspect``.

    Content stays centered; odd padding puts the extra pixel on the right/bottom.
    """
    if target_aspect <= 0:
        raise ValueError("target_aspect must be positive")
    h, w = img.shape[:2]
    if w / h < target_aspect:
        new_h, new_w = h, int(round(h * target_aspect))
    else:
        new_h, new_w = int(round(w / target_aspect)), w
    new_h, new_w = max(new_h, h), max(new_w, w)
    if (new_h, new_w) == (h, w):
        return img.copy()
    out = np.full((new_h, new_w) + img.shape[2:], fill, dtype=np.result_type(img, np.float64))
    top = (new_h - h) // 2
    left = (new_w - w) // 2
    out[top : top + h, left : left + w] = img
    return out


def degrade(
    hr: np.ndarray,
    threshold: float = 0.1,
    max_iters: int = 50,
    rng_seed: int = 0,
    sigma_range: tuple[float, float] = (0.01, 0.05),
    quantize_lr: bool = True,
    shrink: float = 0.9,
) -> tuple[np.ndarray, float]:
    """Degrade a 32x96 plate until SSIM against it drops below ``threshold``.

    Iteration ``t`` adds zero-mean Gaussian noise (sigma drawn from
    ``sigma_range``) and then runs a bicubic down/up round trip through
    ``0.5 * shrink**t`` of the HR size (never below 2x6), clamping after each
    step. A fixed x1/2 round trip is nearly idempotent and plateaus around
    SSIM 0.4 on clean renders, hence the shrinking scale; ``shrink=1`` gives
    the fixed round trip. The LR candidate is the working image resized to
    16x48 (8-bit quantized by default), and SSIM is measured between its
    bicubic upscale and ``hr`` so that re-upscaling the returned LR reproduces
    the returned score exactly.
    """
    if hr.shape[:2] != HR_SIZE:
        raise ValueError(f"hr must be {HR_SIZE[0]}x{HR_SIZE[1]}, got {hr.shape[:2]}")
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    if not 0 < shrink <= 1:
        raise ValueError("shrink must lie in (0, 1]")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    rng = np.random.default_rng(rng_seed)
    hr = np.asarray(hr, dtype=np.float64)
    x = hr
    score = 1.0
    for t in range(max_iters):
        sigma = rng.uniform(*sigma_range)
        x = np.clip(x + rng.normal(0.0, sigma, size=x.shape), 0.0, 1.0)
        scale = 0.5 * shrink**t
        mid = (max(2, round(HR_SIZE[0] * scale)), max(6, round(HR_SIZE[1] * scale)))
        x = np.clip(resize_bicubic(np.clip(resize_bicubic(x, mid), 0.0, 1.0), HR_SIZE), 0.0, 1.0)
        lr = np.clip(resize_bicubic(x, LR_SIZE), 0.0, 1.0)
        if quantize_lr:
            lr = quantize(lr)
        score = ssim_numpy(upscale_lr(lr), hr)
        if score < threshold:
            return lr, score
    raise DegradationError(score, max_iters)


def upscale_lr(lr: np.ndarray) -> np.ndarray:
    return np.clip(resize_bicubic(lr, HR_SIZE), 0.0, 1.0)


@dataclass
class DataConfig:
    out_dir: str = "data"
    num_plates: int = 650
    layout_fractions: dict[str, float] = field(default_factory=lambda: {"brazilian": 0.5, "mercosur": 0.5})
    split_fractions: dict[str, float] = field(default_factory=lambda: {"train": 500 / 650, "val": 50 / 650, "test": 100 / 650})
    seed: int = 0
    threshold: float = 0.1
    max_iters: int = 50
    sigma_min: float = 0.01
    sigma_max: float = 0.05
    shrink: float = 0.9
    max_redraws: int = 5
    workers: int = 1


def _split_counts(n: int, fractions: dict[str, float]) -> dict[str, int]:
    if set(fractions) - set(SPLITS):
        raise ValueError(f"unknown splits {sorted(set(fractions) - set(SPLITS))}")
    if abs(sum(fractions.values()) - 1.0) > 1e-6:
        raise ValueError(f"split fractions sum to {sum(fractions.values())}, not 1")
    counts = {s: int(math.floor(n * fractions.get(s, 0.0) + 1e-9)) for s in SPLITS}
    # largest remainder keeps the total at n
    rem = sorted(SPLITS, key=lambda s: -(n * fractions.get(s, 0.0) - counts[s]))
    for s in rem[: n - sum(counts.values())]:
        counts[s] += 1
    return counts


def _layout_counts(n: int, fractions: dict[str, float]) -> dict[str, int]:
    for k in fractions:
        get_layout(k)
    total = sum(fractions.values())
    counts = {k: int(math.floor(n * v / total)) for k, v in fractions.items()}
    keys = list(fractions)
    for i in range(n - sum(counts.values())):
        counts[keys[i % len(keys)]] += 1
    return counts


def make_sample(sample_id: str, label: LpLabel, seed: int, cfg: DataConfig) -> tuple[LpSample, int]:
    """Render and degrade one plate; the RNG stream depends only on ``seed``.

    A render that ``degrade`` cannot push under the threshold is redrawn from
    the next child seed, up to ``cfg.max_redraws`` times. Returns the sample
    and the number of redraws used.
    """
    ss = np.random.SeedSequence(seed)
    last: DegradationError | None = None
    for attempt, child in enumerate(ss.spawn(cfg.max_redraws + 1)):
        render_seed, degrade_seed = (int(s.generate_state(1)[0]) for s in child.spawn(2))
        hr = quantize(render_plate(label, RenderStyle.for_layout(label.layout), render_seed))
        try:
            lr, score = degrade(
                hr, cfg.threshold, cfg.max_iters, degrade_seed, (cfg.sigma_min, cfg.sigma_max), shrink=cfg.shrink
            )
        except DegradationError as exc:
            last = exc
            continue
        return LpSample(sample_id, lr, hr, label, score), attempt
    raise DegradationError(last.last_ssim, last.iterations)


def _sample_seed(global_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


def _build_one(args):
    index, sample_id, label, seed, cfg, out = args
    try:
        sample, redraws = make_sample(sample_id, label, seed, cfg)
    except DegradationError as exc:
        raise ManifestError(f"sample {sample_id} ({label.text}): {exc}") from exc
    lr_rel, hr_rel = f"lr/{sample_id}.png", f"hr/{sample_id}.png"
    save_png(sample.lr, out / lr_rel)
    save_png(sample.hr, out / hr_rel)
    return index, lr_rel, hr_rel, sample.degradation_ssim, redraws


def build_dataset(cfg: DataConfig) -> "Manifest":
    """Render, degrade and write ``cfg.num_plates`` samples plus ``manifest.jsonl``."""
    out = Path(cfg.out_dir)
    try:
        (out / "lr").mkdir(parents=True, exist_ok=True)
        (out / "hr").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ManifestError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ManifestError(f"output directory {out} is not writable")
    split_counts = _split_counts(cfg.num_plates, cfg.split_fractions)
    layout_counts = _layout_counts(cfg.num_plates, cfg.layout_fractions)

    rng = np.random.default_rng(cfg.seed)
    layouts = [k for k, c in layout_counts.items() for _ in range(c)]
    layouts = [layouts[i] for i in rng.permutation(len(layouts))]
    splits = [s for s in SPLITS for _ in range(split_counts[s])]
    seen: set[str] = set()
    jobs = []
    for i, layout in enumerate(layouts):
        text = LAYOUTS[layout].random_text(rng)
        while text in seen:
            text = LAYOUTS[layout].random_text(rng)
        seen.add(text)
        sid = f"{i:06d}"
        jobs.append((i, sid, LpLabel(text, layout), _sample_seed(cfg.seed, i), cfg, out))

    if cfg.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_build_one, jobs, chunksize=16))
    else:
        results = [_build_one(j) for j in jobs]

    entries = []
    redraws = 0
    for (i, sid, label, *_), (_, lr_rel, hr_rel, score, n) in zip(jobs, sorted(results)):
        redraws += n
        entries.append(
            ManifestEntry(sid, lr_rel, hr_rel, label.text, label.layout, splits[i], float(score))
        )
    manifest = Manifest(entries, seed=cfg.seed, root=out)
    manifest.write(out / "manifest.jsonl", extra={"redraws": redraws, "config": asdict(cfg)})
    log.info("wrote %d samples to %s (%s, %d redraws)", len(entries), out, split_counts, redraws)
    return manifest


def render_pool(n: int, seed: int, layouts: Sequence[str] = ("brazilian", "mercosur")) -> tuple[np.ndarray, list[str]]:
    """``n`` clean HR renders with random labels, alternating layouts; no degradation.

    Used to train the held-out evaluation OCR on plates that never appear in a
    super-resolution manifest. Returns an ``(n, 32, 96, 3)`` array and the texts.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    imgs, texts = [], []
    for i in range(n):
        layout = layouts[i % len(layouts)]
        text = LAYOUTS[layout].random_text(rng)
        label = LpLabel(text, layout)
        imgs.append(quantize(render_plate(label, RenderStyle.for_layout(layout), _sample_seed(seed, i))))
        texts.append(text)
    return np.stack(imgs) if imgs else np.zeros((0,) + HR_SIZE + (3,)), texts


def save_png(img: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    lr_path: str
    hr_path: str
    text: str
    layout: str
    split: str
    ssim: float

    @property
    def label(self) -> LpLabel:
        return LpLabel(self.text, self.layout)


class Manifest:
    """JSON-lines index of LR/HR pairs; relative paths resolve against ``root``."""

    def __init__(self, entries: Sequence[ManifestEntry], seed: int = 0, root: str | Path = "."):
        self.entries = list(entries)
        self.seed = seed
        self.root = Path(root)

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def write(self, path: str | Path, extra: dict | None = None) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")
        meta = {"seed": self.seed, "count": len(self.entries), **(extra or {})}
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def read(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"manifest not found: {path}")
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                    entries.append(ManifestEntry(**{k: raw[k] for k in ManifestEntry.__dataclass_fields__}))
                except (KeyError, TypeError, json.JSONDecodeError) as exc:
                    raise ManifestError(f"{path}:{lineno}: malformed entry ({exc})") from exc
        seed = 0
        meta = path.with_suffix(".meta.json")
        if meta.exists():
            seed = json.loads(meta.read_text()).get("seed", 0)
        return cls(entries, seed=seed, root=path.parent)

    def validate(self) -> None:
        """Check split disjointness, label validity, and on-disk image sizes."""
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ManifestError("duplicate sample ids across the manifest")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ManifestError(f"{e.id}: unknown split {e.split!r}")
            e.label  # raises on invalid labels
            for rel, size in ((e.lr_path, LR_SIZE), (e.hr_path, HR_SIZE)):
                p = self.root / rel
                if not p.exists():
                    raise ManifestError(f"{e.id}: missing file {p}")
                with Image.open(p) as im:
                    if (im.height, im.width) != size:
                        raise ManifestError(f"{e.id}: {rel} is {im.height}x{im.width}, expected {size}")

    def load(self, entry: ManifestEntry) -> LpSample:
        try:
            lr = load_png(self.root / entry.lr_path)
            hr = load_png(self.root / entry.hr_path)
        except (OSError, ValueError) as exc:
            raise ManifestError(f"failed to load sample {entry.id}: {exc}") from exc
        return LpSample(entry.id, lr, hr, entry.label, entry.ssim)


@dataclass
class TensorSplit:
    """A split held in memory as ``(N, 3, H, W)`` float32 tensors plus encoded labels."""

    ids: list[str]
    lr: torch.Tensor
    hr: torch.Tensor
    labels: torch.Tensor
    texts: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def batches(self, batch_size: int, order: Iterable[int] | None = None):
        idx = list(range(len(self)) if order is None else order)
        for start in range(0, len(idx), batch_size):
            sel = torch.as_tensor(idx[start : start + batch_size])
            yield self.lr[sel], self.hr[sel], self.labels[sel]


def load_split(manifest: Manifest, split: str) -> TensorSplit:
    entries = manifest.split(split)
    samples = [manifest.load(e) for e in entries]

    def stack(arrs):
        if not arrs:
            return torch.empty(0)
        return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).float().contiguous()

    labels = torch.tensor([ALPHABET.encode(s.label.text) for s in samples], dtype=torch.long)
    return TensorSplit(
        ids=[s.id for s in samples],
        lr=stack([s.lr for s in samples]),
        hr=stack([s.hr for s in samples]),
        labels=labels.reshape(len(samples), 7),
        texts=[s.label.text for s in samples],
    )


def ingest_pairs(pairs: Iterable[tuple[str, str, str, str]], out_dir: str | Path, seed: int = 0) -> Manifest:
    """Build a manifest from external ``(id, lr_path, hr_path, text)`` records.

    Both images are padded to aspect 3 with gray and resized to 16x48 / 32x96.
    """
    from lpsr.alphabet import infer_layout

    out = Path(out_dir)
    entries = []
    for sid, lr_path, hr_path, text in pairs:
        label = LpLabel(text, infer_layout(text))
        hr = quantize(np.clip(resize_bicubic(pad_to_aspect(load_png(hr_path), 3.0), HR_SIZE), 0, 1))
        lr = quantize(np.clip(resize_bicubic(pad_to_aspect(load_png(lr_path), 3.0), LR_SIZE), 0, 1))
        save_png(hr, out / "hr" / f"{sid}.png")
        save_png(lr, out / "lr" / f"{sid}.png")
        score = ssim_numpy(upscale_lr(lr), hr)
        entries.append(ManifestEntry(sid, f"lr/{sid}.png", f"hr/{sid}.png", label.text, label.layout, "test", score))
    manifest = Manifest(entries, seed=seed, root=out)
    manifest.write(out / "manifest.jsonl")
    return manifest
