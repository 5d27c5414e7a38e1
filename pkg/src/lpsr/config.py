"""Run configuration: one structured file (TOML, YAML or JSON) plus overrides.

Precedence, lowest first: built-in defaults, the top-level ``seed``, values
from the file's sections, ``--set section.key=value`` overrides, and finally
the ``--seed`` flag. The ``LPSR_WORKDIR`` environment variable replaces
``paths.workdir``, and an explicit ``--set paths.workdir=...`` beats it.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from lpsr.data import DataConfig
from lpsr.evaluation import EvaluatorTraining
from lpsr.losses import LossConfig
from lpsr.models import GeneratorConfig, OcrConfig
from lpsr.trainer import AblationFlags, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

WORKDIR_ENV = "LPSR_WORKDIR"
_LOSS_KEYS = ("alpha", "beta", "w_max", "confusion_min_count", "confusion_min_fraction")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    workdir: str = "work"
    manifest: str = ""

    def resolve_manifest(self, data: DataConfig) -> Path:
        if self.manifest:
            return self.path(self.manifest)
        return self.data_dir(data) / "manifest.jsonl"

    def path(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.workdir) / p

    def data_dir(self, data: DataConfig) -> Path:
        return self.path(data.out_dir)

    @property
    def evaluator(self) -> Path:
        return Path(self.workdir) / "evaluator" / "evaluator.pt"

    @property
    def runs(self) -> Path:
        return Path(self.workdir) / "runs"


@dataclass(frozen=True)
class ModelConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: OcrConfig = field(default_factory=OcrConfig.discriminator)
    evaluator: OcrConfig = field(default_factory=OcrConfig.evaluator)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    evaluator_training: EvaluatorTraining = field(default_factory=EvaluatorTraining)
    paths: Paths = field(default_factory=Paths)

    def train_config(self) -> TrainConfig:
        """The trainer's view: loss hyperparameters come from the ``loss`` section."""
        return replace(self.train, **{k: getattr(self.loss, k) for k in _LOSS_KEYS})

    def to_dict(self) -> dict:
        d = _plain(asdict(self))
        for k in _LOSS_KEYS:
            d["train"].pop(k)
        return d

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self, seed=seed, data=replace(self.data, seed=seed), train=replace(self.train, seed=seed)
        )

    def with_ablation(self, flags: AblationFlags) -> "RunConfig":
        return replace(self, train=replace(self.train, ablation=flags))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str, default=None):
    origin = getattr(tp, "__origin__", None)
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table, got {type(value).__name__}")
        return _build(tp, value, where, default)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if origin is tuple:
        return tuple(value)
    return value


def _build(cls, raw: dict, where: str, base=None):
    """Apply ``raw`` on top of ``base`` (default ``cls()``), recursing into nested sections."""
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}; valid keys are {sorted(known)}")
    base = cls() if base is None else base
    kwargs = {
        k: _coerce(hints[k], v, f"{where}.{k}" if where else k, getattr(base, k)) for k, v in raw.items()
    }
    try:
        return replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def read_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".toml":
            return tomllib.loads(text)
        if path.suffix in (".yaml", ".yml"):
            return yaml.safe_load(text) or {}
        if path.suffix == ".json":
            return json.loads(text)
    except (tomllib.TOMLDecodeError, yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from exc
    raise ConfigError(f"{path}: unsupported config format {path.suffix!r} (use .toml, .yaml or .json)")


def _set_dotted(tree: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"bad override {text!r}; expected section.key=value")
    return key.strip(), yaml.safe_load(value) if value.strip() else ""


def load(path: str | Path | None = None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    """Build a :class:`RunConfig` following the precedence in the module docstring."""
    raw = read_file(path) if path else {}
    raw = json.loads(json.dumps(raw, default=str))
    for item in overrides:
        key, value = parse_override(item)
        _set_dotted(raw, key, value)

    train_raw = raw.get("train", {}) or {}
    clash = sorted(set(train_raw) & set(_LOSS_KEYS))
    if clash:
        raise ConfigError(f"train: {clash} belong in the [loss] section")

    top_seed = raw.get("seed", 0)
    for section in ("data", "train"):
        sec = raw.setdefault(section, {}) or {}
        raw[section] = sec
        sec.setdefault("seed", top_seed)
    env_workdir = os.environ.get(WORKDIR_ENV)
    if env_workdir and not any(o.strip().startswith("paths.workdir") for o in overrides):
        raw.setdefault("paths", {})["workdir"] = env_workdir

    cfg = _build(RunConfig, raw, "")
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def write_snapshot(cfg: RunConfig, directory: str | Path) -> Path:
    """Store the resolved config as JSON; ``load(that_file)`` rebuilds the same config."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "run_config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return path


def documented_keys() -> dict[str, dict[str, Any]]:
    """Every config key with its default, grouped by section (used by the README generator and tests)."""
    out: dict[str, dict[str, Any]] = {}

    def walk(obj, prefix):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if is_dataclass(v):
                walk(v, f"{prefix}{f.name}.")
            else:
                out.setdefault(prefix.rstrip(".") or "(top)", {})[f.name] = v

    walk(RunConfig(), "")
    return out
