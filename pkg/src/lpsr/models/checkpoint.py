"""Weight serialization with config and shape validation before any mutation."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch
import torch.nn as nn

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _config_of(model: nn.Module) -> dict | None:
    cfg = getattr(model, "cfg", None)
    return asdict(cfg) if cfg is not None else None


def save_weights(model: nn.Module, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": FORMAT_VERSION,
            "class": type(model).__name__,
            "config": _config_of(model),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_weights(model: nn.Module, path: str | Path) -> nn.Module:
    """Load ``path`` into ``model`` in place; raises before touching ``model`` on any mismatch."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {blob.get('format')!r}")
    if blob.get("class") != type(model).__name__:
        raise CheckpointError(f"{path}: holds a {blob.get('class')}, not a {type(model).__name__}")
    if blob.get("config") != _config_of(model):
        raise CheckpointError(f"{path}: config {blob.get('config')} differs from model config {_config_of(model)}")
    state = blob["state_dict"]
    own = model.state_dict()
    if set(state) != set(own):
        missing = sorted(set(own) - set(state))[:3]
        extra = sorted(set(state) - set(own))[:3]
        raise CheckpointError(f"{path}: parameter names differ (missing {missing}, unexpected {extra})")
    for k, v in state.items():
        if v.shape != own[k].shape:
            raise CheckpointError(f"{path}: {k} has shape {tuple(v.shape)}, expected {tuple(own[k].shape)}")
    model.load_state_dict(state)
    return model
