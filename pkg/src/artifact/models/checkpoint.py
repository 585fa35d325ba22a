"""Versioned checkpoint container (architecture config + tensors + counters)."""

from __future__ import annotations

from pathlib import Path
from typing import Any

import torch

FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, payload: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"format_version": FORMAT_VERSION, **payload}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(doc, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    doc = torch.load(path, map_location="cpu", weights_only=False)
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version!r} in {path}")
    return doc


def export_generator(src: str | Path, dst: str | Path) -> Path:
    """Strip optimiser/critic state, keeping what inference needs."""
    doc = load_checkpoint(src)
    if "generator" not in doc:
        raise ValueError(f"{src} holds no generator")
    return save_checkpoint(
        dst,
        {
            "kind": "inference",
            "generator_config": doc["generator_config"],
            "generator": doc["generator"],
            "step": doc.get("step", 0),
            "phase": doc.get("phase"),
            # provenance only, used to label evaluation rows
            "critic_config": doc.get("critic_config"),
            "train_config": doc.get("train_config"),
        },
    )


def load_generator(path: str | Path):
    from .generator import build_generator

    doc = load_checkpoint(path)
    gen = build_generator(doc["generator_config"])
    gen.load_state_dict(doc["generator"])
    return gen.eval(), doc
