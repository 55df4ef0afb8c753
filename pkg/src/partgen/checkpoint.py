"""Versioned checkpoint container shared by the generator and the blender."""
from __future__ import annotations

from pathlib import Path

import torch

FORMAT_NAME = "partgen-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, kind: str, **payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": kind, **payload}, path)


def load_checkpoint(path, kind: str | None = None) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as e:  # torch raises a zoo of unpickling errors
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if not isinstance(ckpt, dict) or ckpt.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path}: not a partgen checkpoint")
    if ckpt.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    if kind is not None and ckpt.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {ckpt.get('kind')}")
    return ckpt
