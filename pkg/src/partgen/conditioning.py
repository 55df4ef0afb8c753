"""Condition embedders: anything mapping a text to a fixed-width vector.

The built-in embedder is a hashed bag of words; an external encoder (for
example a CLIP text tower) can be used instead as long as it exposes ``dim``
and ``__call__(text) -> np.ndarray``.
"""
from __future__ import annotations

import hashlib
import re

import numpy as np


class HashedBagOfWords:
    """Deterministic signed feature hashing of lower-cased word tokens, L2-normalized."""

    kind = "hashed-bow"

    def __init__(self, dim: int = 64):
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for tok in re.findall(r"[a-z0-9]+", text.lower()):
            h = int.from_bytes(hashlib.sha1(tok.encode()).digest()[:8], "little")
            v[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        n = np.linalg.norm(v)
        return v / n if n > 0 else v

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dim": self.dim}


def embedder_from_dict(d: dict | None):
    if not d:
        return None
    if d.get("kind") != HashedBagOfWords.kind:
        raise ValueError(f"unknown condition embedder {d.get('kind')!r}")
    return HashedBagOfWords(int(d["dim"]))
