"""Deterministic randomness.

One 64-bit seed fully determines every stream. Parallel or staged code
never shares a generator; it derives independent child streams with
``split_seed`` so the draw order of one stage cannot perturb another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator for ``seed``; identical seed, identical stream."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def split_seed(seed: int, *tags: int | str) -> int:
    """Derive a child seed from ``seed`` and a tag path.

    Hash-based so child streams are independent of each other and of the
    parent stream position.
    """
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def spawn_rngs(seed: int, n: int, *tags: int | str) -> list[np.random.Generator]:
    """``n`` independent generators derived from ``seed`` and a tag path."""
    return [make_rng(split_seed(seed, *tags, i)) for i in range(n)]
