"""Cosine geometry and softmax primitives shared by every stage.

All functions operate on float64 arrays. Zero-norm vectors are rejected
rather than silently normalized: a degenerate embedding always means
upstream corruption.
"""

from __future__ import annotations

import numpy as np


class DegenerateVectorError(ValueError):
    """Raised when a vector with (near-)zero norm enters cosine math."""


_NORM_EPS = 1e-300


def _check_norms(x: np.ndarray, name: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms <= _NORM_EPS):
        raise DegenerateVectorError(f"degenerate vector: zero norm in {name}")
    return norms


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between ``a`` and ``b``, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = _check_norms(a, "cosine_similarity a")
    nb = _check_norms(b, "cosine_similarity b")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cosine_similarity, in [0, 2]."""
    return 1.0 - cosine_similarity(a, b)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtraction along ``axis``)."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains NaN or Inf")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def unit_rows(x: np.ndarray, name: str = "embeddings") -> np.ndarray:
    """Rows of ``x`` scaled to unit L2 norm. Rejects zero-norm rows."""
    x = np.asarray(x, dtype=np.float64)
    norms = _check_norms(x, name)
    return x / norms[..., None]
