"""Embedding perturbation: mix every vector with a deranged partner."""

from __future__ import annotations

import numpy as np

from ..core import InvalidInputError, normalize_rows


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation with no fixed point (rejection sampling)."""
    if n < 2:
        raise InvalidInputError("a derangement needs at least 2 elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def perturb(embeddings: np.ndarray, w: float, seed: int = 0, renormalize: bool = False) -> np.ndarray:
    """Return ``(1 - w) * e_i + w * e_pi(i)`` for a seeded derangement ``pi``."""
    if not 0.0 <= w <= 1.0:
        raise InvalidInputError(f"mix weight must lie in [0, 1], got {w}")
    emb = np.asarray(embeddings, dtype=np.float32)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise InvalidInputError("perturbation needs at least 2 embeddings")
    if w == 0.0:
        out = emb.copy()
    elif w == 1.0:
        out = emb[derangement(emb.shape[0], np.random.default_rng(seed))].copy()
    else:
        perm = derangement(emb.shape[0], np.random.default_rng(seed))
        out = ((1.0 - w) * emb + w * emb[perm]).astype(np.float32)
    return normalize_rows(out) if renormalize else out
