"""Minimal dense numeric kernel shared by every other module.

Vectors and matrices are plain float64 numpy arrays (1-D and 2-D,
row-major). Randomness always flows through an explicitly seeded
``numpy.random.Generator`` so that identical seeds give bit-identical
streams.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

__all__ = [
    "make_rng",
    "derived_seed",
    "as_vector",
    "as_matrix",
    "matvec",
    "rank1_update",
    "power_iteration",
    "l2_norm",
    "sign",
    "clip_box",
]


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; same seed, same stream."""
    return np.random.default_rng(seed)


def derived_seed(*parts) -> int:
    """Stable 64-bit seed derived from arbitrary labelled parts.

    Used to give independent sub-tasks (attack cells, calibration,
    spectral probes) their own reproducible streams without relying on
    Python's salted ``hash``.
    """
    h = hashlib.sha256("\x1f".join(repr(p) for p in parts).encode())
    return int.from_bytes(h.digest()[:8], "big")


def as_vector(v, name: str = "v") -> np.ndarray:
    """Coerce to a 1-D float64 array, rejecting empty or non-finite input."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a nonempty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(A, name: str = "A") -> np.ndarray:
    arr = np.asarray(A, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{name} must be a nonempty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def matvec(A: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Matrix-vector product with an explicit dimension check."""
    A = np.asarray(A, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if A.ndim != 2 or v.ndim != 1 or A.shape[1] != v.shape[0]:
        raise ValueError(f"matvec dimension mismatch: {A.shape} @ {v.shape}")
    return A @ v


def rank1_update(B: np.ndarray, col: np.ndarray, row: np.ndarray, scale: float) -> np.ndarray:
    """Return ``B + scale * outer(col, row)`` as a new matrix."""
    B = np.asarray(B, dtype=np.float64)
    col = np.asarray(col, dtype=np.float64)
    row = np.asarray(row, dtype=np.float64)
    if B.shape != (col.shape[0], row.shape[0]):
        raise ValueError(
            f"rank1_update dimension mismatch: B {B.shape}, col {col.shape}, row {row.shape}"
        )
    if not np.isfinite(scale):
        raise ValueError(f"rank1_update scale must be finite, got {scale}")
    return B + scale * np.outer(col, row)


def power_iteration(
    apply: Callable[[np.ndarray], np.ndarray],
    dim: int,
    iters: int,
    rng: np.random.Generator,
) -> float:
    """Dominant-eigenvalue magnitude estimate for a linear map.

    Runs ``iters`` power steps from a random unit start and returns the
    magnitude of the last Rayleigh quotient. For non-symmetric maps this
    is an estimate of the spectral radius, not an exact value.
    """
    if dim < 1:
        raise ValueError(f"power_iteration needs dim >= 1, got {dim}")
    if iters < 1:
        raise ValueError(f"power_iteration needs iters >= 1, got {iters}")
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = np.asarray(apply(v), dtype=np.float64)
        if w.shape != (dim,):
            raise ValueError(f"linear map returned shape {w.shape}, expected ({dim},)")
        lam = float(v @ w)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
    return abs(lam)


def l2_norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


def sign(v: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = 0."""
    return np.sign(np.asarray(v, dtype=np.float64))


def clip_box(v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Elementwise clamp of ``v`` into [lo, hi]."""
    return np.clip(np.asarray(v, dtype=np.float64), lo, hi)
