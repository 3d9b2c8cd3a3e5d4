"""Synthetic 2-class datasets and an IDX image loader.

All inputs live in the unit box [0, 1]^l (attacks clamp there). The 2-D
generators pad to l dimensions, mix through a seeded random rotation and
min-max rescale into the box, so the geometry survives an affine map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkit

KINDS = ("blobs", "moons", "rings")


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, l) float64 in [0, 1]
    labels: np.ndarray  # (n,) int
    train_idx: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    dev_idx: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    test_idx: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError("inputs must be (n, l) with one label per row")
        if np.min(self.inputs) < 0.0 or np.max(self.inputs) > 1.0:
            raise ValueError("inputs must lie in [0, 1]")
        all_idx = np.concatenate([self.train_idx, self.dev_idx, self.test_idx])
        if len(np.unique(all_idx)) != len(all_idx):
            raise ValueError("splits overlap")
        if sorted(all_idx.tolist()) != list(range(len(self.inputs))):
            raise ValueError("splits must cover every example exactly once")

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_classes(self) -> int:
        return int(np.max(self.labels)) + 1

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "dev": self.dev_idx, "test": self.test_idx}[name]
        return self.inputs[idx], self.labels[idx]


def _split_indices(n: int, test_frac: float, dev_frac: float, rng=None) -> tuple:
    """Disjoint covering train/dev/test splits; dev is a fraction of the non-test part."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    n_test = int(round(n * test_frac))
    n_dev = int(round((n - n_test) * dev_frac))
    test = order[n - n_test:]
    dev = order[n - n_test - n_dev: n - n_test]
    train = order[: n - n_test - n_dev]
    return np.sort(train), np.sort(dev), np.sort(test)


def _two_class_points(kind: str, n: int, noise: float, rng) -> tuple[np.ndarray, np.ndarray]:
    n0 = n // 2
    n1 = n - n0
    if kind == "blobs":
        c0, c1 = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
        pts = np.vstack([
            c0 + noise * rng.standard_normal((n0, 2)),
            c1 + noise * rng.standard_normal((n1, 2)),
        ])
    elif kind == "moons":
        t0 = rng.uniform(0.0, np.pi, n0)
        t1 = rng.uniform(0.0, np.pi, n1)
        outer = np.column_stack([np.cos(t0), np.sin(t0)])
        inner = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
        pts = np.vstack([outer, inner]) + noise * rng.standard_normal((n, 2))
    elif kind == "rings":
        t0 = rng.uniform(0.0, 2.0 * np.pi, n0)
        t1 = rng.uniform(0.0, 2.0 * np.pi, n1)
        outer = np.column_stack([np.cos(t0), np.sin(t0)])
        inner = 0.45 * np.column_stack([np.cos(t1), np.sin(t1)])
        pts = np.vstack([outer, inner]) + noise * rng.standard_normal((n, 2))
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    labels = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    return pts, labels


def gen_synthetic(
    kind: str,
    n: int,
    noise: float,
    l: int,
    seed: int,
    test_frac: float = 0.2,
    dev_frac: float = 0.2,
) -> Dataset:
    """Two-class synthetic set embedded and rescaled into [0, 1]^l."""
    if n < 10:
        raise ValueError("n must be >= 10")
    if l < 2:
        raise ValueError("l must be >= 2")
    rng = numkit.make_rng(seed)
    pts2, labels = _two_class_points(kind, n, noise, rng)
    padded = np.zeros((n, l))
    padded[:, :2] = pts2
    q, r = np.linalg.qr(rng.standard_normal((l, l)))
    q = q * np.sign(np.diag(r))  # fix the QR sign ambiguity
    mixed = padded @ q.T
    lo = mixed.min(axis=0)
    hi = mixed.max(axis=0)
    span = hi - lo
    flat = span == 0.0
    span[flat] = 1.0
    scaled = (mixed - lo) / span
    scaled[:, flat] = 0.5
    perm = rng.permutation(n)
    scaled, labels = scaled[perm], labels[perm]
    train, dev, test = _split_indices(n, test_frac, dev_frac)
    return Dataset(inputs=scaled, labels=labels, train_idx=train, dev_idx=dev, test_idx=test)


IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"truncated IDX file while reading {what}")
    return data


def load_idx(
    images_path: str | Path,
    labels_path: str | Path,
    limit: int,
    test_frac: float = 0.2,
    dev_frac: float = 0.2,
) -> Dataset:
    """Load an IDX image/label pair (big-endian, uint8 pixels scaled to [0, 1])."""
    if limit < 1:
        raise ValueError("limit must be >= 1 (empty dataset)")
    with open(images_path, "rb") as fh:
        magic, n_img, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"bad image magic 0x{magic:08x}")
        n_use = min(limit, n_img)
        raw = _read_exact(fh, n_use * rows * cols, "image data")
    with open(labels_path, "rb") as fh:
        magic, n_lab = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"bad label magic 0x{magic:08x}")
        if n_lab != n_img:
            raise ValueError(f"image/label count mismatch: {n_img} vs {n_lab}")
        labels_raw = _read_exact(fh, n_use, "label data")
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    inputs = pixels.reshape(n_use, rows * cols)
    labels = np.frombuffer(labels_raw, dtype=np.uint8).astype(int)
    train, dev, test = _split_indices(n_use, test_frac, dev_frac)
    return Dataset(inputs=inputs, labels=labels, train_idx=train, dev_idx=dev, test_idx=test)
