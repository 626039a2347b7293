"""Seeded synthetic datasets for experiments and tests."""

from __future__ import annotations

import numpy as np

from .model import Dataset
from .rng import make_rng


def make_synthetic_classification(
    n_classes: int = 10,
    n_per_class: int = 200,
    spread: float = 0.15,
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Gaussian blobs on the unit circle, split 80/20 per class.

    Class ``c`` is centered at angle ``2*pi*c / n_classes`` on the unit
    circle; points are the center plus isotropic Gaussian noise with the
    given spread.  Returns (train, test) with an exact per-class 80/20
    stratification, each split shuffled with the same seeded stream.
    """
    if n_classes < 2 or n_per_class < 2:
        raise ValueError("need at least 2 classes and 2 points per class")
    if not spread > 0:
        raise ValueError(f"spread must be > 0, got {spread}")
    rng = make_rng(seed)
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centers = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    train_x, train_y, test_x, test_y = [], [], [], []
    n_train_c = int(round(0.8 * n_per_class))
    for c in range(n_classes):
        pts = centers[c] + rng.normal(0.0, spread, size=(n_per_class, 2))
        train_x.append(pts[:n_train_c])
        test_x.append(pts[n_train_c:])
        train_y.append(np.full(n_train_c, c, dtype=np.int64))
        test_y.append(np.full(n_per_class - n_train_c, c, dtype=np.int64))

    def _pack(xs, ys, split):
        x = np.concatenate(xs).astype(np.float32)
        y = np.concatenate(ys)
        order = rng.permutation(len(y))
        return Dataset(x[order], y[order], task="classification", name="blobs", split=split)

    return _pack(train_x, train_y, "train"), _pack(test_x, test_y, "strong_test")


def make_synthetic_regression(
    n: int = 1000,
    noise: float = 0.05,
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Smooth 2-d surface with additive Gaussian noise, split 80/20.

    Targets are ``sin(pi*x0) * cos(pi*x1) + x0*x1/2`` over the square
    [-1, 1]^2, shaped [N, 1].
    """
    if n < 5:
        raise ValueError("need at least 5 points")
    rng = make_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, 2))
    y = np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]) + 0.5 * x[:, 0] * x[:, 1]
    y = y + rng.normal(0.0, noise, size=n)
    x = x.astype(np.float32)
    y = y.astype(np.float32)[:, None]
    n_train = int(round(0.8 * n))
    train = Dataset(x[:n_train], y[:n_train], task="regression", name="surface", split="train")
    test = Dataset(x[n_train:], y[n_train:], task="regression", name="surface", split="strong_test")
    return train, test
