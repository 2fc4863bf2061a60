"""Symmetric label noise: transition matrix, label corruption, matrix distance."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True, eq=False)
class NoiseMatrix:
    """Row-stochastic symmetric matrix; ``entries[i, j] = P(observed j | true i)``."""

    m: int
    n: float
    entries: np.ndarray

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


def build_noise_matrix(m: int, n: float) -> NoiseMatrix:
    """Keep each label with probability ``1 - n``; spread ``n`` evenly over the others."""
    if m < 2:
        raise ConfigError(f"need at least 2 classes, got m={m}")
    if not 0.0 <= n <= 1.0:
        raise ConfigError(f"noise rate must lie in [0, 1], got {n}")
    entries = np.full((m, m), n / (m - 1))
    np.fill_diagonal(entries, 1.0 - n)
    entries.flags.writeable = False
    return NoiseMatrix(m, float(n), entries)


def inject_noise(
    labels: Sequence[int], noise: NoiseMatrix, seed: int | np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Resample every label from its row of ``noise``.

    Returns the corrupted labels and a boolean mask of positions that changed.
    The same seed always yields the same corruption.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= noise.m):
        raise ConfigError(f"labels must lie in [0, {noise.m})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.random(labels.size)
    cumulative = np.cumsum(noise.entries, axis=1)[labels]
    noisy = np.minimum((cumulative <= u[:, None]).sum(axis=1), noise.m - 1)
    return noisy, noisy != labels


def entrywise_l1_distance(c, n) -> float:
    """Sum of absolute entry differences between two square matrices."""
    c = np.asarray(c, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if c.shape != n.shape:
        raise ShapeError(f"matrix shapes differ: {c.shape} vs {n.shape}")
    return float(np.abs(c - n).sum())


def write_noise_csv(path: str | Path, indices: Sequence[int], clean: Sequence[int],
                    noisy: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["graph_index", "clean_label", "noisy_label"])
        for row in zip(indices, clean, noisy):
            writer.writerow([int(x) for x in row])
