"""
Seeded desk-scale datasets.

* Gaussian blobs for multi-class classification.
* 8x8 "digit-style" images rendered from fixed glyph bitmaps, pixel range
  [0, 255].
* The checkerboard backdoor implant.
* The linear-regression toy with a heterogeneous 20% subgroup.
* A loader for external image sets stored as CSV (``label,p0,p1,...``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError
from .model import LabeledSet


def make_blobs(n_classes: int = 10, dim: int = 8, per_class: int = 60, spread: float = 1.0,
               center_scale: float = 2.5, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic Gaussian clusters, one per class, with centers drawn from ``N(0, center_scale^2)``."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=center_scale, size=(n_classes, dim))
    X = np.concatenate([c + spread * rng.standard_normal((per_class, dim)) for c in centers])
    y = np.repeat(np.arange(n_classes), per_class)
    return X, y


def blob_splits(n_classes: int = 10, dim: int = 8, train_per_class: int = 60, test_per_class: int = 40,
                spread: float = 1.0, center_scale: float = 2.5, seed: int = 0):
    """Train and test sets drawn from the same blob centers."""
    X, y = make_blobs(n_classes, dim, train_per_class + test_per_class, spread, center_scale, seed)
    rows = np.arange(len(y)) % (train_per_class + test_per_class) < train_per_class
    return LabeledSet(X[rows], y[rows]), LabeledSet(X[~rows], y[~rows])


_GLYPHS = {
    0: ["..####..", ".##..##.", ".##..##.", ".##..##.", ".##..##.", ".##..##.", ".##..##.", "..####.."],
    1: ["...##...", "..###...", ".####...", "...##...", "...##...", "...##...", "...##...", ".######."],
    2: ["..####..", ".##..##.", ".....##.", "....##..", "...##...", "..##....", ".##.....", ".######."],
    3: [".#####..", ".....##.", ".....##.", "..####..", ".....##.", ".....##.", ".....##.", ".#####.."],
    4: ["....##..", "...###..", "..####..", ".##.##..", ".######.", "....##..", "....##..", "....##.."],
    5: [".######.", ".##.....", ".##.....", ".#####..", ".....##.", ".....##.", ".##..##.", "..####.."],
    6: ["..####..", ".##.....", ".##.....", ".#####..", ".##..##.", ".##..##.", ".##..##.", "..####.."],
    7: [".######.", ".....##.", "....##..", "....##..", "...##...", "...##...", "..##....", "..##...."],
    8: ["..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", ".##..##.", ".##..##.", "..####.."],
    9: ["..####..", ".##..##.", ".##..##.", "..#####.", ".....##.", ".....##.", "....##..", "..###..."],
}


def glyph(label: int) -> np.ndarray:
    return np.array([[c == "#" for c in row] for row in _GLYPHS[label]], dtype=np.float64)


def make_digits(per_class: int = 50, seed: int = 0, noise: float = 20.0, max_shift: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Noisy, shifted renderings of the ten glyphs.

    Returns ``(images, labels)`` with images of shape ``(N, 8, 8)`` holding
    integers in ``[0, 255]`` (as float64).
    """
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label in range(10):
        base = glyph(label)
        for _ in range(per_class):
            dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
            img = np.roll(np.roll(base, dy, axis=0), dx, axis=1)
            ink = rng.uniform(150.0, 230.0)
            img = img * ink + rng.normal(scale=noise, size=(8, 8))
            images.append(np.clip(np.round(img), 0, 255))
            labels.append(label)
    return np.stack(images), np.asarray(labels)


@dataclass(frozen=True)
class BackdoorSpec:
    """Checkerboard trigger: ``+16`` on cells with odd ``row + col``, ``+0`` elsewhere, then clip to [0, 255]."""

    fraction: float = 0.3
    label: int = 0
    seed: int = 1
    amplitude: float = 16.0

    def __post_init__(self):
        if not 0 <= self.fraction <= 1:
            raise DomainError("poison fraction must lie in [0, 1]")

    def pattern(self, shape=(8, 8)) -> np.ndarray:
        rows, cols = np.indices(shape)
        return np.where((rows + cols) % 2 == 1, self.amplitude, 0.0)


def implant(images: np.ndarray, bd: BackdoorSpec) -> np.ndarray:
    """Add the trigger to every image and clip to the uint8 range."""
    return np.clip(images + bd.pattern(images.shape[1:]), 0.0, 255.0)


def poison(images: np.ndarray, labels: np.ndarray, bd: BackdoorSpec):
    """Implant the trigger on a seeded ``fraction`` of rows and relabel them.

    Returns ``(images, labels, rows)`` where ``rows`` are the sorted poisoned
    indices. Inputs are not modified.
    """
    m = len(labels)
    count = int(round(bd.fraction * m))
    rng = np.random.default_rng(bd.seed)
    rows = np.sort(rng.choice(m, size=count, replace=False)) if count else np.zeros(0, dtype=np.int64)
    out_images = images.copy()
    out_labels = labels.copy()
    if count:
        out_images[rows] = implant(images[rows], bd)
        out_labels[rows] = bd.label
    return out_images, out_labels, rows


def to_features(images: np.ndarray) -> np.ndarray:
    """Flatten and scale pixel values into [0, 1]."""
    return images.reshape(len(images), -1) / 255.0


def toy_regression(seed: int = 0, m: int = 1000, dim: int = 5, fraction: float = 0.2, amplify: float = 3.0,
                   noise: float = 0.1) -> tuple[LabeledSet, np.ndarray]:
    """Linear data ``y = x . beta + b + noise`` with a heterogeneous subgroup.

    A seeded ``fraction`` of rows gets its inputs amplified by ``amplify``
    and its target sign-flipped; those rows are marked in the mask. Returns
    ``(data, beta_and_bias)``.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((m, dim))
    beta = rng.standard_normal(dim)
    bias = rng.standard_normal()
    y = X @ beta + bias + noise * rng.standard_normal(m)
    rows = rng.choice(m, size=int(round(fraction * m)), replace=False)
    X[rows] *= amplify
    y[rows] *= -1.0
    mask = np.zeros(m, dtype=np.int64)
    mask[rows] = 1
    return LabeledSet(X, y, mask), np.append(beta, bias)


def load_csv_images(path, scale: float = 255.0) -> LabeledSet:
    """Read ``label,p0,p1,...`` rows (optional header) into a LabeledSet, pixels divided by ``scale``."""
    rows = []
    with open(Path(path), newline="") as fh:
        for i, rec in enumerate(csv.reader(fh)):
            if not rec:
                continue
            try:
                rows.append([float(v) for v in rec])
            except ValueError:
                if i == 0:
                    continue
                raise ConfigError(f"{path}: non-numeric value on line {i + 1}")
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    arr = np.asarray(rows)
    return LabeledSet(arr[:, 1:] / scale, arr[:, 0].astype(np.int64))
