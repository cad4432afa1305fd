"""Deterministic data sources.

Every random draw goes through ``make_rng``: numpy's ``Generator`` over the
counter-based Philox-4x64-10 bit generator, with normals drawn by numpy's
ziggurat sampler.  Same seed, same bytes.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32


class DataError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class GaussianBatch:
    samples: np.ndarray
    seed: int

    @property
    def count(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int

    def __len__(self):
        return len(self.labels)

    def split(self, n_first: int) -> tuple["LabeledDataset", "LabeledDataset"]:
        return (
            LabeledDataset(self.features[:n_first], self.labels[:n_first], self.classes),
            LabeledDataset(self.features[n_first:], self.labels[n_first:], self.classes),
        )


def gaussian_samples(seed: int, n: int = 10_000) -> GaussianBatch:
    if n <= 0:
        raise DataError(f"sample count must be positive, got {n}")
    return GaussianBatch(make_rng(seed).standard_normal(n), int(seed))


def synthetic_classification(seed: int, n: int, classes: int = 4, dim: int = 16,
                             spread: float = 1.5, margin: float = 1.0) -> LabeledDataset:
    """Gaussian blobs, rejection-sampled so every point clears the pairwise
    bisector hyperplanes of the class means by at least ``margin``.

    The nearest-mean rule is therefore a linear classifier with geometric
    margin >= ``margin`` on the returned set.  Class counts differ by at most
    one and the rows are shuffled.
    """
    if classes < 2:
        raise DataError("need at least two classes")
    rng = make_rng(seed)
    means = rng.standard_normal((classes, dim))
    means *= (2.0 * spread + 2.0 * margin) / np.sqrt(dim)

    counts = [n // classes + (c < n % classes) for c in range(classes)]
    feats, labels = [], []
    for c, count in enumerate(counts):
        others = [k for k in range(classes) if k != c]
        normals = means[c] - means[others]
        half_gap = np.linalg.norm(normals, axis=1) / 2.0
        normals /= 2.0 * half_gap[:, None]
        mid = (means[c] + means[others]) / 2.0
        got = []
        while sum(len(g) for g in got) < count:
            cand = means[c] + spread * rng.standard_normal((4 * count + 16, dim))
            dist = np.einsum("nd,kd->nk", cand, normals) - np.einsum("kd,kd->k", mid, normals)
            got.append(cand[np.all(dist >= margin, axis=1)])
        feats.append(np.concatenate(got)[:count])
        labels.append(np.full(count, c, dtype=np.int64))
    x = np.concatenate(feats)
    y = np.concatenate(labels)
    order = rng.permutation(len(y))
    return LabeledDataset(x[order], y[order], classes)


def read_cifar10_binary(path) -> LabeledDataset:
    """Read a CIFAR-10 ``data_batch_*.bin`` file: 1 label byte + 3072 pixels.

    Pixels are returned as (N, 3, 32, 32) floats in [0, 1].
    """
    raw = np.fromfile(Path(path), dtype=np.uint8)
    if raw.size % CIFAR_RECORD_BYTES:
        raise DataError(
            f"{path}: {raw.size} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{path}: record {bad} has label {labels[bad]} > 9")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledDataset(images, labels, 10)


def data_dir(override: str | None = None) -> Path | None:
    value = override or os.environ.get("DATA_DIR")
    return Path(value) if value else None
