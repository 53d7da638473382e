"""Datasets, IDX parsing, user partitioning and a drifting synthetic stream."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coreml import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on the number of examples")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class UserShard:
    user_id: int
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return self.labels.shape[0]

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        """n examples drawn uniformly without replacement (n <= local size)."""
        if not 1 <= n <= len(self):
            raise ValueError(f"cannot sample {n} of {len(self)} local examples")
        idx = np.sort(rng.choice(len(self), size=n, replace=False))
        return Batch(self.features[idx], self.labels[idx])


# --- IDX ----------------------------------------------------------------------

def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic: int, field: str):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic for {field}: got 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size < count:
        raise IdxFormatError(f"{path}: truncated {field} data ({body.size} of {count} bytes)")
    return body[:count].reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Parse an IDX image/label pair; pixels are min-max scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n x rows x cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def min_max_scale(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)


def load_digits_dataset() -> Dataset:
    """scikit-learn's bundled 8x8 handwritten digits (1797 examples), min-max scaled."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    return Dataset(min_max_scale(raw.data.astype(np.float64)), raw.target.astype(np.int64), 10)


def train_test_split(ds: Dataset, test_size: int, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < test_size < len(ds):
        raise ValueError("test_size must be between 0 and the dataset size")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[test_size:])), ds.subset(np.sort(perm[:test_size]))


def gaussian_clusters(num_classes: int, dim: int, size: int, seed: int,
                      spread: float = 1.0) -> Dataset:
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, size=(num_classes, dim))
    labels = rng.integers(0, num_classes, size=size)
    x = centers[labels] + spread * rng.normal(size=(size, dim))
    return Dataset(x, labels, num_classes)


# --- partitioning -------------------------------------------------------------

def partition_noniid(ds: Dataset, num_users: int, seed: int) -> list[UserShard]:
    """Label-sorted data in 2*num_users contiguous shards, two per user.

    The last shard absorbs the remainder when the size does not divide.
    """
    if num_users < 1:
        raise ValueError("num_users must be >= 1")
    num_shards = 2 * num_users
    if num_shards > len(ds):
        raise ValueError(f"{num_users} users need at least {num_shards} examples")
    order = np.argsort(ds.labels, kind="stable")
    shard_size = len(ds) // num_shards
    bounds = [i * shard_size for i in range(num_shards)] + [len(ds)]
    perm = np.random.default_rng(seed).permutation(num_shards)
    users = []
    for u in range(num_users):
        picked = sorted(perm[2 * u:2 * u + 2])
        idx = np.concatenate([order[bounds[s]:bounds[s + 1]] for s in picked])
        users.append(UserShard(u, ds.features[idx], ds.labels[idx], ds.num_classes))
    return users


def partition_iid(ds: Dataset, num_users: int, seed: int) -> list[UserShard]:
    if num_users < 1:
        raise ValueError("num_users must be >= 1")
    if num_users > len(ds):
        raise ValueError("more users than examples")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return [
        UserShard(u, ds.features[idx], ds.labels[idx], ds.num_classes)
        for u, idx in enumerate(np.array_split(perm, num_users))
    ]


# --- drifting stream ------------------------------------------------------------

class DriftingStream:
    """Gaussian-cluster classification chunks whose class centers move.

    Chunk k belongs to period k // drift_period. At each period boundary every
    center is blended with a fresh draw: c <- sqrt(1-d^2) c + d * fresh, where d
    is `drift_strength` (1 = full redraw). drift_period=None disables drift.
    """

    def __init__(self, num_classes: int = 5, dim: int = 10, drift_period: int | None = 24,
                 samples_per_chunk: int = 100, drift_strength: float = 0.6,
                 spread: float = 0.8, seed: int = 0):
        if drift_period is not None and drift_period < 1:
            raise ValueError("drift_period must be positive or None")
        if not 0 <= drift_strength <= 1:
            raise ValueError("drift_strength must be in [0, 1]")
        self.num_classes = num_classes
        self.dim = dim
        self.drift_period = drift_period
        self.samples_per_chunk = samples_per_chunk
        self.drift_strength = drift_strength
        self.spread = spread
        self._center_rng = np.random.default_rng([seed, 0])
        self._sample_rng = np.random.default_rng([seed, 1])
        self._centers = [self._center_rng.normal(0.0, 1.5, size=(num_classes, dim))]
        self.chunk_index = 0

    def period_of(self, chunk: int) -> int:
        return 0 if self.drift_period is None else chunk // self.drift_period

    def centers(self, period: int) -> np.ndarray:
        d = self.drift_strength
        while len(self._centers) <= period:
            fresh = self._center_rng.normal(0.0, 1.5, size=(self.num_classes, self.dim))
            self._centers.append(math.sqrt(1 - d * d) * self._centers[-1] + d * fresh)
        return self._centers[period]

    def next_chunk(self) -> Batch:
        centers = self.centers(self.period_of(self.chunk_index))
        labels = self._sample_rng.integers(0, self.num_classes, size=self.samples_per_chunk)
        x = centers[labels] + self.spread * self._sample_rng.normal(size=(labels.size, self.dim))
        self.chunk_index += 1
        return Batch(x, labels)


def gen_drifting_stream(config: dict | None = None, seed: int = 0) -> DriftingStream:
    return DriftingStream(seed=seed, **(config or {}))
