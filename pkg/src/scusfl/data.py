"""Datasets: CIFAR-10 binary ingestion, synthetic fixtures and client sharding."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .streams import stream

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
SYNTH_BLOCK = 4


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # one entry per channel
    std: np.ndarray


@dataclass
class Dataset:
    x: np.ndarray  # (N, *input_shape), normalised
    y: np.ndarray  # (N,) int labels
    num_classes: int
    stats: NormStats

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs for {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.stats)


def _channel_axes(x: np.ndarray):
    # Images (N, C, H, W) normalise per channel; vectors use one global channel.
    return (0, 2, 3) if x.ndim == 4 else tuple(range(x.ndim))


def fit_stats(raw: np.ndarray) -> NormStats:
    axes = _channel_axes(raw)
    mean = np.atleast_1d(raw.mean(axis=axes))
    std = np.atleast_1d(raw.std(axis=axes))
    return NormStats(mean, np.where(std > 0, std, 1.0))


def apply_stats(raw: np.ndarray, stats: NormStats) -> np.ndarray:
    if raw.ndim == 4:
        return (raw - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    return (raw - stats.mean[0]) / stats.std[0]


# -- CIFAR-10 -----------------------------------------------------------------

def parse_cifar10_records(buf: bytes, max_records: int | None = None, offset_base: int = 0):
    """Return raw uint8 images (N, 3, 32, 32) and labels from binary records."""
    if len(buf) % CIFAR_RECORD:
        raise FormatError(
            f"truncated CIFAR-10 data: {len(buf)} bytes is not a multiple of {CIFAR_RECORD} "
            f"(partial record at byte offset {offset_base + len(buf) - len(buf) % CIFAR_RECORD})"
        )
    n = len(buf) // CIFAR_RECORD
    if max_records is not None:
        n = min(n, max_records)
    arr = np.frombuffer(buf, dtype=np.uint8, count=n * CIFAR_RECORD).reshape(n, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"invalid label byte {labels[i]} at byte offset {offset_base + i * CIFAR_RECORD}")
    return arr[:, 1:].reshape(n, *CIFAR_SHAPE).copy(), labels


def serialize_cifar10_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_cifar10_records`."""
    n = len(labels)
    out = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = images.reshape(n, -1)
    return out.tobytes()


def _read_files(paths, limit):
    images, labels = [], []
    for p in paths:
        remaining = None if limit is None else limit - sum(len(l) for l in labels)
        if remaining is not None and remaining <= 0:
            break
        im, lb = parse_cifar10_records(Path(p).read_bytes(), remaining)
        images.append(im)
        labels.append(lb)
    if not labels:
        raise FormatError("no CIFAR-10 records read")
    return np.concatenate(images), np.concatenate(labels)


def load_cifar10_binary(path, max_per_split: int | None = None, stats: NormStats | None = None) -> Dataset:
    """Load one CIFAR-10 ``.bin`` file (or a list of them) into a normalised Dataset.

    Pixels are scaled to [0, 1] and normalised with ``stats``; when ``stats`` is
    omitted they are fitted on this data (use that only for a training split).
    """
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path)
    images, labels = _read_files(paths, max_per_split)
    raw = images.astype(np.float64) / 255.0
    stats = fit_stats(raw) if stats is None else stats
    return Dataset(apply_stats(raw, stats), labels, 10, stats)


def find_cifar10_dir(data_dir=None) -> Path | None:
    """Locate the directory holding the CIFAR-10 binary batches."""
    candidates = [data_dir, os.environ.get("SIMCTL_DATA_DIR")]
    for c in candidates:
        if not c:
            continue
        for d in (Path(c), Path(c) / "cifar-10-batches-bin"):
            if (d / CIFAR_TRAIN_FILES[0]).exists() and (d / CIFAR_TEST_FILE).exists():
                return d
    return None


def load_cifar10(data_dir, n_train: int = 2000, n_test: int = 1000) -> tuple[Dataset, Dataset]:
    root = find_cifar10_dir(data_dir)
    if root is None:
        raise FileNotFoundError(
            f"CIFAR-10 binary batches not found under {data_dir!r} or $SIMCTL_DATA_DIR "
            f"(expected {CIFAR_TRAIN_FILES[0]} and {CIFAR_TEST_FILE})"
        )
    train = load_cifar10_binary([root / f for f in CIFAR_TRAIN_FILES], n_train)
    test = load_cifar10_binary(root / CIFAR_TEST_FILE, n_test, stats=train.stats)
    return train, test


# -- synthetic ----------------------------------------------------------------

def synth_dataset(n: int, num_classes: int, input_dim, separation: float, seed: int,
                  split: str = "train", stats: NormStats | None = None) -> Dataset:
    """Class-conditional unit-variance Gaussians whose means are ``separation`` apart.

    Class means depend only on ``seed``; samples depend on ``seed`` and
    ``split``, so train and test splits share the same class structure.
    """
    shape = (input_dim,) if isinstance(input_dim, int) else tuple(input_dim)
    dim = int(np.prod(shape))
    # Image means are drawn on a coarse grid and upsampled, so the class signal
    # survives pooling; upsampling by blocks keeps the basis orthogonal.
    block = SYNTH_BLOCK if len(shape) == 3 and shape[1] % SYNTH_BLOCK == 0 and shape[2] % SYNTH_BLOCK == 0 else 1
    coarse = (shape[0], shape[1] // block, shape[2] // block) if block > 1 else shape
    cdim = int(np.prod(coarse))
    g = stream(seed, "synth-means").standard_normal((cdim, num_classes))
    basis, _ = np.linalg.qr(g) if cdim >= num_classes else (g / np.linalg.norm(g, axis=0), None)
    if block > 1:
        up = np.ones((1, block, block)) / block
        basis = np.stack([np.kron(b.reshape(coarse), up).ravel() for b in basis.T], axis=1)
    means = (separation / np.sqrt(2.0)) * basis.T  # pairwise distance == separation
    rng = stream(seed, "synth", split)
    y = rng.integers(0, num_classes, size=n)
    raw = (means[y] + rng.standard_normal((n, dim))).reshape(n, *shape)
    stats = fit_stats(raw) if stats is None else stats
    return Dataset(apply_stats(raw, stats), y.astype(np.int64), num_classes, stats)


def synth_split(n_train: int, n_test: int, num_classes: int, input_dim, separation: float, seed: int):
    train = synth_dataset(n_train, num_classes, input_dim, separation, seed, "train")
    test = synth_dataset(n_test, num_classes, input_dim, separation, seed, "test", stats=train.stats)
    return train, test


# -- sharding -----------------------------------------------------------------

def shard_iid(dataset, num_clients: int, seed: int) -> dict[int, np.ndarray]:
    """Random disjoint near-equal shards (sizes differ by at most one)."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    perm = stream(seed, "shard").permutation(n)
    return {c: np.sort(part) for c, part in enumerate(np.array_split(perm, num_clients))}


def shard_dirichlet(dataset: Dataset, num_clients: int, alpha: float, seed: int) -> dict[int, np.ndarray]:
    """Label-skewed shards: each class is split across clients by Dirichlet(alpha) weights."""
    rng = stream(seed, "shard-dirichlet")
    parts: dict[int, list] = {c: [] for c in range(num_clients)}
    for k in range(dataset.num_classes):
        idx = rng.permutation(np.nonzero(dataset.y == k)[0])
        cuts = (np.cumsum(rng.dirichlet([alpha] * num_clients))[:-1] * len(idx)).astype(int)
        for c, chunk in enumerate(np.split(idx, cuts)):
            parts[c].extend(chunk.tolist())
    return {c: np.sort(np.array(v, dtype=np.int64)) for c, v in parts.items()}


def batch_order(indices: np.ndarray, batch_size: int, seed: int, owner: int, epoch: int) -> list[np.ndarray]:
    """Shuffled minibatches for one epoch, drawn from the owner's named stream."""
    perm = stream(seed, "batches", owner, epoch).permutation(len(indices))
    ordered = np.asarray(indices)[perm]
    return [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]
