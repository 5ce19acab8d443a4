"""Dataset loading, synthetic generation, class-skewed partitioning, poisoning.

Images come from IDX files (the classic big-endian handwritten-digit
format) or from a seeded synthetic generator of Gaussian class blobs.
Partitioning is shard-style: each client draws a fixed-size subset of
classes with heavily unequal quotas, which reproduces hard zero classes
per client rather than the softer skew a Dirichlet split gives.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    CountMismatch,
    IndexOutOfRange,
    InfeasiblePartition,
    TruncatedFile,
)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# log-normal sigma for per-(client, class) quota weights; high enough that
# a client's nonempty class counts typically spread past 10:1
_QUOTA_SIGMA = 1.6


@dataclass
class Dataset:
    """Feature matrix in [0, 1] with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs must be (n, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]


@dataclass
class Partition:
    """Disjoint per-client index lists into a parent dataset."""

    client_indices: list[np.ndarray]

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]


def _read_exact(f, nbytes: int, path: str) -> bytes:
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise TruncatedFile(f"{path}: wanted {nbytes} bytes, got {len(data)}")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair into a flat-feature dataset.

    Pixels are scaled by 1/255 into [0, 1]; images flatten to rows*cols
    features. The two files must agree on the sample count.
    """
    images_path = str(images_path)
    labels_path = str(labels_path)
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IMAGE_MAGIC:
            raise BadMagic(f"{images_path}: magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
        pixels = np.frombuffer(
            _read_exact(f, count * rows * cols, images_path), dtype=np.uint8
        )
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != LABEL_MAGIC:
            raise BadMagic(f"{labels_path}: magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(f, label_count, labels_path), dtype=np.uint8)
    if count != label_count:
        raise CountMismatch(f"{count} images vs {label_count} labels")
    inputs = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    num_classes = int(labels.max()) + 1 if label_count else 1
    return Dataset(inputs=inputs, labels=labels.astype(np.int64), num_classes=max(num_classes, 2))


def write_idx(dataset: Dataset, images_path, labels_path, rows: int = 1) -> None:
    """Serialize a dataset as an IDX pair (features quantized to bytes).

    `rows` must divide the feature dimension; features are stored as
    round(value*255) so values of the form k/255 round-trip exactly.
    """
    d = dataset.input_dim
    if d % rows != 0:
        raise ValueError(f"rows={rows} does not divide input_dim={d}")
    cols = d // rows
    pixels = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
    with open(str(images_path), "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, len(dataset), rows, cols))
        f.write(pixels.tobytes())
    with open(str(labels_path), "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(dataset)))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def generate_synthetic(
    n: int, input_dim: int, num_classes: int, seed, noise: float = 0.07
) -> Dataset:
    """Seeded Gaussian class blobs with distinct means, clipped into [0, 1].

    Classes are balanced to within one sample of n/num_classes and the
    sample order is a seeded shuffle, so the same seed reproduces the
    dataset bit for bit.
    """
    if n < num_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.15, 0.85, size=(num_classes, input_dim))
    counts = np.full(num_classes, n // num_classes)
    counts[: n % num_classes] += 1
    labels = np.repeat(np.arange(num_classes), counts)
    inputs = means[labels] + rng.normal(scale=noise, size=(n, input_dim))
    np.clip(inputs, 0.0, 1.0, out=inputs)
    order = rng.permutation(n)
    return Dataset(inputs=inputs[order], labels=labels[order], num_classes=num_classes)


def partition_noniid(
    dataset: Dataset, num_clients: int, classes_per_client: int, seed
) -> Partition:
    """Skewed class-shard partition: per-client class subsets, unequal quotas.

    Each client draws `classes_per_client` distinct classes and a log-normal
    quota weight per drawn class. Each class's samples are then split
    (shuffled, without replacement) among the clients demanding it, in
    proportion to their weights. Clients hold zero samples of every class
    they did not draw.
    """
    if not 1 <= classes_per_client <= dataset.num_classes:
        raise ValueError("classes_per_client must be in [1, num_classes]")
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    rng = np.random.default_rng(seed)
    num_classes = dataset.num_classes

    chosen = [
        rng.choice(num_classes, size=classes_per_client, replace=False)
        for _ in range(num_clients)
    ]
    weights = np.zeros((num_clients, num_classes))
    for ci, classes in enumerate(chosen):
        weights[ci, classes] = rng.lognormal(mean=0.0, sigma=_QUOTA_SIGMA, size=classes_per_client)

    by_class = [np.flatnonzero(dataset.labels == c) for c in range(num_classes)]
    allotted: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(num_classes):
        demanders = np.flatnonzero(weights[:, c] > 0)
        if demanders.size == 0:
            continue
        pool = rng.permutation(by_class[c])
        counts = _largest_remainder(weights[demanders, c], len(pool))
        offset = 0
        for client, take in zip(demanders, counts):
            allotted[client].append(pool[offset : offset + take])
            offset += take

    client_indices = []
    for ci in range(num_clients):
        ix = np.sort(np.concatenate(allotted[ci])) if allotted[ci] else np.array([], dtype=np.int64)
        if ix.size == 0:
            raise InfeasiblePartition(
                f"client {ci} received no samples; dataset too small for this split"
            )
        client_indices.append(ix.astype(np.int64))
    return Partition(client_indices=client_indices)


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer split of `total` proportional to `weights` (sums exactly)."""
    shares = weights / weights.sum() * total
    counts = np.floor(shares).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(shares - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def poison_labels(dataset: Dataset, indices, mode: str, seed) -> Dataset:
    """Return a dataset copy with the listed samples' labels corrupted.

    flip_map sends y -> (num_classes - 1 - y); random draws a uniformly
    random wrong label. The feature matrix is shared, never copied or
    modified.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= len(dataset)):
        raise IndexOutOfRange(f"poison indices outside [0, {len(dataset)})")
    labels = dataset.labels.copy()
    c = dataset.num_classes
    if mode == "flip_map":
        labels[indices] = c - 1 - labels[indices]
    elif mode == "random":
        rng = np.random.default_rng(seed)
        for ix in indices:
            shift = rng.integers(1, c)
            labels[ix] = (labels[ix] + shift) % c
    else:
        raise ValueError(f"unknown poison mode {mode!r}")
    return Dataset(inputs=dataset.inputs, labels=labels, num_classes=c)
