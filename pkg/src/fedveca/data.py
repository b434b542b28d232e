"""Datasets, IDX ingestion, client partitioning and minibatch sampling."""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple

import numpy as np

from .numerics import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CASES = ("case1", "case2", "case3")


class Sample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ValueError("dataset is empty")
        if self.features.ndim != 2 or self.features.shape[0] != len(self.labels):
            raise ValueError("features must be (n, d) with one label per row")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.labels[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


def class_directions(classes: int, d: int) -> np.ndarray:
    """Unit mean directions forming a regular simplex centred at the origin.

    Vertex ``c`` is ``e_c - mean(e_0..e_{C-1})`` normalized, embedded in the first
    ``classes`` coordinates, so two classes sit at ``+u`` and ``-u``. When
    ``classes > d`` the directions are fixed pseudo-random unit vectors instead.
    """
    if classes <= d:
        u = np.zeros((classes, d))
        u[:, :classes] = np.eye(classes) - 1.0 / classes
        return u / np.linalg.norm(u, axis=1, keepdims=True)
    extra = RngStream(0x5EED)
    v = extra.normal(classes * d).reshape(classes, d)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def gen_synthetic(n: int, d: int, classes: int, separation: float, seed: int) -> Dataset:
    """Gaussian blobs with unit variance, class ``c`` centred at ``separation * u_c``.

    Labels are assigned round-robin (``i % classes``) so class counts differ by at most one.
    """
    if classes < 2 or n < classes or d < 1 or not separation > 0:
        raise ValueError(f"invalid synthetic dataset sizes n={n} d={d} classes={classes} separation={separation}")
    rng = RngStream(seed)
    labels = np.arange(n, dtype=np.int64) % classes
    noise = rng.normal(n * d).reshape(n, d)
    x = separation * class_directions(classes, d)[labels] + noise
    return Dataset(x, labels, classes)


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndims: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise IdxTruncatedError(f"{what}: header truncated ({len(raw)} bytes)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxMagicError(f"{what}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndims, raw[4:header])
    need = math.prod(dims)
    body = raw[header:]
    if len(body) < need:
        raise IdxTruncatedError(f"{what}: expected {need} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def read_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair (optionally gzipped); pixels are scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


@dataclass(frozen=True)
class PartitionPlan:
    case: str
    shards: List[np.ndarray] = field(default_factory=list)

    @property
    def sizes(self) -> List[int]:
        return [len(s) for s in self.shards]


def _contiguous_groups(items, n_groups: int) -> list:
    """Split ``items`` into ``n_groups`` contiguous runs whose sizes differ by at most one."""
    base, extra = divmod(len(items), n_groups)
    out, start = [], 0
    for g in range(n_groups):
        stop = start + base + (1 if g < extra else 0)
        out.append(list(items[start:stop]))
        start = stop
    return out


def _iid(indices: np.ndarray, n_clients: int, rng: RngStream) -> List[np.ndarray]:
    owner = rng.integers(n_clients, len(indices))
    return [np.sort(indices[owner == c]) for c in range(n_clients)]


def _label_groups(labels: np.ndarray, indices: np.ndarray, label_set, n_clients: int) -> List[np.ndarray]:
    label_set = list(label_set)
    shards: List[np.ndarray] = []
    if n_clients <= len(label_set):
        for group in _contiguous_groups(label_set, n_clients):
            shards.append(np.sort(indices[np.isin(labels[indices], group)]))
        return shards
    # More clients than labels: each label is split evenly across a contiguous run of clients.
    for label, owners in zip(label_set, _contiguous_groups(list(range(n_clients)), len(label_set))):
        members = np.sort(indices[labels[indices] == label])
        for part in np.array_split(members, len(owners)):
            shards.append(part)
    return shards


def partition(ds: Dataset, case: str, n_clients: int, seed: int) -> PartitionPlan:
    """Split ``ds`` across ``n_clients``.

    case1: each sample goes to a uniformly random client.
    case2: each client holds one contiguous group of labels.
    case3: the first ceil(n/2) clients share the first ceil(C/2) labels IID; the
    rest hold the remaining labels as in case2.
    """
    if case not in CASES:
        raise ValueError(f"unknown partition case {case!r}")
    if n_clients < 2:
        raise ValueError("n_clients must be >= 2")
    rng = RngStream(seed).derive(0xDA7A)
    labels = np.asarray(ds.labels)
    everything = np.arange(len(ds), dtype=np.int64)
    C = ds.num_classes
    if case == "case1":
        shards = _iid(everything, n_clients, rng)
    elif case == "case2":
        if n_clients > C:
            raise ValueError(f"case2 needs n_clients <= num_classes ({n_clients} > {C})")
        shards = _label_groups(labels, everything, range(C), n_clients)
    else:
        n_iid = math.ceil(n_clients / 2)
        c_iid = math.ceil(C / 2)
        first = everything[labels < c_iid]
        rest = everything[labels >= c_iid]
        shards = _iid(first, n_iid, rng) + _label_groups(labels, rest, range(c_iid, C), n_clients - n_iid)
    for c, s in enumerate(shards):
        if len(s) == 0:
            raise ValueError(f"client {c} received no samples under {case}")
    return PartitionPlan(case, shards)


def label_histogram(ds: Dataset, plan: PartitionPlan) -> np.ndarray:
    """(n_clients, num_classes) matrix of per-client label counts."""
    return np.stack([np.bincount(ds.labels[s], minlength=ds.num_classes) for s in plan.shards])


def sample_minibatch(shard, B: int, rng: RngStream) -> np.ndarray:
    """``B`` indices drawn uniformly with replacement from ``shard``."""
    shard = np.asarray(shard)
    if B < 1:
        raise ValueError("batch size must be >= 1")
    if len(shard) == 0:
        raise ValueError("shard is empty")
    return shard[rng.integers(len(shard), B)]
