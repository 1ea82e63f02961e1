"""Synthetic labeled datasets and heterogeneous device partitions.

The generator places one isotropic Gaussian cluster per class, with unit-norm
mutually orthogonal means, so class separability is controlled by a single
spread parameter. Two partition schemes split a dataset across devices:

* ``dirichlet(alpha)``: per class, device proportions are drawn from a
  symmetric Dirichlet and the class's samples are assigned multinomially.
  Smaller alpha means more skew.
* ``pathological(c)``: every device holds samples of exactly c distinct
  classes; each class's samples are chunked evenly across the devices that
  hold it.

All randomness flows through `rng.stream`, so results are reproducible and
independent of evaluation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .models import Batch
from .rng import stream

__all__ = [
    "Dataset",
    "Partition",
    "DeviceShard",
    "generate_synthetic",
    "holdout_split",
    "dirichlet_partition",
    "pathological_partition",
]


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be (n, d) and labels (n,)")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise ValueError("labels out of range")
        present = np.unique(self.labels)
        if present.shape[0] != self.num_classes:
            missing = sorted(set(range(self.num_classes)) - set(present.tolist()))
            raise ValueError(f"classes with no samples: {missing}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def class_indices(self, k: int) -> np.ndarray:
        return np.nonzero(self.labels == k)[0]

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)

    def batch(self, indices: np.ndarray) -> Batch:
        indices = np.asarray(indices, dtype=np.int64)
        return Batch(self.features[indices], self.labels[indices])

    def to_csv(self, path) -> None:
        header = ",".join([f"f{j}" for j in range(self.input_dim)] + ["label"])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row, lab in zip(self.features, self.labels):
                fh.write(",".join(f"{v:.17g}" for v in row) + f",{lab}\n")

    @classmethod
    def from_csv(cls, path, num_classes: Optional[int] = None) -> "Dataset":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if not header or header[-1] != "label" or header[0] != "f0":
                raise ValueError(f"unexpected CSV header in {path}")
            raw = np.loadtxt(fh, delimiter=",", ndmin=2)
        features = raw[:, :-1]
        labels = raw[:, -1].astype(np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1
        return cls(features, labels, num_classes)


def generate_synthetic(
    num_classes: int,
    input_dim: int,
    samples_per_class: int,
    cluster_spread: float,
    seed: int,
) -> Dataset:
    """One Gaussian cluster per class, means on a random orthonormal frame.

    With cluster_spread 0 every sample of class k equals the class mean.
    """
    if num_classes < 1 or input_dim < 1 or samples_per_class < 1:
        raise ValueError("num_classes, input_dim and samples_per_class must be >= 1")
    if cluster_spread < 0:
        raise ValueError("cluster_spread must be nonnegative")
    if num_classes > input_dim:
        raise ValueError(
            f"orthonormal class means need input_dim >= num_classes "
            f"({input_dim} < {num_classes})"
        )
    rng = stream(seed, "synth")
    q, r = np.linalg.qr(rng.standard_normal((input_dim, input_dim)))
    q = q * np.sign(np.diag(r))  # canonical sign, keeps the frame deterministic
    means = q[:, :num_classes].T
    features = np.empty((num_classes * samples_per_class, input_dim))
    labels = np.empty(num_classes * samples_per_class, dtype=np.int64)
    for k in range(num_classes):
        lo = k * samples_per_class
        noise = rng.standard_normal((samples_per_class, input_dim))
        features[lo : lo + samples_per_class] = means[k] + cluster_spread * noise
        labels[lo : lo + samples_per_class] = k
    return Dataset(features, labels, num_classes)


def holdout_split(dataset: Dataset, fraction: float, seed: int):
    """Stratified (per-class) split into (train, holdout) datasets."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("holdout fraction must be in (0, 1)")
    rng = stream(seed, "holdout")
    train_idx, hold_idx = [], []
    for k in range(dataset.num_classes):
        idx = rng.permutation(dataset.class_indices(k))
        n_hold = max(1, int(round(fraction * idx.shape[0])))
        if n_hold >= idx.shape[0]:
            raise ValueError(f"class {k} too small for holdout fraction {fraction}")
        hold_idx.append(idx[:n_hold])
        train_idx.append(idx[n_hold:])
    train_idx = np.sort(np.concatenate(train_idx))
    hold_idx = np.sort(np.concatenate(hold_idx))
    return dataset.subset(train_idx), dataset.subset(hold_idx)


@dataclass
class Partition:
    """Disjoint per-device index lists covering a dataset exactly."""

    assignments: List[np.ndarray]
    scheme: str
    seed: int

    def __post_init__(self):
        self.assignments = [np.asarray(a, dtype=np.int64) for a in self.assignments]

    @property
    def n_devices(self) -> int:
        return len(self.assignments)

    def device_sizes(self) -> np.ndarray:
        return np.array([a.shape[0] for a in self.assignments])

    def check(self, dataset: Dataset) -> None:
        """Assert conservation, disjointness and nonempty devices."""
        allidx = np.concatenate(self.assignments) if self.assignments else np.array([], dtype=np.int64)
        if allidx.shape[0] != dataset.n or np.unique(allidx).shape[0] != dataset.n:
            raise ValueError("assignments do not partition the dataset")
        if any(a.shape[0] == 0 for a in self.assignments):
            raise ValueError("a device received no samples")

    def label_histogram(self, dataset: Dataset, device: int) -> np.ndarray:
        return np.bincount(dataset.labels[self.assignments[device]], minlength=dataset.num_classes)

    def to_json(self) -> str:
        payload = {str(i): a.tolist() for i, a in enumerate(self.assignments)}
        return json.dumps(payload)

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())


def _repair_empty_devices(assignments: List[List[int]]) -> None:
    # The global objective averages over all devices, so none may be empty:
    # an empty device steals one sample from the currently largest device.
    while True:
        sizes = [len(a) for a in assignments]
        if min(sizes) > 0:
            return
        empty = sizes.index(0)
        donor = int(np.argmax(sizes))
        assignments[empty].append(assignments[donor].pop())


def dirichlet_partition(dataset: Dataset, alpha: float, n_devices: int, seed: int) -> Partition:
    """Per-class Dirichlet(alpha) proportions, multinomial index assignment."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if n_devices < 1:
        raise ValueError("n_devices must be >= 1")
    if n_devices > dataset.n:
        raise ValueError(f"cannot split {dataset.n} samples across {n_devices} devices")
    rng = stream(seed, "partition")
    assignments: List[List[int]] = [[] for _ in range(n_devices)]
    for k in range(dataset.num_classes):
        idx = rng.permutation(dataset.class_indices(k))
        props = rng.dirichlet(alpha * np.ones(n_devices))
        counts = rng.multinomial(idx.shape[0], props)
        for dev, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            assignments[dev].extend(chunk.tolist())
    _repair_empty_devices(assignments)
    part = Partition([np.array(a, dtype=np.int64) for a in assignments], f"dirichlet({alpha})", seed)
    part.check(dataset)
    return part


def pathological_partition(
    dataset: Dataset, classes_per_device: int, n_devices: int, seed: int
) -> Partition:
    """Each device holds exactly `classes_per_device` distinct classes."""
    c, num_classes = classes_per_device, dataset.num_classes
    if not 1 <= c <= num_classes:
        raise ValueError(f"classes_per_device must be in [1, {num_classes}], got {c}")
    if n_devices * c < num_classes:
        raise ValueError(
            f"infeasible: {n_devices} devices x {c} classes cannot cover {num_classes} classes"
        )
    if n_devices > dataset.n:
        raise ValueError(f"cannot split {dataset.n} samples across {n_devices} devices")
    rng = stream(seed, "partition")
    order = rng.permutation(num_classes)
    # Device i draws c consecutive slots from the shuffled class cycle, so its
    # classes are distinct (c <= num_classes) and all classes get covered.
    device_classes = [[int(order[(i * c + m) % num_classes]) for m in range(c)] for i in range(n_devices)]
    holders: List[List[int]] = [[] for _ in range(num_classes)]
    for dev, classes in enumerate(device_classes):
        for k in classes:
            holders[k].append(dev)
    assignments: List[List[int]] = [[] for _ in range(n_devices)]
    for k in range(num_classes):
        idx = rng.permutation(dataset.class_indices(k))
        n_holders = len(holders[k])
        base, rem = divmod(idx.shape[0], n_holders)
        pos = 0
        for j, dev in enumerate(holders[k]):
            take = base + (1 if j < rem else 0)
            assignments[dev].extend(idx[pos : pos + take].tolist())
            pos += take
    _repair_empty_devices(assignments)
    part = Partition(
        [np.array(a, dtype=np.int64) for a in assignments], f"pathological({c})", seed
    )
    part.check(dataset)
    return part


class DeviceShard:
    """One device's view of the dataset plus its private batch stream.

    Default mode walks a fresh shuffled permutation per epoch: batches within
    an epoch are disjoint, the final batch of an epoch may be short, and the
    next call starts a newly drawn permutation. With ``with_replacement=True``
    each call samples indices i.i.d. uniformly, the setting under which
    per-batch gradients are exactly unbiased draws.

    Sampling state is single-owner; exactly one worker may advance a shard.
    """

    def __init__(
        self,
        dataset: Dataset,
        device_id: int,
        indices: np.ndarray,
        rng: np.random.Generator,
        with_replacement: bool = False,
    ):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.shape[0] == 0:
            raise ValueError(f"device {device_id} has an empty shard")
        self.dataset = dataset
        self.device_id = device_id
        self.indices = indices
        self.rng = rng
        self.with_replacement = with_replacement
        self._perm: Optional[np.ndarray] = None
        self._cursor = 0

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    def next_batch(self, batch_size: int) -> Batch:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.with_replacement:
            pick = self.rng.integers(0, self.n, size=batch_size)
            return self.dataset.batch(self.indices[pick])
        if self._perm is None or self._cursor >= self.n:
            self._perm = self.rng.permutation(self.n)
            self._cursor = 0
        lo = self._cursor
        hi = min(lo + batch_size, self.n)
        self._cursor = hi
        return self.dataset.batch(self.indices[self._perm[lo:hi]])

    def full_batch(self) -> Batch:
        return self.dataset.batch(self.indices)
