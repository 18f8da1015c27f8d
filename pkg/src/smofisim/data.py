"""Synthetic datasets, Dirichlet label-skew partitioning and imbalance metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, UsageError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.samples.ndim != 2 or len(self.samples) != len(self.labels):
            raise ConfigurationError("samples must be an [n, d] matrix with one label per row", "dataset")
        # floating labels are regression targets and carry no class range
        is_class = np.issubdtype(self.labels.dtype, np.integer)
        if is_class and len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigurationError("label outside [0, class_count)", "dataset")

    def __len__(self):
        return len(self.labels)

    @property
    def dims(self) -> int:
        return self.samples.shape[1]

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class PartitionSpec:
    client_count: int
    gamma: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.client_count < 1:
            raise ConfigurationError("must be >= 1", "partition.clients")
        if not self.gamma > 0:
            raise ConfigurationError("must be > 0", "partition.gamma")


@dataclass(frozen=True)
class Shard:
    owner: int
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)


def class_means(classes: int, dims: int, scale: float = 1.0) -> np.ndarray:
    """Class centres on the vertices of a scaled {-1, +1} hypercube.

    Class k sits at the vertex spelled by the binary digits of k, so the
    lattice needs ``2**dims >= classes``.
    """
    if 2**dims < classes:
        raise ConfigurationError(f"{dims} dims cannot host {classes} hypercube vertices", "dataset.dims")
    bits = (np.arange(classes)[:, None] >> np.arange(dims)[None, :]) & 1
    return scale * (2.0 * bits - 1.0)


def make_blobs(classes: int, dims: int, per_class: int, spread: float, seed: int, scale: float = 1.0) -> Dataset:
    """Isotropic Gaussian clusters around :func:`class_means`, class-sorted."""
    if classes < 2:
        raise ConfigurationError("need at least 2 classes", "dataset.classes")
    if per_class < 1:
        raise ConfigurationError("need at least 1 sample per class", "dataset.per_class")
    if spread < 0:
        raise ConfigurationError("must be >= 0", "dataset.spread")
    rng = np.random.default_rng(seed)
    means = class_means(classes, dims, scale)
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.standard_normal((classes * per_class, dims))
    samples = means[labels] + spread * noise
    return Dataset(samples, labels, classes)


def class_histogram(labels: np.ndarray, class_count: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=class_count)


def partition_dirichlet(ds: Dataset, spec: PartitionSpec) -> list[Shard]:
    """Label-skewed split: each class is spread over clients by a Dirichlet draw.

    Clients left empty are repaired by taking one sample from the currently
    largest shard.
    """
    n_clients = spec.client_count
    if len(ds) < n_clients:
        raise ConfigurationError(f"{len(ds)} samples cannot cover {n_clients} clients", "partition.clients")
    rng = np.random.default_rng(spec.seed)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_clients, spec.gamma))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
        for j, part in enumerate(np.split(idx, cuts)):
            buckets[j].extend(part.tolist())

    for j in range(n_clients):
        if not buckets[j]:
            donor = max(range(n_clients), key=lambda k: (len(buckets[k]), -k))
            buckets[j].append(buckets[donor].pop())
            log.debug("client %d was empty; moved one sample from client %d", j, donor)
    return [Shard(j, np.array(sorted(b), dtype=np.int64)) for j, b in enumerate(buckets)]


def js_divergence(q, q_ref) -> float:
    """Jensen-Shannon divergence in bits (so it lies in [0, 1]).

    Inputs may be raw counts; both are normalised first.
    """
    p = np.asarray(q, dtype=np.float64)
    r = np.asarray(q_ref, dtype=np.float64)
    if p.shape != r.shape:
        raise UsageError("distributions must have the same length")
    if np.any(p < 0) or np.any(r < 0):
        raise UsageError("distributions must be nonnegative")
    if p.sum() <= 0 or r.sum() <= 0:
        raise UsageError("distribution has zero total mass")
    p = p / p.sum()
    r = r / r.sum()
    m = 0.5 * (p + r)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / b[mask])))

    return min(max(0.5 * kl(p, m) + 0.5 * kl(r, m), 0.0), 1.0)


def shard_imbalance(ds: Dataset, shard: Shard) -> float:
    """J-S divergence of a shard's class mix from the balanced mix."""
    hist = class_histogram(ds.labels[shard.indices], ds.class_count)
    return js_divergence(hist, np.ones(ds.class_count))


def local_steps(shard_size: int, E: int, B: int) -> int:
    """E * floor(|D_j| / B); zero means the client sits the round out."""
    if E < 1 or B < 1:
        raise UsageError("E and B must be >= 1")
    return E * (shard_size // B)


def aggregation_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0 or sizes.sum() <= 0:
        raise UsageError("cannot weight an empty cohort")
    return sizes / sizes.sum()


def batch_schedule(shard: Shard, steps: int, B: int, seed: int, round_index: int) -> list[np.ndarray]:
    """Index batches for one client-round.

    The shard is reshuffled at every epoch start and the trailing partial
    batch is dropped, which is what ``steps = E * floor(|D_j|/B)`` assumes.
    """
    per_epoch = len(shard) // B
    if steps and per_epoch == 0:
        raise UsageError("shard smaller than one batch")
    rng = np.random.default_rng([seed, round_index, shard.owner])
    batches = []
    order = None
    for t in range(steps):
        k = t % per_epoch
        if k == 0:
            order = shard.indices[rng.permutation(len(shard))]
        batches.append(order[k * B : (k + 1) * B])
    return batches


def load_csv(path, class_count: int | None = None) -> Dataset:
    """Read a ``f0..f{d-1},label`` CSV."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label" or header[:-1] != [f"f{i}" for i in range(len(header) - 1)]:
            raise ConfigurationError(f"{path}: header must be f0..f<d-1>,label", "dataset.csv")
        rows = [r for r in reader if r]
    if not rows:
        raise ConfigurationError(f"{path}: no data rows", "dataset.csv")
    samples = np.array([[float(v) for v in r[:-1]] for r in rows])
    labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1
    return Dataset(samples, labels, class_count)


def save_csv(ds: Dataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(ds.dims)] + ["label"])
        for x, y in zip(ds.samples, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def write_histograms(ds: Dataset, shards: Sequence[Shard], path) -> None:
    """Per-client class counts plus size and imbalance, one row per client."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client_id"] + [f"c{k}" for k in range(ds.class_count)] + ["size", "js"])
        for s in shards:
            hist = class_histogram(ds.labels[s.indices], ds.class_count)
            w.writerow([s.owner, *hist.tolist(), len(s), repr(shard_imbalance(ds, s))])
