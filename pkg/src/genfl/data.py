"""Datasets, client partitions and per-client splits."""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Malformed input files or infeasible partition requests."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.labels) < 1 or len(self.features) != len(self.labels):
            raise DataError("dataset needs N >= 1 rows with one label each")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError("labels out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx):
        return self.features[idx], self.labels[idx]


class SplitPolicy(str, enum.Enum):
    NONE = "none"  # all data used for the posterior and the bound
    RANDOM_PRIOR = "random_prior"  # 10% validation, 90% posterior
    LEARNT_PRIOR_IID = "learnt_prior_iid"  # class-balanced halves
    LEARNT_PRIOR_NONIID = "learnt_prior_noniid"  # 10% / 40% / 50%


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray
    prior: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    posterior: np.ndarray | None = None
    validation: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.posterior is None:
            self.posterior = self.indices.copy()

    @property
    def m(self) -> int:
        """Size of the split used for posterior optimisation and the bound."""
        return len(self.posterior)


# ---------------------------------------------------------------- loading


def _read_header(buf, magic, ndims, path):
    if len(buf) < 4 + 4 * ndims:
        raise DataError(f"{path}: truncated header")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise DataError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndims}I", buf[4 : 4 + 4 * ndims])


def load_mnist_idx(images_path, labels_path, num_classes=10) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] by /255."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    img = images_path.read_bytes()
    lab = labels_path.read_bytes()
    n, rows, cols = _read_header(img, IDX_IMAGES_MAGIC, 3, images_path)
    (n_lab,) = _read_header(lab, IDX_LABELS_MAGIC, 1, labels_path)
    payload = img[16:]
    if len(payload) != n * rows * cols:
        raise DataError(f"{images_path}: expected {n * rows * cols} pixel bytes, found {len(payload)}")
    if len(lab) - 8 != n_lab:
        raise DataError(f"{labels_path}: expected {n_lab} label bytes, found {len(lab) - 8}")
    if n != n_lab:
        raise DataError(f"image count {n} != label count {n_lab}")
    x = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows * cols) / 255.0
    y = np.frombuffer(lab[8:], dtype=np.uint8).astype(np.int64)
    return Dataset(x, y, num_classes)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images ``[N, rows, cols]`` and labels ``[N]`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# -------------------------------------------------------------- synthetic


def class_centroids(num_classes, d, class_separation):
    """Centroids with pairwise distance >= class_separation.

    Scaled basis vectors when there are no more classes than dimensions
    (pairwise distance exactly ``class_separation``), otherwise a fixed
    pseudo-random layout spread by rejection.
    """
    if num_classes <= d:
        c = np.zeros((num_classes, d))
        c[np.arange(num_classes), np.arange(num_classes)] = class_separation / np.sqrt(2.0)
        return c
    rng = np.random.default_rng(0)
    radius = class_separation * num_classes
    pts = []
    while len(pts) < num_classes:
        p = rng.uniform(-radius, radius, d)
        if all(np.linalg.norm(p - q) >= class_separation for q in pts):
            pts.append(p)
    return np.array(pts)


_SYNTH_MARGIN = 6.0  # within-class std units kept on each side before clipping


def gen_synthetic(num_classes, n_per_class, d, class_separation, seed) -> Dataset:
    """Gaussian blobs with unit within-class std, mapped into [0, 1].

    The affine map depends only on the centroids, not the sample, so fresh
    draws with another seed come from exactly the same distribution.
    """
    if min(num_classes, n_per_class, d) < 1:
        raise DataError("num_classes, n_per_class and d must be positive")
    rng = np.random.default_rng(seed)
    centroids = class_centroids(num_classes, d, class_separation)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    x = centroids[labels] + rng.standard_normal((len(labels), d))
    lo = centroids.min() - _SYNTH_MARGIN
    hi = centroids.max() + _SYNTH_MARGIN
    x = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    perm = rng.permutation(len(labels))
    return Dataset(x[perm], labels[perm], num_classes)


def save_dataset_text(ds: Dataset, path):
    """Delimited-text fixture: ``label,f0,f1,...`` per row, full precision."""
    table = np.column_stack([ds.labels.astype(np.float64), ds.features])
    header = f"num_classes={ds.num_classes}"
    np.savetxt(path, table, delimiter=",", fmt="%.17g", header=header)


def load_dataset_text(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline()
    if not header.startswith("# num_classes="):
        raise DataError(f"{path}: missing num_classes header")
    num_classes = int(header.split("=", 1)[1])
    table = np.loadtxt(path, delimiter=",", ndmin=2)
    return Dataset(table[:, 1:], table[:, 0].astype(np.int64), num_classes)


# ------------------------------------------------------------- partitions


def partition_iid_balanced(ds: Dataset, K: int, per_class_count: int, seed) -> list[ClientShard]:
    """Every client gets exactly ``per_class_count`` points of each class."""
    if K < 1 or per_class_count < 1:
        raise DataError("K and per_class_count must be positive")
    rng = np.random.default_rng(seed)
    need = K * per_class_count
    per_client = [[] for _ in range(K)]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < need:
            raise DataError(f"class {c} has {len(idx)} points, {need} needed (short by {need - len(idx)})")
        idx = rng.permutation(idx)
        for k in range(K):
            per_client[k].append(idx[k * per_class_count : (k + 1) * per_class_count])
    dropped = len(ds) - need * ds.num_classes
    if dropped:
        log.warning("iid partition leaves %d points unassigned", dropped)
    return [ClientShard(k, np.sort(np.concatenate(parts))) for k, parts in enumerate(per_client)]


def partition_sorted_shards(ds: Dataset, K: int, shard_size: int = 300, shards_per_client: int = 2, seed=0):
    """Sort by label, cut contiguous chunks, hand out chunks at random."""
    if min(K, shard_size, shards_per_client) < 1:
        raise DataError("K, shard_size and shards_per_client must be positive")
    n_chunks = len(ds) // shard_size
    need = K * shards_per_client
    if need > n_chunks:
        raise DataError(
            f"{need} chunks of {shard_size} requested but only {n_chunks} available "
            f"(short by {(need - n_chunks) * shard_size} points)"
        )
    order = np.argsort(ds.labels, kind="stable")
    chunks = [order[j * shard_size : (j + 1) * shard_size] for j in range(n_chunks)]
    pick = np.random.default_rng(seed).permutation(n_chunks)[:need]
    if need < n_chunks or len(ds) % shard_size:
        log.warning("sorted-shard partition leaves %d points unassigned", len(ds) - need * shard_size)
    shards = []
    for k in range(K):
        ids = pick[k * shards_per_client : (k + 1) * shards_per_client]
        shards.append(ClientShard(k, np.concatenate([chunks[j] for j in ids])))
    return shards


def _stratified_take(rng, idx, labels, n_take):
    """Pick ``n_take`` of ``idx`` keeping class proportions (largest remainder)."""
    classes, counts = np.unique(labels[idx], return_counts=True)
    exact = counts * n_take / counts.sum()
    quota = np.floor(exact).astype(int)
    short = n_take - quota.sum()
    if short:
        order = np.lexsort((classes, -(exact - quota)))
        quota[order[:short]] += 1
    taken = [
        rng.permutation(idx[labels[idx] == c])[:q] for c, q in zip(classes, quota)
    ]
    taken = np.sort(np.concatenate(taken)) if taken else np.empty(0, dtype=np.int64)
    rest = np.setdiff1d(idx, taken)
    return taken, rest


def apply_split_policy(shard: ClientShard, policy, labels, seed) -> ClientShard:
    """Carve a shard into prior / posterior / validation index sets."""
    policy = SplitPolicy(policy)
    rng = np.random.default_rng(seed)
    idx = np.sort(shard.indices)
    n = len(idx)
    empty = np.empty(0, dtype=np.int64)
    if policy is SplitPolicy.NONE:
        return replace(shard, prior=empty, posterior=idx, validation=empty)
    if policy is SplitPolicy.LEARNT_PRIOR_IID:
        if n < 2:
            raise DataError(f"client {shard.client_id}: {n} points cannot be halved")
        prior, post = _stratified_take(rng, idx, labels, n // 2)
        return replace(shard, prior=prior, posterior=post, validation=empty)
    n_val = int(round(0.1 * n))
    if n_val < 1:
        raise DataError(f"client {shard.client_id}: {n} points too few for a 10% validation split")
    val = np.sort(rng.choice(idx, n_val, replace=False))
    rest = np.setdiff1d(idx, val)
    if policy is SplitPolicy.RANDOM_PRIOR:
        return replace(shard, prior=empty, posterior=rest, validation=val)
    n_prior = int(round(0.4 * n))
    if n_prior < 1 or n_prior >= len(rest):
        raise DataError(f"client {shard.client_id}: {n} points too few for a 10/40/50 split")
    prior, post = _stratified_take(rng, rest, labels, n_prior)
    return replace(shard, prior=prior, posterior=post, validation=val)
