"""Datasets, Dirichlet non-i.i.d. partitioning, and vector augmentations.

Shard 0 of a partition with ``public_shard=True`` is the shared anchor
corpus: it never participates in contrastive local training but every
client can see it. The remaining shards belong to clients 1..K.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import (
    DataFormatError,
    ParameterError,
    PartitionError,
)

log = logging.getLogger(__name__)

MAX_PARTITION_RETRIES = 200


@dataclass
class Dataset:
    """Feature matrix plus integer labels and stable global sample ids."""

    features: np.ndarray  # (n_samples, in_dim) float64
    labels: np.ndarray    # (n_samples,) int64 in [0, n_classes)
    ids: np.ndarray       # (n_samples,) int64, unique
    n_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.features.ndim != 2:
            raise ParameterError("features must be a 2-D matrix")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ParameterError("labels and ids must have one entry per sample")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ParameterError("label outside [0, n_classes)")
        if len(np.unique(self.ids)) != n:
            raise ParameterError("sample ids must be unique")
        if not np.isfinite(self.features).all():
            raise ParameterError("features contain NaN or Inf")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def in_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.ids[idx],
                       self.n_classes)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass
class PartitionConfig:
    num_clients: int
    alpha: float
    public_shard: bool = True
    seed: int = 0
    min_shard_size: int = 1

    def __post_init__(self):
        if self.num_clients < 1:
            raise ParameterError("num_clients must be >= 1")
        if self.alpha <= 0.0:
            raise ParameterError("alpha must be > 0")
        if self.min_shard_size < 0:
            raise ParameterError("min_shard_size must be >= 0")


@dataclass
class AugmentationConfig:
    """Per-sample vector augmentations: additive noise, feature masking,
    global scaling. The same family serves both local training and the
    distillation phase."""

    noise_sigma: float = 0.0
    mask_prob: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.noise_sigma < 0.0:
            raise ParameterError("noise_sigma must be >= 0")
        if not (0.0 <= self.mask_prob <= 1.0):
            raise ParameterError("mask_prob must be in [0, 1]")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise ParameterError("scale_range must satisfy 0 < lo <= hi")
        self.scale_range = (float(lo), float(hi))


def identity_augmentation() -> AugmentationConfig:
    return AugmentationConfig(0.0, 0.0, (1.0, 1.0))


def synth_gaussian_blobs(n_classes: int, per_class: int, in_dim: int,
                         spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters at seeded random centers.

    Centers are standard-normal draws, so typical center separation is a
    few units and ``spread`` controls how much the classes overlap.
    """
    if n_classes < 1 or per_class < 1 or in_dim < 1:
        raise ParameterError("counts must be >= 1")
    if spread <= 0.0:
        raise ParameterError("spread must be > 0")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, size=(n_classes, in_dim))
    features = np.empty((n_classes * per_class, in_dim))
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    for c in range(n_classes):
        block = slice(c * per_class, (c + 1) * per_class)
        features[block] = centers[c] + rng.normal(0.0, spread,
                                                  size=(per_class, in_dim))
        labels[block] = c
    ids = np.arange(n_classes * per_class, dtype=np.int64)
    return Dataset(features, labels, ids, n_classes)


def load_csv_dataset(path: str) -> Dataset:
    """Read "f1,...,fd,label" rows. Row order is preserved; ids are the
    0-based row index."""
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
                if width < 2:
                    raise DataFormatError(
                        f"{path}:{lineno}: need at least one feature and a label")
            elif len(cells) != width:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {width} columns, got {len(cells)}")
            try:
                feats = [float(c) for c in cells[:-1]]
                label = int(float(cells[-1]))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-numeric cell ({exc})")
            if label < 0:
                raise DataFormatError(f"{path}:{lineno}: negative label")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise DataFormatError(f"{path}: empty dataset")
    features = np.asarray(rows, dtype=np.float64)
    label_arr = np.asarray(labels, dtype=np.int64)
    return Dataset(features, label_arr, np.arange(len(rows), dtype=np.int64),
                   int(label_arr.max()) + 1)


def save_csv_dataset(ds: Dataset, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(ds)):
            feats = ",".join(repr(float(v)) for v in ds.features[i])
            fh.write(f"{feats},{int(ds.labels[i])}\n")


def dirichlet_partition(ds: Dataset, cfg: PartitionConfig) -> list[Dataset]:
    """Split ``ds`` into ``num_clients`` shards (plus a leading public shard
    when configured) by per-class Dirichlet(alpha) proportions.

    Per class, a proportion vector over shards is drawn and that class's
    samples are allocated by cumulative rounding. Allocations violating
    ``min_shard_size`` are redrawn a bounded number of times.
    """
    if len(ds) == 0:
        raise ParameterError("cannot partition an empty dataset")
    n_shards = cfg.num_clients + (1 if cfg.public_shard else 0)
    if n_shards == 1:
        return [ds.subset(np.arange(len(ds)))]
    rng = np.random.default_rng(cfg.seed)
    class_rows = [np.flatnonzero(ds.labels == c) for c in range(ds.n_classes)]
    for attempt in range(MAX_PARTITION_RETRIES):
        shard_rows: list[list[np.ndarray]] = [[] for _ in range(n_shards)]
        for rows in class_rows:
            if rows.size == 0:
                continue
            perm = rng.permutation(rows)
            props = rng.dirichlet(np.full(n_shards, cfg.alpha))
            cuts = (np.cumsum(props)[:-1] * rows.size).astype(np.int64)
            for shard_id, chunk in enumerate(np.split(perm, cuts)):
                shard_rows[shard_id].append(chunk)
        sizes = [sum(c.size for c in chunks) for chunks in shard_rows]
        if min(sizes) >= cfg.min_shard_size:
            shards = []
            for chunks in shard_rows:
                merged = np.sort(np.concatenate(chunks)) if chunks else \
                    np.empty(0, dtype=np.int64)
                shards.append(ds.subset(merged))
            return shards
        log.debug("partition attempt %d undersized (min=%d), redrawing",
                  attempt + 1, min(sizes))
    raise PartitionError(
        f"no allocation met min_shard_size={cfg.min_shard_size} after "
        f"{MAX_PARTITION_RETRIES} attempts (alpha={cfg.alpha}, shards={n_shards})")


def partition_summary(shards: list[Dataset]) -> list[dict]:
    """Per-shard size and class histogram, JSON-friendly."""
    return [
        {
            "shard_id": i,
            "size": len(s),
            "class_histogram": [int(v) for v in s.class_histogram()],
        }
        for i, s in enumerate(shards)
    ]


def split_dataset(ds: Dataset, train_fraction: float, seed: int
                  ) -> tuple[Dataset, Dataset]:
    """Deterministic shuffle split into (train, test)."""
    if not (0.0 < train_fraction < 1.0):
        raise ParameterError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_train = int(round(train_fraction * len(ds)))
    n_train = min(max(n_train, 1), len(ds) - 1)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


def augment(batch: np.ndarray, cfg: AugmentationConfig,
            rng: np.random.Generator) -> np.ndarray:
    """One stochastic view of ``batch``: additive Gaussian noise, Bernoulli
    feature masking, then a per-sample uniform scale factor.

    Two calls with the same generator give two independent views. The
    identity config returns the input values unchanged.
    """
    batch = np.asarray(batch, dtype=np.float64)
    out = batch.copy()
    if cfg.noise_sigma > 0.0:
        out += rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    if cfg.mask_prob > 0.0:
        out *= rng.random(out.shape) >= cfg.mask_prob
    lo, hi = cfg.scale_range
    if hi > lo:
        out *= rng.uniform(lo, hi, size=(out.shape[0], 1))
    elif lo != 1.0:
        out *= lo
    return out
