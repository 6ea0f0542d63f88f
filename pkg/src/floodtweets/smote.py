"""Synthetic Minority Oversampling (SMOTE) over extracted feature vectors.

Brute-force neighbour search; desk-scale sets never justify a spatial index.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import INDEX_TO_LABEL, Label
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

STRATEGIES = ("smote_features", "resample_duplicates")


@dataclass(frozen=True)
class SmoteConfig:
    k_neighbors: int = 5
    inflation_factor: int = 3
    rng_seed: int = 0
    distance: str = "euclidean"
    strategy: str = "smote_features"

    def __post_init__(self):
        if int(self.k_neighbors) < 1:
            raise ConfigError(f"smote.k_neighbors must be >= 1, got {self.k_neighbors}")
        if int(self.inflation_factor) < 1:
            raise ConfigError(f"smote.inflation_factor must be >= 1, got {self.inflation_factor}")
        if self.distance != "euclidean":
            raise ConfigError(f"smote.distance must be 'euclidean', got {self.distance!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"smote.strategy must be one of {STRATEGIES}, got {self.strategy!r}")


@dataclass
class LabeledFeatureSet:
    """Row-aligned feature matrix and integer class labels."""

    vectors: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim == 1:
            self.vectors = self.vectors.reshape(-1, 1) if self.vectors.size else self.vectors.reshape(0, 0)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.vectors.ndim != 2:
            raise DataError("feature vectors must form a 2-D matrix")
        if len(self.vectors) != len(self.labels):
            raise DataError(f"{len(self.vectors)} vectors but {len(self.labels)} labels")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("feature vectors contain non-finite entries")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def counts(self) -> dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


def minority_label(labels: np.ndarray) -> int:
    counts = {int(v): int(c) for v, c in zip(*np.unique(labels, return_counts=True))}
    if len(counts) == 1:
        return next(iter(counts))
    if len(counts) != 2:
        raise DataError(f"expected exactly two classes, found {len(counts)}")
    (a, na), (b, nb) = sorted(counts.items())
    if na == nb:
        raise DataError("classes are balanced; no strict minority to oversample")
    return a if na < nb else b


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    """Exact squared euclidean distances by explicit differences (no dot-product expansion)."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    out = np.empty((n, n), dtype=np.float64)
    step = max(1, int(2e7 // max(1, n * x.shape[1])))
    for s in range(0, n, step):
        diff = x[s:s + step, None, :] - x[None, :, :]
        out[s:s + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def knn_minority(fs: LabeledFeatureSet, k: int, minority: Optional[int] = None) -> dict[int, list[int]]:
    """k nearest minority neighbours of every minority point, keyed by row index.

    Ties go to the lower row index and a point is never its own neighbour.
    """
    if fs.dim < 1:
        raise DataError("feature dimensionality must be >= 1")
    minority = minority_label(fs.labels) if minority is None else minority
    idx = np.flatnonzero(fs.labels == minority)
    if len(idx) <= k:
        raise DataError(
            f"minority class has {len(idx)} members but k_neighbors={k}; lower k below the minority size"
        )
    d = pairwise_sq_dists(fs.vectors[idx])
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return {int(idx[i]): [int(idx[j]) for j in order[i]] for i in range(len(idx))}


def synthesize(x_i, x_nn, lam: float) -> np.ndarray:
    """Point at fraction ``lam`` of the way from ``x_i`` to ``x_nn``."""
    x_i, x_nn = np.asarray(x_i), np.asarray(x_nn)
    if x_i.shape != x_nn.shape:
        raise DataError(f"dimension mismatch: {x_i.shape} vs {x_nn.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    dtype = np.result_type(x_i.dtype, x_nn.dtype, np.float32)
    a, b = x_i.astype(np.float64), x_nn.astype(np.float64)
    out = ((1.0 - lam) * a + lam * b).astype(dtype)
    # rounding must not push a coordinate outside its segment
    lo = np.minimum(x_i, x_nn).astype(dtype)
    hi = np.maximum(x_i, x_nn).astype(dtype)
    return np.clip(out, lo, hi)


def oversample(fs: LabeledFeatureSet, cfg: SmoteConfig) -> LabeledFeatureSet:
    """Inflate the minority class to ``inflation_factor`` times its size.

    Originals are kept in place; synthetic rows are appended. Base points are
    taken round-robin, each paired with a uniformly drawn one of its k
    neighbours and a uniform interpolation fraction.
    """
    values, sizes = np.unique(fs.labels, return_counts=True)
    if len(values) != 2:
        raise DataError(f"oversampling needs exactly two classes, found {len(values)}")
    if sizes[0] == sizes[1]:
        log.warning("SMOTE skipped: classes already balanced (%d / %d)", sizes[0], sizes[1])
        return LabeledFeatureSet(fs.vectors.copy(), fs.labels.copy(), dict(fs.meta))
    minority = minority_label(fs.labels)
    majority = int(values[values != minority][0])
    idx = np.flatnonzero(fs.labels == minority)
    n_min, n_maj = len(idx), int(np.sum(fs.labels == majority))
    if n_min <= cfg.k_neighbors:
        raise DataError(
            f"minority class has {n_min} members but k_neighbors={cfg.k_neighbors}; lower k below the minority size"
        )
    if cfg.inflation_factor * n_min > n_maj:
        log.warning("SMOTE factor %d lifts minority %d above majority %d", cfg.inflation_factor, n_min, n_maj)
    if cfg.inflation_factor == 1:
        return LabeledFeatureSet(fs.vectors.copy(), fs.labels.copy(), dict(fs.meta))

    neighbours = knn_minority(fs, cfg.k_neighbors, minority)
    rng = np.random.default_rng(cfg.rng_seed)
    n_syn = (cfg.inflation_factor - 1) * n_min
    synth = np.empty((n_syn, fs.dim), dtype=np.result_type(fs.vectors.dtype, np.float32))
    origin = np.empty((n_syn, 2), dtype=np.int64)
    for s in range(n_syn):
        base = int(idx[s % n_min])
        nn = neighbours[base][int(rng.integers(cfg.k_neighbors))]
        lam = float(rng.random())
        synth[s] = synthesize(fs.vectors[base], fs.vectors[nn], lam)
        origin[s] = (base, nn)
    vectors = np.concatenate([fs.vectors.astype(synth.dtype), synth])
    labels = np.concatenate([fs.labels, np.full(n_syn, minority, dtype=np.int64)])
    meta = {**fs.meta, "synthetic_origin": origin}
    log.info("SMOTE: minority %d -> %d, majority %d", n_min, n_min * cfg.inflation_factor, n_maj)
    return LabeledFeatureSet(vectors, labels, meta)


def duplicate_indices(labels, cfg: SmoteConfig) -> list[int]:
    """Row indices for duplicate resampling: every minority row repeated ``factor`` times in total."""
    labels = np.asarray(labels, dtype=np.int64)
    sizes = np.unique(labels, return_counts=True)[1]
    if len(sizes) == 2 and sizes[0] == sizes[1]:
        log.warning("resampling skipped: classes already balanced (%d / %d)", sizes[0], sizes[1])
        return list(range(len(labels)))
    minority = minority_label(labels)
    idx = np.flatnonzero(labels == minority)
    extra = [int(idx[s % len(idx)]) for s in range((cfg.inflation_factor - 1) * len(idx))]
    return list(range(len(labels))) + extra


# ---------------------------------------------------------------------------
# feature files: header (n, d) as two little-endian uint64, row-major float32
# matrix, then one int8 label per row (-1 = unlabeled)

_HEADER = struct.Struct("<QQ")


def write_features(path, fs: LabeledFeatureSet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f"f{j}" for j in range(fs.dim)] + ["label"])
            for row, lab in zip(fs.vectors.astype(np.float32), fs.labels):
                lab = "" if lab < 0 else INDEX_TO_LABEL[int(lab)].value
                w.writerow([repr(float(v)) for v in row] + [lab])
        return path
    n, d = fs.vectors.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(n, d))
        fh.write(np.ascontiguousarray(fs.vectors, dtype="<f4").tobytes())
        fh.write(fs.labels.astype(np.int8).tobytes())
    return path


def read_features(path) -> LabeledFeatureSet:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"feature file not found: {path}")
    if path.suffix.lower() == ".csv":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][-1] != "label":
            raise DataError(f"{path}: feature CSV needs a header ending in 'label'")
        d = len(rows[0]) - 1
        vecs = np.array([[float(v) for v in r[:d]] for r in rows[1:]], dtype=np.float32).reshape(-1, d)
        labels = [Label(r[d]).index if r[d] else -1 for r in rows[1:]]
        return LabeledFeatureSet(vecs, labels)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated feature file")
    n, d = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 4 * n * d + n
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for n={n}, d={d}, found {len(raw)}")
    vecs = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d).astype(np.float32)
    labels = np.frombuffer(raw, dtype=np.int8, count=n, offset=_HEADER.size + 4 * n * d).astype(np.int64)
    return LabeledFeatureSet(vecs, labels)
