"""Embedding dataset container, on-disk formats, and synthetic generation.

A dataset is an immutable N x d float32 feature matrix plus optional
integer labels, optional source-slide (WSI) identifiers, and a flag
recording whether rows are unit-normalized.

Two on-disk formats are supported:

* ``EMB1`` binary: magic ``EMB1``, one flags byte (bit0 labels present,
  bit1 wsi_ids present, bit2 normalized), little-endian u32 N and d,
  N*d little-endian float32 features in row-major order, then N u32
  labels and N u32 wsi_ids when present. Round-trips bit-exactly.
* CSV: header ``f0,...,f{d-1}[,label][,wsi]``, one sample per row,
  decimal floats. Human-readable fallback; the normalized flag is not
  stored and loads as False.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ._seeding import check_seed
from ._validation import as_labels, check_nonzero_rows

_MAGIC = b"EMB1"
_FLAG_LABELS = 0x01
_FLAG_WSI = 0x02
_FLAG_NORMALIZED = 0x04
_KNOWN_FLAGS = _FLAG_LABELS | _FLAG_WSI | _FLAG_NORMALIZED

#: Row norms may deviate from 1 by at most this much when `normalized` is set.
UNIT_NORM_TOL = 1e-5


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class EmbeddingDataset:
    """Immutable collection of embedding vectors with optional metadata.

    Attributes:
        features: (N, d) float32 matrix of embedding coordinates.
        labels: optional (N,) int64 class identifiers (non-negative).
        wsi_ids: optional (N,) int64 source-slide identifiers (non-negative).
        class_names: optional mapping from class id to display name.
        normalized: True when every row has unit L2 norm.
    """

    features: np.ndarray
    labels: np.ndarray | None = None
    wsi_ids: np.ndarray | None = None
    class_names: dict[int, str] | None = None
    normalized: bool = False

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got ndim={feats.ndim}")
        n, d = feats.shape
        if n < 1 or d < 1:
            raise ValueError(f"features must be at least 1x1, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "features", _frozen(feats))

        for name in ("labels", "wsi_ids"):
            value = getattr(self, name)
            if value is None:
                continue
            value = as_labels(value, n=n, name=name)
            if np.any(value < 0):
                raise ValueError(f"{name} must be non-negative")
            object.__setattr__(self, name, _frozen(value))

        if self.normalized:
            norms = np.linalg.norm(feats.astype(np.float64), axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
            if bad.size:
                raise ValueError(
                    f"normalized is set but row {int(bad[0])} has norm {norms[bad[0]]:.6g}"
                )

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def distinct_labels(self) -> np.ndarray:
        """Sorted distinct class identifiers; errors when labels are absent."""
        if self.labels is None:
            raise ValueError("dataset has no labels")
        return np.unique(self.labels)

    def subset(self, indices: np.ndarray) -> "EmbeddingDataset":
        """Row-subset with metadata carried along."""
        indices = np.asarray(indices, dtype=np.int64)
        return EmbeddingDataset(
            features=self.features[indices],
            labels=None if self.labels is None else self.labels[indices],
            wsi_ids=None if self.wsi_ids is None else self.wsi_ids[indices],
            class_names=self.class_names,
            normalized=self.normalized,
        )


def save_embeddings(ds: EmbeddingDataset, path) -> None:
    """Write a dataset in the EMB1 binary format (bit-exact round trip)."""
    flags = 0
    if ds.labels is not None:
        flags |= _FLAG_LABELS
        if np.any(ds.labels >= 2**32):
            raise ValueError("labels exceed u32 range")
    if ds.wsi_ids is not None:
        flags |= _FLAG_WSI
        if np.any(ds.wsi_ids >= 2**32):
            raise ValueError("wsi_ids exceed u32 range")
    if ds.normalized:
        flags |= _FLAG_NORMALIZED

    n, d = ds.features.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BII", flags, n, d))
        fh.write(ds.features.astype("<f4").tobytes(order="C"))
        if ds.labels is not None:
            fh.write(ds.labels.astype("<u4").tobytes())
        if ds.wsi_ids is not None:
            fh.write(ds.wsi_ids.astype("<u4").tobytes())


def _load_emb1(path) -> EmbeddingDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 13 or raw[:4] != _MAGIC:
        raise ValueError(f"bad magic in {path!s}: expected EMB1 header")
    flags, n, d = struct.unpack_from("<BII", raw, 4)
    if flags & ~_KNOWN_FLAGS:
        raise ValueError(f"unknown flag bits 0x{flags:02x} in {path!s}")
    if n < 1 or d < 1:
        raise ValueError(f"declared shape {n}x{d} is invalid in {path!s}")

    expected = 13 + 4 * n * d
    if flags & _FLAG_LABELS:
        expected += 4 * n
    if flags & _FLAG_WSI:
        expected += 4 * n
    if len(raw) != expected:
        raise ValueError(
            f"payload size mismatch in {path!s}: declared {expected} bytes, found {len(raw)}"
        )

    offset = 13
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    offset += 4 * n * d
    labels = wsi = None
    if flags & _FLAG_LABELS:
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=offset).astype(np.int64)
        offset += 4 * n
    if flags & _FLAG_WSI:
        wsi = np.frombuffer(raw, dtype="<u4", count=n, offset=offset).astype(np.int64)

    return EmbeddingDataset(
        features=feats,
        labels=labels,
        wsi_ids=wsi,
        normalized=bool(flags & _FLAG_NORMALIZED),
    )


def _load_csv(path) -> EmbeddingDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"empty csv file {path!s}") from None
        rows = list(reader)

    header = [h.strip() for h in header]
    has_wsi = bool(header) and header[-1] == "wsi"
    tail = header[:-1] if has_wsi else header
    has_label = bool(tail) and tail[-1] == "label"
    d = len(tail) - (1 if has_label else 0)
    expected = [f"f{i}" for i in range(d)]
    if tail[:d] != expected:
        raise ValueError(f"csv header must start with f0..f{d - 1}, got {header!r}")
    if d < 1 or not rows:
        raise ValueError(f"csv file {path!s} has no data")

    feats = np.empty((len(rows), d), dtype=np.float32)
    labels = np.empty(len(rows), dtype=np.int64) if has_label else None
    wsi = np.empty(len(rows), dtype=np.int64) if has_wsi else None
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError(f"csv row {i} has {len(row)} fields, expected {len(header)}")
        feats[i] = np.float32([float(v) for v in row[:d]])
        if has_label:
            labels[i] = int(row[d])
        if has_wsi:
            wsi[i] = int(row[-1])
    return EmbeddingDataset(features=feats, labels=labels, wsi_ids=wsi, normalized=False)


def load_embeddings(path, format: str = "binary") -> EmbeddingDataset:
    """Load a dataset from an EMB1 (``binary``) or ``csv`` file."""
    if format == "binary":
        return _load_emb1(path)
    if format == "csv":
        return _load_csv(path)
    raise ValueError(f"unknown format {format!r}: expected 'binary' or 'csv'")


def save_embeddings_csv(ds: EmbeddingDataset, path) -> None:
    """Write a dataset as CSV (decimal floats; normalized flag not stored)."""
    header = [f"f{i}" for i in range(ds.dim)]
    if ds.labels is not None:
        header.append("label")
    if ds.wsi_ids is not None:
        header.append("wsi")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n_samples):
            # repr(float(x)) prints the float32 value exactly enough to round-trip
            row = [repr(float(v)) for v in ds.features[i]]
            if ds.labels is not None:
                row.append(str(int(ds.labels[i])))
            if ds.wsi_ids is not None:
                row.append(str(int(ds.wsi_ids[i])))
            writer.writerow(row)


def l2_normalize(ds: EmbeddingDataset) -> EmbeddingDataset:
    """Scale every row to unit L2 norm; rejects zero-norm rows."""
    feats = ds.features.astype(np.float64)
    norms = check_nonzero_rows(feats, name="features")
    normed = (feats / norms[:, None]).astype(np.float32)
    return replace(ds, features=normed, normalized=True)


def leave_one_class_out(
    ds: EmbeddingDataset, novel_class: int
) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    """Split off one class as novel: returns (base without it, full dataset)."""
    labels = ds.distinct_labels()
    novel_class = int(novel_class)
    if novel_class not in labels:
        raise ValueError(f"unknown class {novel_class}: dataset has {labels.tolist()}")
    keep = np.flatnonzero(ds.labels != novel_class)
    if keep.size == 0:
        raise ValueError(f"empty base: every sample belongs to class {novel_class}")
    return ds.subset(keep), ds


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the Gaussian-mixture embedding generator.

    Each class is a mixture of `clusters_per_class` Gaussians with means on
    the sphere of radius `mean_scale`. When `shared_variation` is set, every
    novel-class cluster reuses the covariance of a base-class cluster, so
    base and novel classes differ only in where their means sit.
    """

    dim: int = 32
    base_classes: int = 7
    novel_classes: int = 2
    clusters_per_class: int = 2
    samples_per_class: int = 200
    mean_scale: float = 1.0
    covariance_scale: float = 0.3
    shared_variation: bool = True
    wsi_count: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("dim", "base_classes", "novel_classes", "clusters_per_class", "samples_per_class"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.mean_scale <= 0 or self.covariance_scale < 0:
            raise ValueError("mean_scale must be positive and covariance_scale non-negative")
        if int(self.wsi_count) < 0:
            raise ValueError("wsi_count must be non-negative")
        check_seed(self.seed)


@dataclass(frozen=True)
class SyntheticComponents:
    """Ground-truth mixture parameters backing a generated dataset pair.

    `means` and `factors` have one entry per (class, cluster) in class-major
    order over base classes then novel classes; covariance of a cluster is
    ``factor @ factor.T``.
    """

    spec: SyntheticSpec
    means: np.ndarray  # (n_classes * clusters_per_class, dim)
    factors: np.ndarray  # (n_classes * clusters_per_class, dim, dim)
    base_cluster_count: int = field(default=0)

    def covariance(self, index: int) -> np.ndarray:
        f = self.factors[index]
        return f @ f.T


#: Per-axis decay of the cluster spectra; variance concentrates in the
#: first few directions so covariance orientation carries real signal.
_SPECTRUM_DECAY = 0.8


def _random_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def synthetic_components(spec: SyntheticSpec) -> SyntheticComponents:
    """Deterministically derive the cluster means and covariance factors.

    Every cluster covariance has the same geometrically decaying spectrum
    (scaled by covariance_scale) but an independent random orientation:
    intra-class variation concentrates along a few cluster-specific
    directions instead of spreading isotropically.
    """
    rng = np.random.default_rng(np.random.SeedSequence([check_seed(spec.seed), 0]))
    d = spec.dim
    m = spec.clusters_per_class
    n_base = spec.base_classes * m
    n_total = (spec.base_classes + spec.novel_classes) * m

    directions = rng.standard_normal((n_total, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = spec.mean_scale * directions

    spectrum = _SPECTRUM_DECAY ** np.arange(d)
    spectrum *= np.sqrt(d / np.sum(spectrum * spectrum))  # mean squared weight 1
    factors = np.zeros((n_total, d, d))
    for j in range(n_base):
        factors[j] = spec.covariance_scale * _random_rotation(rng, d) * spectrum
    if spec.shared_variation:
        for j in range(n_base, n_total):
            factors[j] = factors[(j - n_base) % n_base]
    else:
        for j in range(n_base, n_total):
            factors[j] = spec.covariance_scale * _random_rotation(rng, d) * spectrum

    return SyntheticComponents(spec=spec, means=means, factors=factors, base_cluster_count=n_base)


def _sample_classes(
    comp: SyntheticComponents, class_range: range, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    spec = comp.spec
    m = spec.clusters_per_class
    per_cluster = [spec.samples_per_class // m] * m
    for j in range(spec.samples_per_class % m):
        per_cluster[j] += 1

    feats, labels = [], []
    for cls in class_range:
        for j in range(m):
            idx = cls * m + j
            u = rng.standard_normal((per_cluster[j], spec.dim))
            feats.append(comp.means[idx] + u @ comp.factors[idx].T)
            labels.append(np.full(per_cluster[j], cls, dtype=np.int64))
    return np.vstack(feats).astype(np.float32), np.concatenate(labels)


def generate_synthetic(spec: SyntheticSpec) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    """Generate a (base, novel) dataset pair with disjoint label sets.

    Pure function of its argument: equal SyntheticSpec values produce
    bit-identical datasets. Labels 0..base_classes-1 are base; the rest
    are novel.
    """
    comp = synthetic_components(spec)
    rng = np.random.default_rng(np.random.SeedSequence([check_seed(spec.seed), 1]))

    base_feats, base_labels = _sample_classes(comp, range(spec.base_classes), rng)
    novel_feats, novel_labels = _sample_classes(
        comp, range(spec.base_classes, spec.base_classes + spec.novel_classes), rng
    )

    base_wsi = novel_wsi = None
    if spec.wsi_count > 0:
        base_wsi = rng.integers(0, spec.wsi_count, base_feats.shape[0])
        novel_wsi = rng.integers(0, spec.wsi_count, novel_feats.shape[0])

    base = EmbeddingDataset(features=base_feats, labels=base_labels, wsi_ids=base_wsi)
    novel = EmbeddingDataset(features=novel_feats, labels=novel_labels, wsi_ids=novel_wsi)
    return base, novel


def concat_datasets(a: EmbeddingDataset, b: EmbeddingDataset) -> EmbeddingDataset:
    """Stack two datasets; metadata must be consistently present or absent."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if (a.labels is None) != (b.labels is None) or (a.wsi_ids is None) != (b.wsi_ids is None):
        raise ValueError("datasets disagree on labels/wsi_ids presence")
    names = None
    if a.class_names or b.class_names:
        names = {**(a.class_names or {}), **(b.class_names or {})}
    return EmbeddingDataset(
        features=np.vstack([a.features, b.features]),
        labels=None if a.labels is None else np.concatenate([a.labels, b.labels]),
        wsi_ids=None if a.wsi_ids is None else np.concatenate([a.wsi_ids, b.wsi_ids]),
        class_names=names,
        normalized=a.normalized and b.normalized,
    )
