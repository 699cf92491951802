"""Prototype/covariance dictionaries, latent augmentation, calibration.

The dictionary pairs each cluster prototype with a summary of how that
cluster's embeddings vary. A novel embedding z is augmented by finding
the most cosine-similar prototype and adding zero-mean Gaussian noise
drawn from that cluster's covariance: z_aug = z + delta.

Covariance granularities:

* Full: one dense d x d matrix per cluster (default).
* Tied: a single dense matrix estimated from the whole base set.
* Diag: per-dimension variances per cluster.
* Spherical: one scalar variance per cluster (mean of the Diag entries).
* None: zero covariance; augmentation copies z.

All covariances use the population (divide by n) convention. Dense
covariances get ridge_eps added to the diagonal before Cholesky
factorization so rank-deficient clusters (n_i < d) stay factorable;
Diag/Spherical factors are plain square roots of the variances.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._seeding import check_seed
from ._validation import as_matrix, as_vector
from .cluster import nearest_prototype_cosine
from .store import EmbeddingDataset, load_embeddings, save_embeddings


class CovarianceType(enum.Enum):
    FULL = "full"
    TIED = "tied"
    DIAG = "diag"
    SPHERICAL = "spherical"
    NONE = "none"

    @classmethod
    def parse(cls, value: "CovarianceType | str") -> "CovarianceType":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            options = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown covariance type {value!r}: expected one of {options}") from None


def _population_cov(rows: np.ndarray) -> np.ndarray:
    centered = rows - rows.mean(axis=0)
    return (centered.T @ centered) / rows.shape[0]


def _chol_with_ridge(cov: np.ndarray, ridge_eps: float, what: str) -> np.ndarray:
    ridged = cov + ridge_eps * np.eye(cov.shape[0])
    try:
        return np.linalg.cholesky(ridged)
    except np.linalg.LinAlgError:
        raise ValueError(
            f"Cholesky factorization failed for {what}; increase ridge_eps (currently {ridge_eps:g})"
        ) from None


@dataclass(frozen=True)
class BaseDictionary:
    """C entries of (prototype, covariance, sampling factor).

    `covariances` and `factors` follow the covariance type: (C, d, d) for
    Full, a single (d, d) for Tied, (C, d) variances / standard deviations
    for Diag, (C,) for Spherical, and None for the zero-covariance type.
    For Full/Tied, factor @ factor.T reconstructs covariance + ridge_eps*I.
    """

    prototypes: np.ndarray
    covariances: np.ndarray | None
    factors: np.ndarray | None
    covariance_type: CovarianceType
    ridge_eps: float
    source: str = "unsupervised"
    class_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        protos = np.asarray(self.prototypes, dtype=np.float64)
        if protos.ndim != 2 or protos.shape[0] < 1:
            raise ValueError("prototypes must be a non-empty 2-D matrix")
        protos.setflags(write=False)
        object.__setattr__(self, "prototypes", protos)
        if self.ridge_eps < 0:
            raise ValueError("ridge_eps must be non-negative")
        if self.source not in ("unsupervised", "supervised"):
            raise ValueError(f"source must be unsupervised or supervised, got {self.source!r}")
        for name in ("covariances", "factors"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.float64)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        if self.class_ids is not None:
            ids = np.asarray(self.class_ids, dtype=np.int64)
            ids.setflags(write=False)
            object.__setattr__(self, "class_ids", ids)

    @property
    def n_entries(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def covariance_dense(self, index: int) -> np.ndarray:
        """Entry's covariance expanded to a dense d x d matrix."""
        d = self.dim
        t = self.covariance_type
        if t is CovarianceType.FULL:
            return np.array(self.covariances[index])
        if t is CovarianceType.TIED:
            return np.array(self.covariances)
        if t is CovarianceType.DIAG:
            return np.diag(self.covariances[index])
        if t is CovarianceType.SPHERICAL:
            return float(self.covariances[index]) * np.eye(d)
        return np.zeros((d, d))

    def sampling_covariance(self, index: int) -> np.ndarray:
        """Covariance actually realized by sampled deltas (ridge included)."""
        dense = self.covariance_dense(index)
        if self.covariance_type in (CovarianceType.FULL, CovarianceType.TIED):
            dense = dense + self.ridge_eps * np.eye(self.dim)
        return dense


def _entries_from_groups(
    X: np.ndarray,
    groups: list[np.ndarray],
    cov_type: CovarianceType,
    ridge_eps: float,
    label_of: list[str],
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    d = X.shape[1]
    C = len(groups)
    prototypes = np.vstack([X[g].mean(axis=0) for g in groups])

    if cov_type is CovarianceType.NONE:
        return prototypes, None, None

    if cov_type is CovarianceType.TIED:
        cov = _population_cov(X)
        factor = _chol_with_ridge(cov, ridge_eps, "the tied covariance")
        return prototypes, cov, factor

    if cov_type is CovarianceType.FULL:
        covs = np.empty((C, d, d))
        factors = np.empty((C, d, d))
        for i, g in enumerate(groups):
            covs[i] = _population_cov(X[g])
            factors[i] = _chol_with_ridge(covs[i], ridge_eps, label_of[i])
        return prototypes, covs, factors

    variances = np.vstack([X[g].var(axis=0) for g in groups])  # population form
    if cov_type is CovarianceType.DIAG:
        return prototypes, variances, np.sqrt(variances)
    # spherical: scalar variance per entry, mean of per-dimension variances
    spherical = variances.mean(axis=1)
    return prototypes, spherical, np.sqrt(spherical)


def build_dictionary(
    ds: EmbeddingDataset | np.ndarray,
    assignments: np.ndarray,
    C: int,
    cov_type: CovarianceType | str = CovarianceType.FULL,
    ridge_eps: float = 1e-6,
) -> BaseDictionary:
    """Summarize clustered embeddings as (prototype, covariance) entries.

    Prototype i is the mean of cluster i's rows; the covariance follows
    the requested type. Every cluster must be non-empty.
    """
    X = ds.features.astype(np.float64) if isinstance(ds, EmbeddingDataset) else as_matrix(ds, name="ds")
    cov_type = CovarianceType.parse(cov_type)
    C = int(C)
    if C < 1:
        raise ValueError("C must be at least 1")
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.shape != (X.shape[0],):
        raise ValueError(f"assignments must have length {X.shape[0]}")
    if assignments.min() < 0 or assignments.max() >= C:
        raise ValueError("assignments out of range for C")

    groups = [np.flatnonzero(assignments == i) for i in range(C)]
    for i, g in enumerate(groups):
        if g.size == 0:
            raise ValueError(f"empty cluster {i}")

    prototypes, covs, factors = _entries_from_groups(
        X, groups, cov_type, ridge_eps, [f"cluster {i}" for i in range(C)]
    )
    return BaseDictionary(
        prototypes=prototypes,
        covariances=covs,
        factors=factors,
        covariance_type=cov_type,
        ridge_eps=float(ridge_eps),
    )


def build_supervised_dictionary(
    ds: EmbeddingDataset,
    cov_type: CovarianceType | str = CovarianceType.FULL,
    ridge_eps: float = 1e-6,
) -> BaseDictionary:
    """One dictionary entry per labeled class, ordered by class id."""
    cov_type = CovarianceType.parse(cov_type)
    if ds.labels is None:
        raise ValueError("supervised dictionary requires labels")
    X = ds.features.astype(np.float64)
    ids = ds.distinct_labels()
    groups = [np.flatnonzero(ds.labels == c) for c in ids]
    if cov_type is not CovarianceType.NONE:
        for c, g in zip(ids, groups):
            if g.size < 2:
                raise ValueError(f"degenerate class {int(c)}: variance needs at least 2 samples")

    prototypes, covs, factors = _entries_from_groups(
        X, groups, cov_type, ridge_eps, [f"class {int(c)}" for c in ids]
    )
    return BaseDictionary(
        prototypes=prototypes,
        covariances=covs,
        factors=factors,
        covariance_type=cov_type,
        ridge_eps=float(ridge_eps),
        source="supervised",
        class_ids=ids,
    )


def _draw_deltas(
    dictionary: BaseDictionary, index: int, count: int, rng: np.random.Generator
) -> np.ndarray:
    t = dictionary.covariance_type
    d = dictionary.dim
    if count == 0 or t is CovarianceType.NONE:
        return np.zeros((count, d))
    u = rng.standard_normal((count, d))
    if t is CovarianceType.FULL:
        return u @ dictionary.factors[index].T
    if t is CovarianceType.TIED:
        return u @ dictionary.factors.T
    if t is CovarianceType.DIAG:
        return u * dictionary.factors[index]
    return u * dictionary.factors[index]  # spherical: scalar std


def sample_variations(
    dictionary: BaseDictionary, index: int, count: int, rng_seed: int
) -> np.ndarray:
    """Draw `count` zero-mean deltas from entry `index`'s covariance."""
    if not 0 <= int(index) < dictionary.n_entries:
        raise ValueError(f"entry index {index} out of range")
    if int(count) < 0:
        raise ValueError("count must be non-negative")
    rng = np.random.default_rng(check_seed(rng_seed))
    return _draw_deltas(dictionary, int(index), int(count), rng)


def augment(
    dictionary: BaseDictionary,
    z: np.ndarray,
    T: int = 100,
    rng_seed: int = 0,
    renormalize: bool = False,
) -> np.ndarray:
    """Expand one embedding into T rows: the original plus T-1 noisy copies.

    Noise is drawn from the covariance of the most cosine-similar
    prototype. Deterministic given rng_seed. Rows keep their raw norms
    unless renormalize is set.
    """
    z = as_vector(z, dim=dictionary.dim, name="z")
    T = int(T)
    if T < 1:
        raise ValueError("T must be at least 1 (the original embedding is included)")
    star = nearest_prototype_cosine(dictionary.prototypes, z)
    rng = np.random.default_rng(check_seed(rng_seed))
    out = np.empty((T, dictionary.dim))
    out[0] = z
    out[1:] = z + _draw_deltas(dictionary, star, T - 1, rng)
    if renormalize:
        norms = np.linalg.norm(out, axis=1)
        bad = np.flatnonzero(norms == 0)
        if bad.size:
            raise ValueError(f"augmented row {int(bad[0])} has zero norm; cannot renormalize")
        out = out / norms[:, None]
    return out


@dataclass(frozen=True)
class ClassStats:
    """Per-class mean and dense covariance, ordered by class id."""

    class_ids: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self) -> None:
        ids = np.asarray(self.class_ids, dtype=np.int64)
        means = np.asarray(self.means, dtype=np.float64)
        covs = np.asarray(self.covariances, dtype=np.float64)
        k = ids.shape[0]
        if k < 1 or means.shape[0] != k or covs.shape[0] != k:
            raise ValueError("class_ids, means, covariances must align on the class axis")
        d = means.shape[1]
        if covs.shape[1:] != (d, d):
            raise ValueError("covariances must be (k, d, d)")
        for a in (ids, means, covs):
            a.setflags(write=False)
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)

    @property
    def n_classes(self) -> int:
        return self.class_ids.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def class_stats(ds: EmbeddingDataset) -> ClassStats:
    """Mean and population covariance of every labeled class."""
    if ds.labels is None:
        raise ValueError("class statistics require labels")
    X = ds.features.astype(np.float64)
    ids = ds.distinct_labels()
    means = np.empty((ids.shape[0], X.shape[1]))
    covs = np.empty((ids.shape[0], X.shape[1], X.shape[1]))
    for i, c in enumerate(ids):
        rows = X[ds.labels == c]
        if rows.shape[0] < 2:
            raise ValueError(f"degenerate class {int(c)}: variance needs at least 2 samples")
        means[i] = rows.mean(axis=0)
        covs[i] = _population_cov(rows)
    return ClassStats(class_ids=ids, means=means, covariances=covs)


def distribution_calibration(
    stats: ClassStats, z: np.ndarray, k: int = 1, alpha: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Calibrate a novel embedding against its k most similar base classes.

    Returns mu = (sum of the k class means + z) / (k + 1) and
    sigma = (sum of the k class covariances) / k + alpha, where similarity
    is cosine between z and the class means.
    """
    z = as_vector(z, dim=stats.dim, name="z")
    k = int(k)
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > stats.n_classes:
        raise ValueError(f"k={k} exceeds the {stats.n_classes} available classes")
    z_norm = np.linalg.norm(z)
    if z_norm == 0:
        raise ValueError("z has zero norm")
    mean_norms = np.linalg.norm(stats.means, axis=1)
    if np.any(mean_norms == 0):
        raise ValueError("class mean with zero norm; cosine similarity undefined")
    sims = (stats.means @ z) / (mean_norms * z_norm)
    top = np.argsort(-sims, kind="stable")[:k]
    mu = (stats.means[top].sum(axis=0) + z) / (k + 1)
    sigma = stats.covariances[top].sum(axis=0) / k + alpha
    return mu, sigma


def sample_gaussian(
    mu: np.ndarray,
    sigma: np.ndarray,
    count: int,
    rng_seed: int,
    ridge_eps: float = 1e-6,
) -> np.ndarray:
    """Draw from N(mu, sigma + ridge_eps*I) with the same factor machinery.

    Used to sample from calibrated statistics; shares the Cholesky path
    with dictionary construction.
    """
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = as_matrix(sigma, name="sigma")
    if sigma.shape != (mu.shape[0], mu.shape[0]):
        raise ValueError("sigma shape does not match mu")
    if int(count) < 0:
        raise ValueError("count must be non-negative")
    factor = _chol_with_ridge((sigma + sigma.T) / 2, ridge_eps, "the calibrated covariance")
    u = np.random.default_rng(check_seed(rng_seed)).standard_normal((int(count), mu.shape[0]))
    return mu + u @ factor.T


def covariance_pearson(A: np.ndarray, B: np.ndarray) -> float:
    """Pearson correlation of two symmetric matrices' lower triangles.

    The diagonal is included. Errors when either flattened triangle has
    zero variance (correlation undefined).
    """
    A = as_matrix(A, name="A")
    B = as_matrix(B, name="B")
    if A.shape != B.shape or A.shape[0] != A.shape[1]:
        raise ValueError("A and B must be square matrices of equal shape")
    for name, M in (("A", A), ("B", B)):
        if not np.allclose(M, M.T, atol=1e-8):
            raise ValueError(f"{name} is not symmetric")
    rows, cols = np.tril_indices(A.shape[0])
    a = A[rows, cols]
    b = B[rows, cols]
    a = a - a.mean()
    b = b - b.mean()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero variance in flattened covariance entries")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def save_dictionary(dictionary: BaseDictionary, path) -> None:
    """Write a JSON manifest plus EMB1 payloads next to it.

    Payload files share the manifest's stem: `<stem>.prototypes` always,
    `<stem>.cov` unless the covariance type is none. Full covariances are
    stored as C stacked d x d blocks, row-major float32.
    """
    path = Path(path)
    proto_name = path.name + ".prototypes"
    cov_name = path.name + ".cov"
    t = dictionary.covariance_type

    manifest = {
        "C": dictionary.n_entries,
        "cov_type": t.value,
        "ridge_eps": dictionary.ridge_eps,
        "source": dictionary.source,
        "dim": dictionary.dim,
        "payloads": {"prototypes": proto_name},
    }
    if dictionary.class_ids is not None:
        manifest["class_ids"] = dictionary.class_ids.tolist()

    save_embeddings(
        EmbeddingDataset(features=dictionary.prototypes.astype(np.float32)),
        path.with_name(proto_name),
    )
    if t is not CovarianceType.NONE:
        manifest["payloads"]["covariances"] = cov_name
        if t is CovarianceType.FULL:
            block = dictionary.covariances.reshape(-1, dictionary.dim)
        elif t is CovarianceType.TIED:
            block = dictionary.covariances
        elif t is CovarianceType.DIAG:
            block = dictionary.covariances
        else:
            block = dictionary.covariances[:, None]
        save_embeddings(
            EmbeddingDataset(features=block.astype(np.float32)), path.with_name(cov_name)
        )

    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_dictionary(path) -> BaseDictionary:
    """Rebuild a dictionary from its manifest; factors are re-derived."""
    path = Path(path)
    with open(path) as fh:
        manifest = json.load(fh)
    t = CovarianceType.parse(manifest["cov_type"])
    C = int(manifest["C"])
    d = int(manifest["dim"])
    ridge_eps = float(manifest["ridge_eps"])

    protos = load_embeddings(path.with_name(manifest["payloads"]["prototypes"]))
    if protos.features.shape != (C, d):
        raise ValueError(f"prototype payload shape {protos.features.shape} does not match manifest")
    prototypes = protos.features.astype(np.float64)

    covs = factors = None
    if t is not CovarianceType.NONE:
        payload = load_embeddings(path.with_name(manifest["payloads"]["covariances"]))
        raw = payload.features.astype(np.float64)
        if t is CovarianceType.FULL:
            if raw.shape != (C * d, d):
                raise ValueError("full covariance payload has wrong shape")
            covs = raw.reshape(C, d, d)
            covs = (covs + covs.transpose(0, 2, 1)) / 2  # re-symmetrize float32 rounding
            factors = np.stack(
                [_chol_with_ridge(covs[i], ridge_eps, f"entry {i}") for i in range(C)]
            )
        elif t is CovarianceType.TIED:
            if raw.shape != (d, d):
                raise ValueError("tied covariance payload has wrong shape")
            covs = (raw + raw.T) / 2
            factors = _chol_with_ridge(covs, ridge_eps, "the tied covariance")
        elif t is CovarianceType.DIAG:
            if raw.shape != (C, d):
                raise ValueError("diag covariance payload has wrong shape")
            covs = raw
            factors = np.sqrt(covs)
        else:
            if raw.shape != (C, 1):
                raise ValueError("spherical covariance payload has wrong shape")
            covs = raw[:, 0]
            factors = np.sqrt(covs)

    class_ids = manifest.get("class_ids")
    return BaseDictionary(
        prototypes=prototypes,
        covariances=covs,
        factors=factors,
        covariance_type=t,
        ridge_eps=ridge_eps,
        source=manifest["source"],
        class_ids=None if class_ids is None else np.asarray(class_ids, dtype=np.int64),
    )
