"""Seeded K-Means over embeddings and nearest-prototype queries.

Lloyd's algorithm with k-means++ initialization. Iterations use squared
Euclidean distance; cosine similarity appears only in the dictionary
query path (`nearest_prototype_cosine`). Clustering unit-norm rows with
Euclidean distance is equivalent to cosine up to the mean step.

Determinism: the assignment step is computed over fixed-size row chunks
whose boundaries do not depend on the worker count, and per-cluster sums
are reduced single-threaded in a fixed order, so a given (data, C, seed)
always yields the same model bit for bit.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._parallel import map_chunks
from ._seeding import check_seed
from ._validation import as_matrix, as_vector, check_nonzero_rows
from .store import EmbeddingDataset, load_embeddings, save_embeddings

_ASSIGN_CHUNK = 4096


@dataclass(frozen=True)
class ClusterModel:
    """Result of one K-Means fit.

    Attributes:
        prototypes: (C, d) cluster means.
        assignments: (N,) index of the assigned prototype per row.
        inertia: sum of squared distances to assigned prototypes.
        seed: seed the fit was run with.
        iterations_run: Lloyd iterations performed.
        tol: convergence threshold on maximum prototype shift.
        converged: True when assignments reached a fixed point.
        inertia_history: inertia recorded at init and after each iteration;
            non-increasing by construction of the Lloyd steps.
    """

    prototypes: np.ndarray
    assignments: np.ndarray
    inertia: float
    seed: int
    iterations_run: int
    tol: float = 1e-4
    converged: bool = False
    inertia_history: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        protos = np.asarray(self.prototypes, dtype=np.float64)
        assigns = np.asarray(self.assignments, dtype=np.int64)
        c = protos.shape[0]
        n = assigns.shape[0]
        if not 1 <= c <= n:
            raise ValueError(f"need 1 <= C <= N, got C={c}, N={n}")
        if assigns.min() < 0 or assigns.max() >= c:
            raise ValueError("assignments out of range")
        if self.inertia < 0:
            raise ValueError("inertia must be non-negative")
        protos.setflags(write=False)
        assigns.setflags(write=False)
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "assignments", assigns)

    @property
    def n_clusters(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def _sq_dists(X: np.ndarray, P: np.ndarray) -> np.ndarray:
    # chunk shapes are fixed by _ASSIGN_CHUNK, so the BLAS call sequence
    # (hence rounding) is identical no matter how many threads run chunks
    d = np.sum(X * X, axis=1)[:, None] - 2.0 * (X @ P.T) + np.sum(P * P, axis=1)[None, :]
    return np.maximum(d, 0.0)


def _assign_rows(X: np.ndarray, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row nearest prototype (ties to lowest index) and its squared distance."""
    chunks = [X[i : i + _ASSIGN_CHUNK] for i in range(0, X.shape[0], _ASSIGN_CHUNK)]
    parts = map_chunks(lambda block: _sq_dists(block, P), chunks)
    labels_parts = [p.argmin(axis=1) for p in parts]
    dists_parts = [
        p[np.arange(p.shape[0]), lab] for p, lab in zip(parts, labels_parts)
    ]
    return np.concatenate(labels_parts), np.concatenate(dists_parts)


def _kmeanspp_init(X: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((C, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centers[:1]).ravel()
    for j in range(1, C):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)  # all points coincide with chosen centers
        centers[j] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centers[j : j + 1]).ravel())
    return centers


def _cluster_means(
    X: np.ndarray, labels: np.ndarray, C: int, prev: np.ndarray
) -> np.ndarray:
    counts = np.bincount(labels, minlength=C).astype(np.float64)
    sums = np.zeros((C, X.shape[1]))
    np.add.at(sums, labels, X)
    means = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1.0)[:, None], 0.0)
    for j in np.flatnonzero(counts == 0):
        # keep C fixed: restart the empty cluster at the point farthest
        # from its previous prototype
        far = int(np.argmax(_sq_dists(X, prev[j : j + 1]).ravel()))
        means[j] = X[far]
    return means


def kmeans_fit(
    ds: EmbeddingDataset | np.ndarray,
    C: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-4,
) -> ClusterModel:
    """Cluster rows into C groups with seeded k-means++ and Lloyd iterations.

    Stops when assignments stop changing, when the largest prototype shift
    drops below tol, or after max_iters. Pure function of its arguments.
    """
    if isinstance(ds, EmbeddingDataset):
        if not ds.normalized:
            warnings.warn("clustering un-normalized embeddings", stacklevel=2)
        X = ds.features.astype(np.float64)
    else:
        X = as_matrix(ds, name="ds")
    n = X.shape[0]
    C = int(C)
    if C < 1:
        raise ValueError("C must be at least 1")
    if C > n:
        raise ValueError(f"C={C} exceeds the {n} available samples")
    if int(max_iters) < 1:
        raise ValueError("max_iters must be at least 1")
    check_seed(seed)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    P = _kmeanspp_init(X, C, rng)
    labels, dists = _assign_rows(X, P)
    history = [float(dists.sum())]

    iterations = 0
    converged = False
    for _ in range(int(max_iters)):
        iterations += 1
        P_new = _cluster_means(X, labels, C, P)
        shift = float(np.max(np.linalg.norm(P_new - P, axis=1)))
        new_labels, dists = _assign_rows(X, P_new)
        history.append(float(dists.sum()))
        converged = bool(np.array_equal(new_labels, labels))
        P, labels = P_new, new_labels
        if converged or shift < tol:
            break

    return ClusterModel(
        prototypes=P,
        assignments=labels,
        inertia=history[-1],
        seed=int(seed),
        iterations_run=iterations,
        tol=float(tol),
        converged=converged,
        inertia_history=tuple(history),
    )


def assign(model: ClusterModel, z: np.ndarray) -> int:
    """Index of the Euclidean-nearest prototype; ties break to lowest index."""
    z = as_vector(z, dim=model.dim, name="z")
    d = _sq_dists(z[None, :], model.prototypes)
    return int(d.argmin())


def nearest_prototype_cosine(prototypes: np.ndarray, z: np.ndarray) -> int:
    """Index of the most cosine-similar prototype; ties break to lowest index.

    Invariant under positive rescaling of z.
    """
    P = as_matrix(prototypes, name="prototypes")
    z = as_vector(z, dim=P.shape[1], name="z")
    z_norm = np.linalg.norm(z)
    if z_norm == 0:
        raise ValueError("z has zero norm")
    proto_norms = check_nonzero_rows(P, name="prototypes")
    sims = (P @ z) / (proto_norms * z_norm)
    return int(sims.argmax())


def save_cluster_model(model: ClusterModel, path) -> None:
    """Persist a model as prototype and assignment containers plus a sidecar.

    `<path>` holds the prototypes as features; `<path>.assignments` holds
    one row per training sample with the assignment as the label (a zero
    placeholder feature column keeps the container shape valid);
    `<path>.json` records {C, seed, inertia, iterations_run, tol}.
    """
    save_embeddings(
        EmbeddingDataset(features=model.prototypes.astype(np.float32)), path
    )
    save_embeddings(
        EmbeddingDataset(
            features=np.zeros((model.assignments.shape[0], 1), dtype=np.float32),
            labels=model.assignments,
        ),
        str(path) + ".assignments",
    )
    sidecar = {
        "C": model.n_clusters,
        "seed": model.seed,
        "inertia": model.inertia,
        "iterations_run": model.iterations_run,
        "tol": model.tol,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def load_cluster_model(path) -> ClusterModel:
    protos = load_embeddings(path)
    assigns = load_embeddings(str(path) + ".assignments")
    if assigns.labels is None:
        raise ValueError("assignment container is missing labels")
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    if int(sidecar["C"]) != protos.n_samples:
        raise ValueError(
            f"sidecar declares C={sidecar['C']} but {protos.n_samples} prototypes stored"
        )
    return ClusterModel(
        prototypes=protos.features.astype(np.float64),
        assignments=assigns.labels,
        inertia=float(sidecar["inertia"]),
        seed=int(sidecar["seed"]),
        iterations_run=int(sidecar["iterations_run"]),
        tol=float(sidecar["tol"]),
        converged=True,
    )
