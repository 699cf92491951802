"""Base learners fitted per meta-task on (augmented) support features.

Three heads: nearest-centroid, l2-regularized multinomial logistic
regression, and one-vs-rest ridge regression on +-1 targets. All fits
are deterministic (zero initialization, fixed iteration order), so a
task's outcome depends only on its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from ._validation import as_labels, as_matrix


@dataclass(frozen=True)
class CentroidModel:
    """Per-class mean vectors; class_ids sorted ascending."""

    class_ids: np.ndarray
    centroids: np.ndarray

    def __post_init__(self) -> None:
        ids = np.asarray(self.class_ids, dtype=np.int64)
        cents = np.asarray(self.centroids, dtype=np.float64)
        if ids.ndim != 1 or cents.shape[0] != ids.shape[0]:
            raise ValueError("one centroid per class id required")
        if not np.all(np.isfinite(cents)):
            raise ValueError("centroids must be finite")
        if ids.shape[0] > 1 and np.any(np.diff(ids) <= 0):
            raise ValueError("class_ids must be strictly increasing")
        ids.setflags(write=False)
        cents.setflags(write=False)
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "centroids", cents)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class LinearModel:
    """One score row per class: score(q) = weights @ q + bias."""

    class_ids: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    kind: str
    regularization: float
    converged: bool = True

    def __post_init__(self) -> None:
        ids = np.asarray(self.class_ids, dtype=np.int64)
        W = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if W.shape[0] != ids.shape[0] or b.shape != (ids.shape[0],):
            raise ValueError("weights and bias must align with class_ids")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("parameters must be finite")
        if self.kind not in ("logistic", "ridge"):
            raise ValueError(f"kind must be logistic or ridge, got {self.kind!r}")
        if self.regularization <= 0:
            raise ValueError("regularization must be positive")
        if ids.shape[0] > 1 and np.any(np.diff(ids) <= 0):
            raise ValueError("class_ids must be strictly increasing")
        for a in (ids, W, b):
            a.setflags(write=False)
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias", b)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def _classes_and_indices(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ids = np.unique(y)
    return ids, np.searchsorted(ids, y)


def fit_nearest_centroid(X: np.ndarray, y: np.ndarray) -> CentroidModel:
    """Centroid per class: the mean of that class's rows."""
    X = as_matrix(X, name="X")
    y = as_labels(y, n=X.shape[0], name="y")
    ids, idx = _classes_and_indices(y)
    cents = np.vstack([X[idx == i].mean(axis=0) for i in range(ids.shape[0])])
    return CentroidModel(class_ids=ids, centroids=cents)


def predict_nearest_centroid(m: CentroidModel, Q: np.ndarray) -> np.ndarray:
    """Label each query with the Euclidean-nearest centroid's class.

    Ties break to the lowest class id.
    """
    Q = as_matrix(Q, name="Q")
    if Q.shape[1] != m.dim:
        raise ValueError(f"queries have dimension {Q.shape[1]}, expected {m.dim}")
    d = (
        np.sum(Q * Q, axis=1)[:, None]
        - 2.0 * (Q @ m.centroids.T)
        + np.sum(m.centroids * m.centroids, axis=1)[None, :]
    )
    return m.class_ids[d.argmin(axis=1)]


def logistic_objective(
    W: np.ndarray, b: np.ndarray, X: np.ndarray, y_idx: np.ndarray, l2: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed cross-entropy plus (l2/2)*||W||_F^2, bias unpenalized.

    Returns (value, gradient wrt W, gradient wrt b). The penalty is not
    scaled by the sample count, so stacking the data twice is equivalent
    to halving l2.
    """
    n = X.shape[0]
    scores = X @ W.T + b
    scores -= scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(scores).sum(axis=1))
    log_p = scores - log_z[:, None]
    value = -float(log_p[np.arange(n), y_idx].sum()) + 0.5 * l2 * float(np.sum(W * W))
    P = np.exp(log_p)
    P[np.arange(n), y_idx] -= 1.0
    return value, P.T @ X + l2 * W, P.sum(axis=0)


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    l2: float = 1.0,
    max_iters: int = 200,
    tol: float = 1e-5,
) -> LinearModel:
    """Multinomial logistic regression by L-BFGS from zero initialization.

    Minimizes the summed cross-entropy objective of `logistic_objective`;
    the converged flag reports whether the gradient infinity-norm fell
    below tol.
    """
    X = as_matrix(X, name="X")
    y = as_labels(y, n=X.shape[0], name="y")
    if l2 <= 0:
        raise ValueError("l2 must be positive")
    ids, idx = _classes_and_indices(y)
    K, d = ids.shape[0], X.shape[1]
    if K < 2:
        raise ValueError("logistic regression needs at least 2 classes")

    def fun(params):
        W = params[: K * d].reshape(K, d)
        b = params[K * d :]
        value, gW, gb = logistic_objective(W, b, X, idx, l2)
        return value, np.concatenate([gW.ravel(), gb])

    result = minimize(
        fun,
        np.zeros(K * d + K),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": int(max_iters), "gtol": float(tol), "ftol": 1e-14},
    )
    params = result.x
    W = params[: K * d].reshape(K, d)
    b = params[K * d :]
    _, gW, gb = logistic_objective(W, b, X, idx, l2)
    grad_inf = max(float(np.abs(gW).max()), float(np.abs(gb).max()))
    return LinearModel(
        class_ids=ids,
        weights=W,
        bias=b,
        kind="logistic",
        regularization=float(l2),
        converged=grad_inf < tol,
    )


def fit_ridge(X: np.ndarray, y: np.ndarray, alpha: float = 1.0) -> LinearModel:
    """One-vs-rest least squares on +-1 targets in closed form.

    Solves (Xb.T Xb + alpha*I~) w_c = Xb.T t_c per class, where Xb is the
    bias-augmented matrix and I~ skips the bias coordinate. A single
    Cholesky factorization serves every class.
    """
    X = as_matrix(X, name="X")
    y = as_labels(y, n=X.shape[0], name="y")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    ids, idx = _classes_and_indices(y)
    K, d = ids.shape[0], X.shape[1]
    if K < 2:
        raise ValueError("ridge classification needs at least 2 classes")

    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    G = Xb.T @ Xb
    G[np.arange(d), np.arange(d)] += alpha
    targets = np.where(idx[:, None] == np.arange(K)[None, :], 1.0, -1.0)
    rhs = Xb.T @ targets
    solution = cho_solve(cho_factor(G), rhs)
    return LinearModel(
        class_ids=ids,
        weights=solution[:d].T,
        bias=solution[d],
        kind="ridge",
        regularization=float(alpha),
    )


def predict_linear(m: LinearModel, Q: np.ndarray) -> np.ndarray:
    """Argmax of class scores; ties break to the lowest class id."""
    Q = as_matrix(Q, name="Q")
    if Q.shape[1] != m.dim:
        raise ValueError(f"queries have dimension {Q.shape[1]}, expected {m.dim}")
    scores = Q @ m.weights.T + m.bias
    return m.class_ids[scores.argmax(axis=1)]
