"""Scikit-learn style wrappers around the functional core.

Thin adapters exposing fit/predict/transform with get_params/set_params,
so the toolkit plugs into sklearn pipelines, cloning, and grid search.
All math lives in the functional modules these delegate to; estimator
attributes ending in an underscore are set by fit, per sklearn
convention.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._seeding import derive_seeds
from ._validation import as_matrix
from .classifiers import (
    fit_logistic,
    fit_nearest_centroid,
    fit_ridge,
    predict_linear,
    predict_nearest_centroid,
)
from .cluster import _assign_rows, kmeans_fit
from .dictionary import augment, build_dictionary, build_supervised_dictionary
from .store import EmbeddingDataset

# Stream tag for per-row transform draws (distinct from the experiment
# runner's augmentation stream).
_TRANSFORM_STREAM = 2


def _require_fitted(estimator, attr: str) -> None:
    if not hasattr(estimator, attr):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first"
        )


def _rows(X) -> np.ndarray:
    if isinstance(X, EmbeddingDataset):
        return X.features.astype(np.float64)
    return as_matrix(X, name="X")


class SeededKMeans(ClusterMixin, BaseEstimator):
    """Deterministic k-means with seeded initialization.

    Bit-identical results for a fixed seed regardless of thread count;
    exposes cluster_centers_, labels_, inertia_ and n_iter_ like the
    sklearn estimator of the same family.
    """

    def __init__(self, n_clusters: int = 16, seed: int = 66, max_iters: int = 100, tol: float = 1e-4):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iters = max_iters
        self.tol = tol

    def fit(self, X, y=None):
        self.model_ = kmeans_fit(
            X if isinstance(X, EmbeddingDataset) else _rows(X),
            self.n_clusters,
            seed=self.seed,
            max_iters=self.max_iters,
            tol=self.tol,
        )
        self.cluster_centers_ = self.model_.prototypes
        self.labels_ = self.model_.assignments
        self.inertia_ = self.model_.inertia
        self.n_iter_ = self.model_.iterations_run
        return self

    def predict(self, X) -> np.ndarray:
        _require_fitted(self, "model_")
        labels, _ = _assign_rows(_rows(X), self.model_.prototypes)
        return labels

    def transform(self, X) -> np.ndarray:
        """Distances from each row to each prototype (sklearn convention)."""
        _require_fitted(self, "model_")
        rows = _rows(X)
        diffs = rows[:, None, :] - self.model_.prototypes[None, :, :]
        return np.linalg.norm(diffs, axis=2)


class LatentAugmenter(TransformerMixin, BaseEstimator):
    """Expands each row into `count` rows using a variation dictionary.

    fit(X) clusters X and builds the dictionary (or, with
    supervised=True, groups by the labels passed as y). transform(Z)
    returns the stacked augmentations, count rows per input row with the
    original first; use repeat_labels to align targets.
    """

    def __init__(
        self,
        n_clusters: int = 16,
        cov_type: str = "full",
        ridge_eps: float = 1e-6,
        seed: int = 66,
        count: int = 100,
        renormalize: bool = False,
        supervised: bool = False,
    ):
        self.n_clusters = n_clusters
        self.cov_type = cov_type
        self.ridge_eps = ridge_eps
        self.seed = seed
        self.count = count
        self.renormalize = renormalize
        self.supervised = supervised

    def fit(self, X, y=None):
        if self.supervised:
            if y is None:
                raise ValueError("supervised=True requires labels y")
            ds = X if isinstance(X, EmbeddingDataset) else EmbeddingDataset(
                features=_rows(X).astype(np.float32), labels=np.asarray(y, dtype=np.int64)
            )
            self.dictionary_ = build_supervised_dictionary(
                ds, cov_type=self.cov_type, ridge_eps=self.ridge_eps
            )
        else:
            model = kmeans_fit(
                X if isinstance(X, EmbeddingDataset) else _rows(X),
                self.n_clusters,
                seed=self.seed,
            )
            self.cluster_model_ = model
            self.dictionary_ = build_dictionary(
                _rows(X),
                model.assignments,
                self.n_clusters,
                cov_type=self.cov_type,
                ridge_eps=self.ridge_eps,
            )
        return self

    def transform(self, X) -> np.ndarray:
        _require_fitted(self, "dictionary_")
        rows = _rows(X)
        seeds = derive_seeds(self.seed, _TRANSFORM_STREAM, count=rows.shape[0])
        blocks = [
            augment(
                self.dictionary_,
                rows[j],
                T=self.count,
                rng_seed=int(seeds[j]),
                renormalize=self.renormalize,
            )
            for j in range(rows.shape[0])
        ]
        return np.vstack(blocks)

    def repeat_labels(self, y) -> np.ndarray:
        """Targets aligned with transform's output (each label count times)."""
        return np.repeat(np.asarray(y, dtype=np.int64), int(self.count))


class CentroidClassifier(ClassifierMixin, BaseEstimator):
    """Nearest class-centroid prediction; ties go to the lowest class id."""

    def fit(self, X, y):
        self.model_ = fit_nearest_centroid(_rows(X), np.asarray(y))
        self.classes_ = self.model_.class_ids
        return self

    def predict(self, X) -> np.ndarray:
        _require_fitted(self, "model_")
        return predict_nearest_centroid(self.model_, _rows(X))


class LogisticClassifier(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression with an unpenalized bias."""

    def __init__(self, l2: float = 1.0, max_iters: int = 200, tol: float = 1e-5):
        self.l2 = l2
        self.max_iters = max_iters
        self.tol = tol

    def fit(self, X, y):
        self.model_ = fit_logistic(
            _rows(X), np.asarray(y), l2=self.l2, max_iters=self.max_iters, tol=self.tol
        )
        self.classes_ = self.model_.class_ids
        return self

    def predict(self, X) -> np.ndarray:
        _require_fitted(self, "model_")
        return predict_linear(self.model_, _rows(X))

    def decision_function(self, X) -> np.ndarray:
        _require_fitted(self, "model_")
        return _rows(X) @ self.model_.weights.T + self.model_.bias


class RidgeClassifier(ClassifierMixin, BaseEstimator):
    """One-vs-rest ridge regression on ±1 targets, closed form."""

    def __init__(self, alpha: float = 1.0):
        self.alpha = alpha

    def fit(self, X, y):
        self.model_ = fit_ridge(_rows(X), np.asarray(y), alpha=self.alpha)
        self.classes_ = self.model_.class_ids
        return self

    def predict(self, X) -> np.ndarray:
        _require_fitted(self, "model_")
        return predict_linear(self.model_, _rows(X))

    def decision_function(self, X) -> np.ndarray:
        _require_fitted(self, "model_")
        return _rows(X) @ self.model_.weights.T + self.model_.bias
