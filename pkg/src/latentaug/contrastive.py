"""Contrastive-learning math as standalone vector operations.

InfoNCE, the symmetric two-view batch loss, and the momentum update used
for a slowly-trailing target encoder. No networks or training loops live
here; these are the verified numeric kernels only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._validation import as_matrix, as_vector

#: Row norms may deviate from 1 by at most this much in a ViewBatch.
UNIT_TOL = 1e-5


@dataclass(frozen=True)
class ViewBatch:
    """Two row-aligned batches of unit-norm embeddings plus a temperature."""

    z1: np.ndarray
    z2: np.ndarray
    temperature: float = 1.0

    def __post_init__(self) -> None:
        z1 = as_matrix(self.z1, name="z1")
        z2 = as_matrix(self.z2, name="z2")
        if z1.shape != z2.shape:
            raise ValueError(f"view shapes differ: {z1.shape} vs {z2.shape}")
        if z1.shape[0] < 2:
            raise ValueError("a batch needs at least 2 rows (in-batch negatives)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        for name, z in (("z1", z1), ("z2", z2)):
            norms = np.linalg.norm(z, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
            if bad.size:
                raise ValueError(
                    f"{name} row {int(bad[0])} has norm {norms[bad[0]]:.6g}, expected 1"
                )
        z1.setflags(write=False)
        z2.setflags(write=False)
        object.__setattr__(self, "z1", z1)
        object.__setattr__(self, "z2", z2)

    @property
    def batch_size(self) -> int:
        return self.z1.shape[0]


def infonce(u: np.ndarray, v_pos: np.ndarray, v_negs: np.ndarray, tau: float) -> float:
    """-log of the positive's softmax weight among positive plus negatives.

    Logits are dot products divided by tau; the log-sum-exp is max-shifted
    so magnitudes up to |logit| ~ 1e4 stay finite.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    u = as_vector(u, name="u")
    v_pos = as_vector(v_pos, dim=u.size, name="v_pos")
    v_negs = as_matrix(v_negs, name="v_negs")
    if v_negs.shape[1] != u.size:
        raise ValueError(f"v_negs has dimension {v_negs.shape[1]}, expected {u.size}")
    logits = np.concatenate([[u @ v_pos], v_negs @ u]) / tau
    return float(logsumexp(logits) - logits[0])


def _directional_loss(anchors: np.ndarray, others: np.ndarray, tau: float) -> float:
    # row i's positive is others[i]; its negatives are the remaining rows
    S = (anchors @ others.T) / tau
    return float(np.mean(logsumexp(S, axis=1) - np.diag(S)))


def symmetric_clp_loss(batch: ViewBatch) -> float:
    """Mean InfoNCE over rows, averaged across both view directions."""
    forward = _directional_loss(batch.z1, batch.z2, batch.temperature)
    backward = _directional_loss(batch.z2, batch.z1, batch.temperature)
    return (forward + backward) / 2.0


def momentum_update(target, online, m: float):
    """Exponential trailing average: m*target + (1-m)*online, elementwise."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    t = np.asarray(target, dtype=np.float64)
    o = np.asarray(online, dtype=np.float64)
    if t.shape != o.shape:
        raise ValueError(f"parameter shapes differ: {t.shape} vs {o.shape}")
    out = m * t + (1.0 - m) * o
    return float(out) if out.ndim == 0 else out
