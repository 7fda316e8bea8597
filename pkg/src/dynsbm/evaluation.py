"""Clustering and parameter-recovery metrics."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score

from dynsbm.errors import DimensionMismatch, EmptyOverlap
from dynsbm.model_core import ABSENT


def ari(a, b, absent=ABSENT) -> float:
    """Adjusted Rand index over the items present in both label vectors."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"label vectors differ in shape: {a.shape} vs {b.shape}")
    keep = (a != absent) & (b != absent)
    if keep.sum() < 2:
        raise EmptyOverlap("fewer than 2 items are labelled in both vectors")
    return float(adjusted_rand_score(a[keep], b[keep]))


def _check_series(est, truth):
    est, truth = np.asarray(est), np.asarray(truth)
    if est.shape != truth.shape or est.ndim != 2:
        raise DimensionMismatch(f"label series must share a (T, N) shape: {est.shape} vs {truth.shape}")
    return est, truth


def per_time_ari(est, truth, absent=ABSENT) -> list:
    """ARI at each time step; None where the overlap is too small."""
    est, truth = _check_series(est, truth)
    out = []
    for a, b in zip(est, truth):
        try:
            out.append(ari(a, b, absent))
        except EmptyOverlap:
            out.append(None)
    return out


def averaged_ari(est, truth, absent=ABSENT) -> float:
    vals = [v for v in per_time_ari(est, truth, absent) if v is not None]
    if not vals:
        raise EmptyOverlap("no time step has 2 jointly labelled nodes")
    return float(np.mean(vals))


def global_ari(est, truth, absent=ABSENT) -> float:
    """ARI over all (t, i) items at once, which penalises label switching
    between time steps."""
    est, truth = _check_series(est, truth)
    return ari(est.ravel(), truth.ravel(), absent)


def align_labels(est, truth, n_groups, absent=ABSENT) -> np.ndarray:
    """Permutation ``perm`` with ``perm[est_group] = truth_group`` maximising
    agreement over jointly present items."""
    est, truth = np.asarray(est).ravel(), np.asarray(truth).ravel()
    keep = (est != absent) & (truth != absent)
    conf = np.zeros((n_groups, n_groups))
    np.add.at(conf, (est[keep], truth[keep]), 1)
    rows, cols = linear_sum_assignment(-conf)
    perm = np.empty(n_groups, dtype=int)
    perm[rows] = cols
    return perm


def pi_mse(pi_hat, pi_true, est, truth, absent=ABSENT) -> float:
    """Mean squared error of the label-aligned estimated transition matrix."""
    pi_hat, pi_true = np.asarray(pi_hat, float), np.asarray(pi_true, float)
    if pi_hat.shape != pi_true.shape or pi_hat.ndim != 2 or pi_hat.shape[0] != pi_hat.shape[1]:
        raise DimensionMismatch(f"pi shapes differ: {pi_hat.shape} vs {pi_true.shape}")
    _check_series(est, truth)
    perm = align_labels(est, truth, pi_hat.shape[0], absent)
    aligned = np.empty_like(pi_hat)
    aligned[np.ix_(perm, perm)] = pi_hat
    return float(np.mean((aligned - pi_true) ** 2))


def group_fluxes(labels, n_groups=None, absent=ABSENT) -> np.ndarray:
    """Flux counts ``F[t-1, g, g']`` of nodes in g at t-1 and g' at t.

    Index 0 is the absent pseudo-group and index q+1 is group q, so every
    row block sums to N.
    """
    z = np.asarray(labels)
    if z.ndim != 2:
        raise DimensionMismatch("labels must be (T, N)")
    if n_groups is None:
        n_groups = int(z.max()) + 1 if (z != absent).any() else 0
    g = np.where(z == absent, 0, z + 1)
    T = z.shape[0]
    out = np.zeros((max(T - 1, 0), n_groups + 1, n_groups + 1), dtype=np.int64)
    for t in range(1, T):
        np.add.at(out[t - 1], (g[t - 1], g[t]), 1)
    return out
