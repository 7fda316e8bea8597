"""Time-constant initial clustering by k-means on concatenated snapshots."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dynsbm.model_core import DynamicNetwork, VariationalState, make_state


@dataclass(frozen=True)
class InitConfig:
    kmeans_restarts: int = 10
    kmeans_max_iters: int = 100
    seeding: str = "plusplus"
    soft_eps: float = 1e-2

    def __post_init__(self):
        if self.kmeans_restarts < 1 or self.kmeans_max_iters < 1:
            raise ValueError("k-means restarts and iterations must be >= 1")
        if self.seeding not in ("plusplus", "random"):
            raise ValueError(f"unknown seeding {self.seeding!r}")
        if not 0 < self.soft_eps < 1:
            raise ValueError("soft_eps must lie in (0, 1)")


def concat_matrix(net: DynamicNetwork, family=None) -> np.ndarray:
    """``N x (N T)`` matrix whose row i is ``(Y^1_i., ..., Y^T_i.)``.

    Entries touching absent nodes and the diagonal are zero. For a
    finite-space family each weight is replaced by its bin's representative
    value.
    """
    w = np.where(net.pair_mask(), net.weights, 0.0)
    if family is not None and getattr(family, "name", None) == "finite":
        b = family.bin_index(w)
        vals = np.asarray(family.values)
        w = np.where((w != 0) & (b >= 0), vals[np.maximum(b, 0)], 0.0)
    return np.concatenate(list(w), axis=1)


def _sse(x, labels, centers):
    return float(((x - centers[labels]) ** 2).sum())


def _seed_centers(x, k, rng, seeding):
    n = x.shape[0]
    if seeding == "random":
        return x[rng.choice(n, size=k, replace=False)].copy()
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers[c] = x[idx]
        d2 = np.minimum(d2, ((x - centers[c]) ** 2).sum(1))
    return centers


def _assign(x, centers):
    d = (x * x).sum(1)[:, None] - 2 * x @ centers.T + (centers * centers).sum(1)[None]
    return np.argmin(d, axis=1)


def _repair_empty(x, labels, k):
    """Give each empty cluster the point farthest from the centre of the
    currently largest cluster."""
    labels = labels.copy()
    for c in range(k):
        if np.any(labels == c):
            continue
        sizes = np.bincount(labels, minlength=k)
        big = int(np.argmax(sizes))
        if sizes[big] < 2:
            break
        members = np.flatnonzero(labels == big)
        centre = x[members].mean(0)
        far = members[np.argmax(((x[members] - centre) ** 2).sum(1))]
        labels[far] = c
    return labels


def lloyd(x, k, rng, max_iters=100, seeding="plusplus"):
    """One k-means run. Returns ``(labels, sse, sse_trace)``."""
    x = np.asarray(x, dtype=float)
    centers = _seed_centers(x, k, rng, seeding)
    labels = _repair_empty(x, _assign(x, centers), k)
    centers = np.stack([x[labels == c].mean(0) for c in range(k)])
    trace = [_sse(x, labels, centers)]
    for _ in range(max_iters):
        new = _repair_empty(x, _assign(x, centers), k)
        new_centers = np.stack([x[new == c].mean(0) if np.any(new == c) else centers[c]
                                for c in range(k)])
        trace.append(_sse(x, new, new_centers))
        if np.array_equal(new, labels):
            labels, centers = new, new_centers
            break
        labels, centers = new, new_centers
    return labels, trace[-1], trace


def kmeans(x, k, seed=0, config: InitConfig = InitConfig()):
    """Best of ``config.kmeans_restarts`` Lloyd runs by within-cluster SSE."""
    x = np.asarray(x, dtype=float)
    if k > x.shape[0]:
        raise ValueError(f"cannot form {k} clusters from {x.shape[0]} rows")
    best = None
    for r in range(config.kmeans_restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1000 + r]))
        labels, sse, _ = lloyd(x, k, rng, config.kmeans_max_iters, config.seeding)
        if best is None or sse < best[1]:
            best = (labels, sse)
    return best


def state_from_labels(labels, n_groups, presence, soft_eps=1e-2) -> VariationalState:
    """Softened, time-constant variational state from hard node labels."""
    labels = np.asarray(labels)
    presence = np.asarray(presence, dtype=bool)
    T, N = presence.shape
    Q = n_groups
    if Q == 1:
        soft = np.ones((N, 1))
    else:
        if soft_eps >= 1.0 / Q:
            raise ValueError("soft_eps must be < 1/Q")
        soft = np.full((N, Q), soft_eps)
        soft[np.arange(N), labels] = 1 - (Q - 1) * soft_eps
    # a node keeps its group: softened identity, with the entry law on re-entry
    ident = np.full((Q, Q), soft_eps if Q > 1 else 0.0)
    np.fill_diagonal(ident, 1 - (Q - 1) * soft_eps if Q > 1 else 1.0)
    trans = np.broadcast_to(ident, (max(T - 1, 0), N, Q, Q)).copy()
    for t in range(1, T):
        re = presence[t] & ~presence[t - 1]
        trans[t - 1][re] = soft[re][:, None, :]
    return make_state(soft, trans, presence)


def kmeans_labels(net: DynamicNetwork, n_groups, seed=0, config: InitConfig = InitConfig(),
                  family=None):
    x = concat_matrix(net, family)
    labels, _ = kmeans(x, n_groups, seed, config)
    return labels


def kmeans_init(net: DynamicNetwork, n_groups, config: InitConfig = InitConfig(), seed=0,
                family=None) -> VariationalState:
    """k-means on :func:`concat_matrix` rows turned into a softened state."""
    if n_groups > net.n_nodes:
        raise ValueError("Q must not exceed N")
    labels = kmeans_labels(net, n_groups, seed, config, family)
    return state_from_labels(labels, n_groups, net.presence, config.soft_eps)
