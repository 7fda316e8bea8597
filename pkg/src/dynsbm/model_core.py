"""Domain types and shared probability utilities.

Conventions used throughout the package:

* time and node indices are 0-based in memory (files use 1-based ids);
* group labels are ``0..Q-1`` with ``ABSENT == -1`` for node-times outside
  the presence mask;
* marginals of absent node-times are stored as NaN rows so that an
  accidental inclusion in a sum shows up immediately.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from dynsbm.errors import InvalidParams, NotErgodic

ABSENT = -1
SIMPLEX_TOL = 1e-10
_DENSE_STATIONARY_MAX_Q = 64


def _frozen(a, dtype=float):
    if a is None:
        return None
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def pair_indices(q: int):
    """Row/column indices of the strict upper triangle of a ``q x q`` matrix."""
    return np.triu_indices(q, 1)


def n_pairs(q: int) -> int:
    return q * (q - 1) // 2


def expand_cells(diag, off, n_steps):
    """Rebuild full ``(T, Q, Q, ...)`` symmetric tables from storage slots.

    ``diag`` has shape ``(Q, ...)`` (time constant) and ``off`` has shape
    ``(T, Q(Q-1)/2, ...)`` (upper triangle, per time).
    """
    diag = np.asarray(diag)
    off = np.asarray(off)
    q = diag.shape[0]
    cell = diag.shape[1:]
    full = np.empty((n_steps, q, q) + cell, dtype=np.result_type(diag, off))
    iu, ju = pair_indices(q)
    idx = np.arange(q)
    full[:, idx, idx] = diag[None]
    full[:, iu, ju] = off
    full[:, ju, iu] = off
    return full


def split_cells(full):
    """Inverse of :func:`expand_cells` (diagonal read from ``t=0``)."""
    full = np.asarray(full)
    q = full.shape[1]
    iu, ju = pair_indices(q)
    idx = np.arange(q)
    return full[0, idx, idx].copy(), full[:, iu, ju].copy()


@dataclass(frozen=True, eq=False)
class DynamicNetwork:
    """T undirected weighted snapshots over N nodes.

    ``weights`` has shape ``(T, N, N)``; ``presence`` is a ``(T, N)`` boolean
    mask (all True when omitted).
    """

    weights: np.ndarray
    presence: np.ndarray = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=float, copy=True)
        if w.ndim != 3 or w.shape[1] != w.shape[2]:
            raise ValueError(f"weights must have shape (T, N, N), got {w.shape}")
        if self.presence is None:
            p = np.ones(w.shape[:2], dtype=bool)
        else:
            p = np.array(self.presence, dtype=bool, copy=True)
        if p.shape != w.shape[:2]:
            raise ValueError(f"presence must have shape {w.shape[:2]}, got {p.shape}")
        w.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "presence", p)

    @property
    def n_steps(self) -> int:
        return self.weights.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[1]

    @property
    def full_presence(self) -> bool:
        return bool(self.presence.all())

    def pair_mask(self) -> np.ndarray:
        """``(T, N, N)`` mask of present pairs ``i != j``."""
        m = self.presence[:, :, None] & self.presence[:, None, :]
        idx = np.arange(self.n_nodes)
        m[:, idx, idx] = False
        return m

    @classmethod
    def from_edges(cls, n_nodes, n_steps, edges, presence=None):
        """Build from ``(t, i, j, w)`` tuples with 0-based indices."""
        w = np.zeros((n_steps, n_nodes, n_nodes))
        for t, i, j, val in edges:
            w[t, i, j] = val
            w[t, j, i] = val
        return cls(w, presence)


@dataclass(frozen=True)
class Violation:
    kind: str
    t: int
    i: int
    j: int | None = None
    detail: str = ""

    def __str__(self):
        where = f"t={self.t + 1}, i={self.i + 1}"
        if self.j is not None:
            where += f", j={self.j + 1}"
        msg = f"{self.kind} at ({where})"
        return f"{msg}: {self.detail}" if self.detail else msg


def validate_network(net: DynamicNetwork, family=None) -> list[Violation]:
    """Report every broken network invariant; an empty list means valid.

    Checks symmetry, self-loops, nonzero weights touching absent nodes and,
    when ``family`` is given, that nonzero weights lie in the family support.
    """
    out: list[Violation] = []
    w = net.weights
    T, N = net.n_steps, net.n_nodes
    iu, ju = np.triu_indices(N, 1)
    for t in range(T):
        wt = w[t]
        bad = ~np.isfinite(wt)
        for i, j in zip(*np.nonzero(bad)):
            out.append(Violation("non-finite", t, int(i), int(j)))
        diff = wt[iu, ju] != wt[ju, iu]
        for k in np.flatnonzero(diff):
            out.append(Violation("asymmetry", t, int(iu[k]), int(ju[k]),
                                 f"{wt[iu[k], ju[k]]!r} != {wt[ju[k], iu[k]]!r}"))
        for i in np.flatnonzero(np.diag(wt) != 0):
            out.append(Violation("self-loop", t, int(i), int(i)))
        absent = ~net.presence[t]
        if absent.any():
            touch = (absent[:, None] | absent[None, :])
            touch &= wt != 0
            np.fill_diagonal(touch, False)
            for i, j in zip(*np.nonzero(np.triu(touch | touch.T, 1))):
                out.append(Violation("absent-node weight", t, int(i), int(j),
                                     f"w={wt[i, j]!r}"))
    if family is not None:
        mask = net.pair_mask()
        for t in range(T):
            vals = w[t][np.triu(mask[t], 1)]
            ii, jj = np.nonzero(np.triu(mask[t], 1))
            ok = family.in_support(vals)
            for k in np.flatnonzero(~ok):
                out.append(Violation("out-of-support", t, int(ii[k]), int(jj[k]),
                                     f"w={vals[k]!r} for {family.name}"))
    return out


def _is_primitive(pi: np.ndarray) -> bool:
    q = pi.shape[0]
    a = (pi > 0).astype(np.int64)
    m = a.copy()
    # Wielandt bound on the exponent of a primitive matrix
    for _ in range((q - 1) ** 2 + 1):
        if m.all():
            return True
        m = ((m @ a) > 0).astype(np.int64)
    return bool(m.all())


def stationary_distribution(pi) -> np.ndarray:
    """Left fixed point ``alpha @ pi == alpha`` of an ergodic transition matrix."""
    pi = np.asarray(pi, dtype=float)
    q = pi.shape[0]
    if pi.shape != (q, q):
        raise ValueError(f"pi must be square, got {pi.shape}")
    if not _is_primitive(pi):
        raise NotErgodic("transition matrix is not irreducible and aperiodic")
    if q <= _DENSE_STATIONARY_MAX_Q:
        a = pi.T - np.eye(q)
        a[-1, :] = 1.0
        b = np.zeros(q)
        b[-1] = 1.0
        alpha = np.linalg.solve(a, b)
    else:
        alpha = np.full(q, 1.0 / q)
        for _ in range(100000):
            nxt = alpha @ pi
            if np.max(np.abs(nxt - alpha)) < 1e-15:
                alpha = nxt
                break
            alpha = nxt
    alpha = np.clip(alpha, 0.0, None)
    return alpha / alpha.sum()


@dataclass(frozen=True, eq=False)
class ModelParams:
    """theta = (pi, alpha, beta, gamma) with time-constant diagonal cells.

    Diagonal cells live in ``*_diag`` (one slot per group, shared by every
    time step); off-diagonal cells live in ``*_off`` as upper-triangle
    vectors per time step. ``sigma2`` is the per-time Gaussian variance.
    """

    family: Any
    pi: np.ndarray
    alpha: np.ndarray
    beta_diag: np.ndarray
    beta_off: np.ndarray
    gamma_diag: np.ndarray | None = None
    gamma_off: np.ndarray | None = None
    sigma2: np.ndarray | None = None

    def __post_init__(self):
        for name in ("pi", "alpha", "beta_diag", "beta_off", "gamma_diag",
                     "gamma_off", "sigma2"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        q = self.pi.shape[0]
        if self.beta_off.ndim == 1 and n_pairs(q) == 0:
            object.__setattr__(self, "beta_off", _frozen(self.beta_off.reshape(-1, 0)))

    @property
    def n_groups(self) -> int:
        return self.pi.shape[0]

    @property
    def n_steps(self) -> int:
        return self.beta_off.shape[0]

    def beta(self) -> np.ndarray:
        """Full ``(T, Q, Q)`` sparsity table."""
        return expand_cells(self.beta_diag, self.beta_off, self.n_steps)

    def gamma(self) -> np.ndarray | None:
        if self.gamma_diag is None:
            return None
        return expand_cells(self.gamma_diag, self.gamma_off, self.n_steps)

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_full(cls, family, pi, beta, gamma=None, sigma2=None, alpha=None,
                  n_steps=None) -> "ModelParams":
        """Build from full symmetric tables.

        ``beta``/``gamma`` may be ``(Q, Q, ...)`` (time constant) or
        ``(T, Q, Q, ...)``. Diagonal cells must not vary with t.
        """
        pi = np.asarray(pi, dtype=float)
        q = pi.shape[0]
        beta = np.asarray(beta, dtype=float)
        if beta.ndim == 2:
            if n_steps is None:
                raise ValueError("n_steps is required for time-constant beta")
            beta = np.broadcast_to(beta, (n_steps, q, q))
        T = beta.shape[0]
        idx = np.arange(q)
        if not np.all(beta[:, idx, idx] == beta[:1, idx, idx]):
            raise InvalidParams("beta diagonal must be constant across time")
        b_diag, b_off = split_cells(beta)
        g_diag = g_off = None
        if gamma is not None:
            gamma = np.asarray(gamma, dtype=float)
            cell_ndim = family.cell_ndim
            if gamma.ndim == 2 + cell_ndim:
                gamma = np.broadcast_to(gamma, (T,) + gamma.shape)
            d = gamma[:, idx, idx]
            if not np.all(d == d[:1]):
                raise InvalidParams("gamma diagonal must be constant across time")
            g_diag, g_off = split_cells(gamma)
        if sigma2 is not None:
            sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (T,))
        if alpha is None:
            alpha = stationary_distribution(pi)
        params = cls(family, pi, alpha, b_diag, b_off, g_diag, g_off, sigma2)
        params.validate()
        return params

    def validate(self) -> None:
        """Raise :class:`InvalidParams` naming the first violated invariant."""
        q = self.n_groups
        if self.pi.shape != (q, q):
            raise InvalidParams(f"pi must be {q}x{q}")
        if np.any(self.pi < 0) or np.any(np.abs(self.pi.sum(axis=1) - 1) > SIMPLEX_TOL):
            raise InvalidParams("each row of pi must be a probability vector")
        if self.alpha.shape != (q,) or np.any(self.alpha < 0) \
                or abs(self.alpha.sum() - 1) > SIMPLEX_TOL:
            raise InvalidParams("alpha must be a probability vector of length Q")
        if self.beta_diag.shape != (q,) or self.beta_off.shape[1:] != (n_pairs(q),):
            raise InvalidParams("beta storage has wrong shape")
        for b in (self.beta_diag, self.beta_off):
            if np.any(~np.isfinite(b)) or np.any(b < 0) or np.any(b > 1):
                raise InvalidParams("every beta entry must lie in [0, 1]")
        self.family.validate_params(self)


@dataclass(frozen=True, eq=False)
class VariationalState:
    """Per-node Markov variational law.

    ``initial_tau[i]`` is the law of node i at t=0, ``trans_tau[t-1, i, q]``
    the law at t given group q at t-1. When node i re-enters at t after an
    absence, all rows of ``trans_tau[t-1, i]`` hold the same entry law.
    ``marg`` holds the derived marginals, NaN for absent node-times.
    """

    initial_tau: np.ndarray
    trans_tau: np.ndarray
    marg: np.ndarray

    def __post_init__(self):
        for name in ("initial_tau", "trans_tau", "marg"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def n_groups(self) -> int:
        return self.initial_tau.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.initial_tau.shape[0]

    @property
    def n_steps(self) -> int:
        return self.marg.shape[0]

    def marg_filled(self) -> np.ndarray:
        """Marginals with absent rows replaced by zeros (safe for sums)."""
        return np.where(np.isnan(self.marg), 0.0, self.marg)

    def check(self, presence=None, tol=SIMPLEX_TOL) -> None:
        """Assert the simplex invariants (raises AssertionError)."""
        assert np.all(self.initial_tau >= -tol) and np.all(self.initial_tau <= 1 + tol)
        assert np.all(np.abs(self.initial_tau.sum(-1) - 1) <= tol)
        if self.trans_tau.size:
            assert np.all(self.trans_tau >= -tol) and np.all(self.trans_tau <= 1 + tol)
            assert np.all(np.abs(self.trans_tau.sum(-1) - 1) <= tol)
        if presence is not None:
            presence = np.asarray(presence, dtype=bool)
            m = self.marg[presence]
            assert not np.isnan(m).any()
            assert np.all(np.abs(m.sum(-1) - 1) <= 1e-8)
            assert np.isnan(self.marg[~presence]).all()


def entry_mask(presence) -> np.ndarray:
    """``(T, N)``: node present at t and absent at t-1 (or t == 0)."""
    presence = np.asarray(presence, dtype=bool)
    e = presence.copy()
    e[1:] &= ~presence[:-1]
    return e


def continuing_mask(presence) -> np.ndarray:
    """``(T-1, N)``: node present at both t-1 and t (index t-1)."""
    presence = np.asarray(presence, dtype=bool)
    return presence[:-1] & presence[1:]


def compute_marginals(initial_tau, trans_tau, presence) -> np.ndarray:
    initial_tau = np.asarray(initial_tau, dtype=float)
    trans_tau = np.asarray(trans_tau, dtype=float)
    presence = np.asarray(presence, dtype=bool)
    T = presence.shape[0]
    N, Q = initial_tau.shape
    marg = np.full((T, N, Q), np.nan)
    marg[0][presence[0]] = initial_tau[presence[0]]
    for t in range(1, T):
        prev = np.where(presence[t - 1][:, None], marg[t - 1], 0.0)
        step = np.einsum("iq,iqr->ir", prev, trans_tau[t - 1])
        cont = presence[t] & presence[t - 1]
        marg[t][cont] = step[cont]
        # re-entry: the chain restarts from the entry law stored in row 0
        reentry = presence[t] & ~presence[t - 1]
        marg[t][reentry] = trans_tau[t - 1][reentry, 0, :]
    return marg


def recompute_marginals(state: VariationalState, presence) -> VariationalState:
    """Refresh ``marg`` from ``initial_tau`` and ``trans_tau``."""
    marg = compute_marginals(state.initial_tau, state.trans_tau, presence)
    return VariationalState(state.initial_tau, state.trans_tau, marg)


def make_state(initial_tau, trans_tau, presence) -> VariationalState:
    return VariationalState(initial_tau, trans_tau,
                            compute_marginals(initial_tau, trans_tau, presence))


@dataclass(frozen=True, eq=False)
class SufficientStats:
    """Expected counts under the variational law.

    occupancy[t, q, l]: expected number of present unordered pairs in
    (q, l), symmetrised so that it sums to the number of present pairs.
    transitions[q, q']: expected transition mass over continuing nodes.
    entries[q]: expected entry counts (t=0 and re-entries).
    """

    occupancy: np.ndarray
    transitions: np.ndarray
    entries: np.ndarray
    n_transitions: int = field(default=0)


def sufficient_stats(state: VariationalState, presence) -> SufficientStats:
    presence = np.asarray(presence, dtype=bool)
    marg = np.where(presence[..., None], state.marg, 0.0)
    T, N, Q = marg.shape
    occ = np.empty((T, Q, Q))
    for t in range(T):
        s = marg[t].sum(axis=0)
        occ[t] = 0.5 * (np.outer(s, s) - marg[t].T @ marg[t])
    cont = continuing_mask(presence)
    trans = np.zeros((Q, Q))
    for t in range(1, T):
        w = np.where(cont[t - 1][:, None], marg[t - 1], 0.0)
        trans += np.einsum("iq,iqr->qr", w, state.trans_tau[t - 1])
    ent = entry_mask(presence)
    entries = np.where(ent[..., None], marg, 0.0).sum(axis=(0, 1))
    return SufficientStats(occ, trans, entries, int(cont.sum()))
