"""Variational EM for the dynamic SBM.

One outer iteration runs the VE step (fixed-point sweeps on the transition
laws, then on the initial laws) followed by the M-step. Both steps are
guarded: a proposal is accepted along the segment from the current value
only as far as the ELBO does not decrease, so the recorded trace is
monotone. The number of shortened or rejected proposals is reported in the
fit diagnostics.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from dynsbm.emissions import (
    MASS_EPS,
    EmissionFamily,
    LogDensityTable,
    _safe_mul,
    log_density,
    mstep_beta,
)
from dynsbm.errors import DegenerateFit
from dynsbm.initialization import InitConfig, kmeans_labels, state_from_labels
from dynsbm.model_core import (
    ABSENT,
    DynamicNetwork,
    ModelParams,
    VariationalState,
    continuing_mask,
    entry_mask,
    make_state,
    n_pairs,
)

log = logging.getLogger(__name__)

DECREASE_TOL = 1e-9
MAX_BACKTRACKS = 12


@dataclass(frozen=True)
class FitConfig:
    max_outer_iters: int = 200
    elbo_rel_tol: float = 1e-4
    fp_inner_iters: int = 5
    fp_tol: float = 1e-6
    n_restarts: int = 5
    seed: int = 0
    map_mode: str = "marginal_argmax"
    allow_degenerate: bool = False
    perturb_fraction: float = 0.2
    threads: int = 1
    init: InitConfig = field(default_factory=InitConfig)

    def __post_init__(self):
        if self.elbo_rel_tol <= 0 or self.fp_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if min(self.max_outer_iters, self.fp_inner_iters, self.n_restarts, self.threads) < 1:
            raise ValueError("iteration, restart and thread counts must be >= 1")
        if self.map_mode not in ("marginal_argmax", "viterbi"):
            raise ValueError(f"unknown map_mode {self.map_mode!r}")


@dataclass
class RestartSummary:
    restart: int
    final_elbo: float
    n_iter: int
    converged: bool
    halted: bool
    occupied: int
    ve_shortened: int
    ve_rejected: int
    alpha_shortened: int


@dataclass
class FitResult:
    params: ModelParams
    state: VariationalState
    elbo_trace: list
    map_labels: np.ndarray
    complete_ll: float
    converged: bool
    restarts_summary: list
    degenerate: bool = False
    best_restart: int = 0

    @property
    def elbo(self) -> float:
        return self.elbo_trace[-1]

    @property
    def n_groups(self) -> int:
        return self.params.n_groups


# --------------------------------------------------------------------------
# helpers

def _normalize_log(logits, fallback):
    """Row-normalise ``exp(logits)`` over the last axis; rows that are
    entirely -inf fall back to ``fallback``."""
    m = logits.max(axis=-1, keepdims=True)
    dead = ~np.isfinite(m)
    with np.errstate(invalid="ignore"):
        p = np.exp(logits - np.where(dead, 0.0, m))
    p /= np.where(dead, 1.0, p.sum(axis=-1, keepdims=True))
    return np.where(dead, fallback, p)


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _table(net, family, table=None):
    if table is not None:
        return table
    return LogDensityTable(family, net)


# --------------------------------------------------------------------------
# VE step

def _transition_sweep(state, params, tab, presence, E=None):
    if E is None:
        E = tab.scores(state.marg_filled())
    T = presence.shape[0]
    logpi = _log(params.pi)
    logalpha = _log(params.alpha)
    trans = np.array(state.trans_tau, copy=True)
    for t in range(1, T):
        cont = presence[t - 1] & presence[t]
        if cont.any():
            logits = logpi[None] + E[t][cont][:, None, :]
            trans[t - 1][cont] = _normalize_log(logits, trans[t - 1][cont])
        re = presence[t] & ~presence[t - 1]
        if re.any():
            row = _normalize_log(logalpha[None] + E[t][re], trans[t - 1][re, 0])
            trans[t - 1][re] = row[:, None, :]
    return make_state(state.initial_tau, trans, presence)


def _initial_sweep(state, params, tab, presence, E=None):
    if E is None:
        E = tab.scores(state.marg_filled())
    init = np.array(state.initial_tau, copy=True)
    p0 = presence[0]
    init[p0] = _normalize_log(_log(params.alpha)[None] + E[0][p0], init[p0])
    return make_state(init, state.trans_tau, presence)


def ve_update_transition_tau(state, params, log_densities, presence,
                             n_sweeps=5, tol=1e-6) -> VariationalState:
    """Fixed-point sweeps ``tau(t,i,q,.) ∝ pi_q. * prod_j prod_l phi^{tau_marg}``.

    Sweeps are synchronous: every row is computed from the previous sweep's
    marginals. Re-entering nodes use alpha in place of the pi row.
    ``log_densities`` is a :class:`LogDensityTable` bound to ``params``.
    """
    presence = np.asarray(presence, dtype=bool)
    for _ in range(n_sweeps):
        new = _transition_sweep(state, params, log_densities, presence)
        change = np.max(np.abs(new.trans_tau - state.trans_tau), initial=0.0)
        state = new
        if change < tol:
            break
    return state


def ve_update_initial_tau(state, params, log_densities, presence,
                          n_sweeps=5, tol=1e-6) -> VariationalState:
    """Fixed-point sweeps ``tau(i,q) ∝ alpha_q prod_{j != i} prod_l phi^1_ql^{tau(j,l)}``."""
    presence = np.asarray(presence, dtype=bool)
    for _ in range(n_sweeps):
        new = _initial_sweep(state, params, log_densities, presence)
        change = np.max(np.abs(new.initial_tau - state.initial_tau), initial=0.0)
        state = new
        if change < tol:
            break
    return state


# --------------------------------------------------------------------------
# M-step

def mstep_pi(state: VariationalState, presence, prev=None) -> np.ndarray:
    """``pi_qq' ∝ sum_t sum_i tau_marg(t-1,i,q) tau(t,i,q,q')`` over nodes
    present at both t-1 and t. Rows without mass keep ``prev`` (uniform
    when ``prev`` is None)."""
    presence = np.asarray(presence, dtype=bool)
    Q = state.n_groups
    cont = continuing_mask(presence)
    counts = np.zeros((Q, Q))
    for t in range(1, state.n_steps):
        w = np.where(cont[t - 1][:, None], state.marg[t - 1], 0.0)
        counts += np.einsum("iq,iqr->qr", w, state.trans_tau[t - 1])
    rows = counts.sum(axis=1, keepdims=True)
    fallback = np.full((Q, Q), 1.0 / Q) if prev is None else prev
    return np.where(rows >= MASS_EPS, counts / np.where(rows > 0, rows, 1.0), fallback)


def mstep_alpha(state: VariationalState, presence) -> np.ndarray:
    """Average marginal over present node-times."""
    presence = np.asarray(presence, dtype=bool)
    m = state.marg[presence]
    if m.shape[0] == 0:
        return np.full(state.n_groups, 1.0 / state.n_groups)
    a = m.sum(axis=0) / m.shape[0]
    return a / a.sum()


def initial_guess(family: EmissionFamily, tab: LogDensityTable, n_groups: int) -> ModelParams:
    """One-group estimates broadcast to every cell; used as the fallback for
    empty cells in the very first M-step."""
    Q, T = n_groups, tab.net.n_steps
    A_total = tab.features.sum(axis=(0, 2, 3))
    den = A_total[0] + A_total[1]
    b = A_total[1] / den if den > 0 else 0.5
    g = family.initial_gamma(A_total, Q, T)
    return ModelParams(family, np.full((Q, Q), 1.0 / Q), np.full(Q, 1.0 / Q),
                       np.full(Q, b), np.full((T, n_pairs(Q)), b),
                       g["gamma_diag"], g["gamma_off"], g["sigma2"])


def mstep(state, prev: ModelParams, tab: LogDensityTable, presence, A=None) -> ModelParams:
    """Closed-form update of (pi, alpha, beta, gamma) given the variational law."""
    if A is None:
        M = state.marg_filled()
        A = tab.pair_sums(M, tab.neighbour_sums(M))
    b_d, b_o = mstep_beta(A, prev.beta_diag, prev.beta_off)
    g = prev.family.mstep_gamma(A, prev)
    return ModelParams(prev.family, mstep_pi(state, presence, prev.pi), mstep_alpha(state, presence),
                       b_d, b_o, g["gamma_diag"], g["gamma_off"], g["sigma2"])


# --------------------------------------------------------------------------
# objective

def _chain_terms(params, state, presence):
    presence = np.asarray(presence, dtype=bool)
    total = 0.0
    p0 = presence[0]
    tau0 = state.initial_tau[p0]
    total += float((xlogy(tau0, params.alpha[None]) - xlogy(tau0, tau0)).sum())
    for t in range(1, state.n_steps):
        tr = state.trans_tau[t - 1]
        re = presence[t] & ~presence[t - 1]
        if re.any():
            row = tr[re, 0]
            total += float((xlogy(row, params.alpha[None]) - xlogy(row, row)).sum())
        cont = presence[t] & presence[t - 1]
        if cont.any():
            w = np.broadcast_to(state.marg[t - 1][cont][:, :, None], tr[cont].shape)
            tc = tr[cont]
            # weight the log pi part by the joint mass: when w * tc underflows
            # to 0 the M-step may set pi to 0 there as well
            total += float((xlogy(w * tc, params.pi[None]) - _safe_mul(w, xlogy(tc, tc))).sum())
    return total


def compute_elbo(params: ModelParams, state: VariationalState, net: DynamicNetwork,
                 table: LogDensityTable | None = None) -> float:
    """Evidence lower bound J(theta, tau) with ``0 log 0 = 0``."""
    tab = _table(net, params.family, table)
    if tab.coef is None:
        tab = tab.with_params(params)
    M = state.marg_filled()
    A = tab.pair_sums(M, tab.neighbour_sums(M))
    return _chain_terms(params, state, net.presence) + tab.emission_term(A, M)


def complete_log_likelihood(params: ModelParams, labels, net: DynamicNetwork) -> float:
    """``log P_theta(Y, Z)`` at hard labels (``ABSENT`` for absent node-times)."""
    labels = np.asarray(labels)
    pres = net.presence
    if np.any((labels == ABSENT) != ~pres):
        raise ValueError("labels must be ABSENT exactly where nodes are absent")
    la, lp = _log(params.alpha), _log(params.pi)
    ent = entry_mask(pres)
    total = float(la[labels[ent]].sum())
    cont = continuing_mask(pres)
    if cont.size:
        prev, nxt = labels[:-1][cont], labels[1:][cont]
        total += float(lp[prev, nxt].sum())
    beta = params.beta()
    gamma = params.gamma()
    fam = params.family
    for t in range(net.n_steps):
        idx = np.flatnonzero(pres[t])
        if idx.size < 2:
            continue
        ii, jj = np.triu_indices(idx.size, 1)
        i, j = idx[ii], idx[jj]
        zi, zj = labels[t, i], labels[t, j]
        y = net.weights[t, i, j]
        g = None if gamma is None else gamma[t, zi, zj]
        s2 = None if params.sigma2 is None else params.sigma2[t]
        total += float(np.sum(log_density(fam, beta[t, zi, zj], g, y, sigma2=s2)))
    return total


# --------------------------------------------------------------------------
# MAP

def _viterbi_segment(log_init, log_trans):
    """Most probable path of a chain with per-step transition tables."""
    n = log_trans.shape[0] + 1
    Q = log_init.shape[0]
    delta = log_init.copy()
    back = np.zeros((n, Q), dtype=int)
    for s in range(1, n):
        cand = delta[:, None] + log_trans[s - 1]
        back[s] = np.argmax(cand, axis=0)
        delta = cand[back[s], np.arange(Q)]
    path = np.empty(n, dtype=int)
    path[-1] = int(np.argmax(delta))
    for s in range(n - 1, 0, -1):
        path[s - 1] = back[s, path[s]]
    return path


def map_classification(state: VariationalState, mode="marginal_argmax", presence=None) -> np.ndarray:
    """``(T, N)`` MAP labels; ``ABSENT`` where the node is absent.

    ``marginal_argmax`` takes the per node-time argmax (ties to the lowest
    group). ``viterbi`` takes the most probable path of each node's
    variational chain, restarting on every re-entry.
    """
    if presence is None:
        presence = ~np.isnan(state.marg[..., 0])
    presence = np.asarray(presence, dtype=bool)
    T, N = presence.shape
    labels = np.full((T, N), ABSENT, dtype=int)
    if mode == "marginal_argmax":
        filled = state.marg_filled()
        labels[presence] = np.argmax(filled, axis=-1)[presence]
        return labels
    if mode != "viterbi":
        raise ValueError(f"unknown MAP mode {mode!r}")
    for i in range(N):
        t = 0
        while t < T:
            if not presence[t, i]:
                t += 1
                continue
            start = t
            while t + 1 < T and presence[t + 1, i]:
                t += 1
            init = state.initial_tau[i] if start == 0 else state.trans_tau[start - 1, i, 0]
            steps = state.trans_tau[start:t, i]
            labels[start:t + 1, i] = _viterbi_segment(_log(init), _log(steps))
            t += 1
    return labels


# --------------------------------------------------------------------------
# driver

def _mix_state(old, new, lam, presence):
    init = (1 - lam) * old.initial_tau + lam * new.initial_tau
    trans = (1 - lam) * old.trans_tau + lam * new.trans_tau
    return make_state(init, trans, presence)


def _line_search(state, prop, params, tab, presence, J):
    """Accept ``prop`` or the largest step ``2^-k`` towards it that keeps J
    from decreasing. Returns ``(state, J, outcome)``."""
    J_new = compute_elbo(params, prop, tab.net, tab)
    if J_new >= J:
        return prop, J_new, "full"
    lam = 1.0
    for _ in range(MAX_BACKTRACKS):
        lam *= 0.5
        cand = _mix_state(state, prop, lam, presence)
        J_c = compute_elbo(params, cand, tab.net, tab)
        if J_c >= J:
            return cand, J_c, "short"
    return state, J, "rejected"


def _guarded_ve(state, params, tab, presence, config, J):
    """Transition block then initial block, each guarded on its own.

    Returns ``(state, J, outcomes)`` with one outcome per block.
    """
    prop = ve_update_transition_tau(state, params, tab, presence,
                                    config.fp_inner_iters, config.fp_tol)
    state, J, o_trans = _line_search(state, prop, params, tab, presence, J)
    prop = ve_update_initial_tau(state, params, tab, presence,
                                 config.fp_inner_iters, config.fp_tol)
    state, J, o_init = _line_search(state, prop, params, tab, presence, J)
    return state, J, (o_trans, o_init)


def _guarded_mstep(state, params, tab, presence):
    """M-step; pi, beta, gamma are exact maximisers, alpha (the averaged
    marginal) is moved only as far as it does not lower J."""
    new = mstep(state, params, tab, presence)
    tab_new = tab.with_params(new)
    J_new = compute_elbo(new, state, tab.net, tab_new)
    short = 0
    keep = new.replace(alpha=params.alpha)
    J_keep = compute_elbo(keep, state, tab.net, tab_new)
    if J_new < J_keep:
        short = 1
        lam, best = 1.0, (keep, J_keep)
        for _ in range(MAX_BACKTRACKS):
            lam *= 0.5
            a = (1 - lam) * params.alpha + lam * new.alpha
            cand = new.replace(alpha=a / a.sum())
            J_c = compute_elbo(cand, state, tab.net, tab_new)
            if J_c >= J_keep:
                best = (cand, J_c)
                break
        new, J_new = best
    return new, tab_new, J_new, short


def _run_restart(net, family, n_groups, state, restart, config, features):
    presence = net.presence
    base = LogDensityTable(family, net, features)
    # the first M-step has no earlier J to protect: take it whole
    params = mstep(state, initial_guess(family, base, n_groups), base, presence)
    tab = base.with_params(params)
    J = compute_elbo(params, state, net, tab)
    trace = [J]
    converged = halted = False
    ve_short = ve_rej = a_short = 0
    n_iter = 0
    for it in range(config.max_outer_iters):
        n_iter = it + 1
        new_state, _, outcomes = _guarded_ve(state, params, tab, presence, config, J)
        ve_short += outcomes.count("short")
        ve_rej += outcomes.count("rejected")
        new_params, new_tab, J_new, s = _guarded_mstep(new_state, params, tab, presence)
        a_short += s
        tol = DECREASE_TOL + 64 * np.finfo(float).eps * abs(J)
        if J_new < J - tol or not np.isfinite(J_new):
            log.warning("restart %d: ELBO decreased from %.12g to %.12g at iteration %d; "
                        "keeping the previous iterate", restart, J, J_new, n_iter)
            halted = True
            break
        rel = abs(J_new - J) / max(abs(J), 1e-300)
        state, params, tab, J = new_state, new_params, new_tab, J_new
        trace.append(J)
        if rel < config.elbo_rel_tol:
            converged = True
            break
    labels = map_classification(state, config.map_mode, presence)
    occupied = len(np.unique(labels[labels != ABSENT]))
    summary = RestartSummary(restart, J, n_iter, converged, halted, occupied,
                             ve_short, ve_rej, a_short)
    return state, params, trace, labels, summary


def _restart_labels(labels0, n_groups, restart, config):
    if restart == 0 or n_groups == 1:
        return labels0
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, restart]))
    labels = labels0.copy()
    k = int(round(config.perturb_fraction * labels.size))
    idx = rng.choice(labels.size, size=k, replace=False)
    labels[idx] = rng.integers(0, n_groups, size=k)
    return labels


def _blas_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n, user_api="blas")


def fit(net: DynamicNetwork, n_groups: int, family: EmissionFamily,
        config: FitConfig = FitConfig()) -> FitResult:
    """Fit the model with ``n_groups`` groups; best of ``config.n_restarts``.

    Raises :class:`DegenerateFit` when every restart leaves a group empty
    in the MAP labels, unless ``config.allow_degenerate``.
    """
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    if n_groups > net.n_nodes:
        raise ValueError("n_groups must not exceed the number of nodes")
    with _blas_limit(1):
        labels0 = np.zeros(net.n_nodes, dtype=int) if n_groups == 1 else \
            kmeans_labels(net, n_groups, config.seed, config.init, family)
        features = family.features(net)
        n_restarts = 1 if n_groups == 1 else config.n_restarts

        def one(r):
            labels = _restart_labels(labels0, n_groups, r, config)
            state = state_from_labels(labels, n_groups, net.presence, config.init.soft_eps)
            return _run_restart(net, family, n_groups, state, r, config, features)

        if config.threads > 1 and n_restarts > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as ex:
                runs = list(ex.map(one, range(n_restarts)))
        else:
            runs = [one(r) for r in range(n_restarts)]

    ok = [k for k, run in enumerate(runs) if run[4].occupied == n_groups]
    pool = ok if ok else list(range(len(runs)))
    best = max(pool, key=lambda k: (runs[k][4].final_elbo, -k))
    state, params, trace, labels, _ = runs[best]
    result = FitResult(params=params, state=state, elbo_trace=trace, map_labels=labels,
                       complete_ll=complete_log_likelihood(params, labels, net),
                       converged=runs[best][4].converged,
                       restarts_summary=[r[4] for r in runs],
                       degenerate=not ok, best_restart=best)
    if result.degenerate and not config.allow_degenerate:
        raise DegenerateFit(f"all {len(runs)} restarts left fewer than {n_groups} "
                            "occupied groups", result)
    return result
