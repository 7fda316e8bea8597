"""Brute-force references for small instances.

Everything here goes through :func:`dynsbm.emissions.log_density` and
explicit loops or enumeration rather than the feature decomposition used by
the engine, so agreement between the two is a real check.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp, xlogy

from dynsbm.emissions import MASS_EPS, FiniteSpace, GaussianHomoscedastic, log_density
from dynsbm.errors import BudgetExceeded
from dynsbm.model_core import ABSENT, DynamicNetwork, ModelParams, VariationalState, make_state

DEFAULT_MAX_CONFIGS = 10**6


@dataclass(frozen=True)
class OracleBudget:
    max_configs: int = DEFAULT_MAX_CONFIGS


def _pair_logphi(params: ModelParams, net: DynamicNetwork, t):
    """``(i, j, L)`` for present pairs i < j at t with ``L[q, l, p]`` the
    log density of pair p under cell (q, l)."""
    idx = np.flatnonzero(net.presence[t])
    ii, jj = np.triu_indices(idx.size, 1)
    i, j = idx[ii], idx[jj]
    y = net.weights[t, i, j]
    beta = params.beta()[t][:, :, None]
    gamma = params.gamma()
    s2 = None if params.sigma2 is None else params.sigma2[t]
    if gamma is None:
        g = None
    elif isinstance(params.family, FiniteSpace):
        g = gamma[t][:, :, None, :]
    else:
        g = gamma[t][:, :, None]
    L = log_density(params.family, beta, g, y[None, None, :], sigma2=s2)
    return i, j, np.broadcast_to(L, beta.shape[:2] + y.shape)


def _weighted(w, x):
    with np.errstate(invalid="ignore"):
        return np.where(w == 0, 0.0, w * x)


def direct_emission_term(params: ModelParams, marg, net: DynamicNetwork) -> float:
    """``sum_t sum_{i<j present} sum_{q,l} tau_iq tau_jl log phi(Y_ij)``."""
    total = 0.0
    for t in range(net.n_steps):
        i, j, L = _pair_logphi(params, net, t)
        if i.size == 0:
            continue
        w = marg[t, i][:, :, None] * marg[t, j][:, None, :]       # (P, Q, Q)
        total += float(_weighted(w, np.moveaxis(L, -1, 0)).sum())
    return total


def direct_chain_term(params: ModelParams, state: VariationalState, presence) -> float:
    """Prior plus entropy part of the ELBO by explicit loops."""
    presence = np.asarray(presence, dtype=bool)
    T, N = presence.shape
    la = np.log(np.where(params.alpha > 0, params.alpha, 1.0))
    total = 0.0

    def entry(row):
        s = 0.0
        for q, r in enumerate(row):
            if r > 0:
                if params.alpha[q] == 0:
                    return -np.inf
                s += r * (la[q] - np.log(r))
        return s

    for i in range(N):
        for t in range(T):
            if not presence[t, i]:
                continue
            if t == 0:
                total += entry(state.initial_tau[i])
            elif not presence[t - 1, i]:
                total += entry(state.trans_tau[t - 1, i, 0])
            else:
                for q in range(state.n_groups):
                    m = state.marg[t - 1, i, q]
                    for r in range(state.n_groups):
                        tau = state.trans_tau[t - 1, i, q, r]
                        if m * tau == 0:
                            continue
                        if params.pi[q, r] == 0:
                            return -np.inf
                        total += m * tau * (np.log(params.pi[q, r]) - np.log(tau))
    return total


def direct_elbo(params: ModelParams, state: VariationalState, net: DynamicNetwork) -> float:
    marg = np.where(np.isnan(state.marg), 0.0, state.marg)
    return direct_chain_term(params, state, net.presence) + direct_emission_term(params, marg, net)


def direct_scores(params: ModelParams, marg, net: DynamicNetwork, t, i):
    """``E[q] = sum_{j != i present} sum_l tau_jl log phi_ql(Y_ij)`` by loops."""
    Q = params.n_groups
    out = np.zeros(Q)
    beta, gamma = params.beta(), params.gamma()
    s2 = None if params.sigma2 is None else params.sigma2[t]
    for j in range(net.n_nodes):
        if j == i or not net.presence[t, j]:
            continue
        y = net.weights[t, i, j]
        for q in range(Q):
            for l in range(Q):
                w = marg[t, j, l]
                if w == 0:
                    continue
                g = None if gamma is None else gamma[t, q, l]
                out[q] += w * log_density(params.family, beta[t, q, l], g, y, sigma2=s2)
    return out


def direct_transition_row(params, state, net, t, i, q):
    """One fixed-point evaluation of ``tau(t, i, q, .)`` from the product
    formula (continuing node)."""
    marg = np.where(np.isnan(state.marg), 0.0, state.marg)
    logits = np.log(params.pi[q]) + direct_scores(params, marg, net, t, i)
    return np.exp(logits - logsumexp(logits))


def direct_initial_row(params, state, net, i):
    marg = np.where(np.isnan(state.marg), 0.0, state.marg)
    logits = np.log(params.alpha) + direct_scores(params, marg, net, 0, i)
    return np.exp(logits - logsumexp(logits))


# --------------------------------------------------------------------------
# enumeration

def _cells(presence):
    return [(t, i) for t in range(presence.shape[0]) for i in range(presence.shape[1])
            if presence[t, i]]


def _check_budget(n_groups, n_cells, max_configs):
    size = n_groups ** n_cells
    if size > max_configs:
        raise BudgetExceeded(f"{n_groups}^{n_cells} = {size} configurations exceed the "
                             f"budget of {max_configs}")
    return size


def _config_block(start, stop, n_cells, Q):
    codes = np.arange(start, stop, dtype=np.int64)
    out = np.empty((codes.size, n_cells), dtype=np.int64)
    for k in range(n_cells - 1, -1, -1):
        out[:, k] = codes % Q
        codes //= Q
    return out


def exact_log_likelihood(params: ModelParams, net: DynamicNetwork,
                         max_configs: int = DEFAULT_MAX_CONFIGS, block: int = 1 << 16) -> float:
    """``log sum_Z P(Z) P(Y | Z)`` by enumerating every latent configuration
    of the present node-times."""
    Q = params.n_groups
    pres = net.presence
    T, N = pres.shape
    cells = _cells(pres)
    size = _check_budget(Q, len(cells), max_configs)
    col = {c: k for k, c in enumerate(cells)}
    la = np.log(np.where(params.alpha > 0, params.alpha, 1.0))
    la = np.where(params.alpha > 0, la, -np.inf)
    with np.errstate(divide="ignore"):
        lp = np.log(params.pi)
    entries, steps = [], []
    for (t, i), k in col.items():
        if t > 0 and pres[t - 1, i]:
            steps.append((col[(t - 1, i)], k))
        else:
            entries.append(k)
    pair_tabs = []
    for t in range(T):
        i, j, L = _pair_logphi(params, net, t)
        pair_tabs.append(([col[(t, a)] for a in i], [col[(t, b)] for b in j], L))
    parts = []
    for start in range(0, size, block):
        z = _config_block(start, min(start + block, size), len(cells), Q)
        lw = la[z[:, entries]].sum(1) if entries else np.zeros(z.shape[0])
        for a, b in steps:
            lw = lw + lp[z[:, a], z[:, b]]
        for ca, cb, L in pair_tabs:
            if not ca:
                continue
            p = np.arange(len(ca))
            lw = lw + L[z[:, ca], z[:, cb], p].sum(1)
        parts.append(logsumexp(lw))
    return float(logsumexp(parts))


def hard_state(labels, n_groups, presence) -> VariationalState:
    """Degenerate variational law putting all mass on ``labels``."""
    labels = np.asarray(labels)
    presence = np.asarray(presence, dtype=bool)
    T, N = presence.shape
    eye = np.eye(n_groups)
    first = np.where(labels[0] >= 0, labels[0], 0)
    init = eye[first]
    trans = np.empty((max(T - 1, 0), N, n_groups, n_groups))
    for t in range(1, T):
        nxt = np.where(labels[t] >= 0, labels[t], 0)
        trans[t - 1] = eye[nxt][:, None, :]
    return make_state(init, trans, presence)


@dataclass
class HardSearchResult:
    labels: np.ndarray
    params: ModelParams
    elbo: float
    n_configs: int


def exhaustive_hard_search(net: DynamicNetwork, n_groups: int, family,
                           max_configs: int = DEFAULT_MAX_CONFIGS) -> HardSearchResult:
    """Best ``J`` over every hard labelling, each followed by the closed-form
    M-step. Labellings equal up to a group permutation are visited once."""
    from dynsbm.emissions import LogDensityTable
    from dynsbm.vem import compute_elbo, initial_guess, mstep

    pres = net.presence
    cells = _cells(pres)
    size = _check_budget(n_groups, len(cells), max_configs)
    base = LogDensityTable(family, net)
    guess = initial_guess(family, base, n_groups)
    best = None
    for code in range(size):
        z = _config_block(code, code + 1, len(cells), n_groups)[0]
        # canonical form: first occurrences of groups appear in order
        seen = []
        for g in z:
            if g not in seen:
                seen.append(g)
        if seen != sorted(seen) or (seen and seen[0] != 0):
            continue
        labels = np.full(pres.shape, ABSENT, dtype=int)
        for (t, i), g in zip(cells, z):
            labels[t, i] = g
        state = hard_state(labels, n_groups, pres)
        params = mstep(state, guess, base, pres)
        J = compute_elbo(params, state, net, base.with_params(params))
        if best is None or J > best.elbo:
            best = HardSearchResult(labels, params, J, size)
    return best


# --------------------------------------------------------------------------
# numeric M-step verification

@dataclass
class CheckItem:
    name: str
    analytic: float
    numeric: float
    gain: float
    ok: bool


@dataclass
class MStepReport:
    items: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(it.ok for it in self.items)

    @property
    def violations(self):
        return [it for it in self.items if not it.ok]


def _maximise(f, x0, lo, hi, tol, name, report):
    res = minimize_scalar(lambda x: -f(x), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12, "maxiter": 2000})
    x_num, f0 = float(res.x), f(x0)
    for cand in (lo, hi):           # the bounded search never evaluates endpoints
        if f(cand) > -res.fun:
            x_num, res.fun = cand, -f(cand)
    gain = -res.fun - f0
    scale = max(1.0, abs(x0))
    ok = abs(x_num - x0) <= tol * scale or gain <= 1e-12 * max(1.0, abs(f0))
    # no +-1e-3 step may improve the objective either
    for d in (-1e-3, 1e-3):
        if lo <= x0 + d <= hi and f(x0 + d) > f0 + 1e-12 * max(1.0, abs(f0)):
            ok = False
    report.items.append(CheckItem(name, float(x0), x_num, float(gain), ok))


def _cell_mass(marg, net, t_sel, q, l):
    """Expected number of present pairs in cell (q, l) over the times in t_sel."""
    m = 0.0
    for t in t_sel:
        mt = marg[t]
        s = mt.sum(0)
        M = 0.5 * (np.outer(s, s) - mt.T @ mt)
        m += M[q, l] + (M[l, q] if q != l else 0.0)
    return m


def _nonzero_mass(marg, net, t_sel, q, l):
    m = 0.0
    for t in t_sel:
        w = (net.weights[t] != 0) & net.pair_mask()[t]
        m += marg[t][:, q] @ w @ marg[t][:, l]
    return m


def numeric_mstep_check(family, state: VariationalState, net: DynamicNetwork,
                        analytic: ModelParams, tol: float = 1e-5) -> MStepReport:
    """Check every closed-form parameter is a maximiser of its ELBO term.

    Scalars (beta cells, Poisson rates, Gaussian means and variances) are
    re-optimised one at a time with a bounded Brent search. Probability
    vectors (rows of pi, finite-space gamma) are checked by moving mass
    between every pair of entries. Cells without expected mass carry no
    information and are listed under ``skipped``. ``alpha`` is not checked:
    its update is the averaged marginal, not a maximiser.
    """
    report = MStepReport()
    marg = np.where(np.isnan(state.marg), 0.0, state.marg)
    pres = net.presence
    T = net.n_steps
    Q = analytic.n_groups
    iu, ju = np.triu_indices(Q, 1)

    def emis(p):
        return direct_emission_term(p, marg, net)

    def chain(p):
        return direct_chain_term(p, state, pres)

    def slot(arr_name, index, value, p=analytic):
        arr = np.array(getattr(p, arr_name), dtype=float, copy=True)
        arr[index] = value
        return p.replace(**{arr_name: arr})

    cell_refs = [("diag", q, tuple(range(T)), q, q) for q in range(Q)]
    cell_refs += [("off", (t, k), (t,), iu[k], ju[k]) for t in range(T) for k in range(iu.size)]

    # sparsity
    for kind, index, t_sel, q, l in cell_refs:
        name = f"beta_{kind}{index}"
        if _cell_mass(marg, net, t_sel, q, l) < MASS_EPS:
            report.skipped.append(name)
            continue
        arr = "beta_diag" if kind == "diag" else "beta_off"
        x0 = float(getattr(analytic, arr)[index])
        _maximise(lambda x: emis(slot(arr, index, x)), x0, 0.0, 1.0, tol, name, report)

    # nonzero-part parameters
    if isinstance(family, FiniteSpace):
        for kind, index, t_sel, q, l in cell_refs:
            name = f"gamma_{kind}{index}"
            arr = "gamma_diag" if kind == "diag" else "gamma_off"
            if _nonzero_mass(marg, net, t_sel, q, l) < MASS_EPS:
                report.skipped.append(name)
                continue
            g0 = np.array(getattr(analytic, arr)[index], dtype=float)
            for a, b in itertools.combinations(range(g0.size), 2):
                def f(s, a=a, b=b):
                    g = g0.copy()
                    g[a] += s
                    g[b] -= s
                    return emis(slot(arr, index, g))
                _maximise(f, 0.0, -g0[a], g0[b], tol, f"{name}[{a}<->{b}]", report)
    elif family.has_gamma:
        for kind, index, t_sel, q, l in cell_refs:
            name = f"gamma_{kind}{index}"
            arr = "gamma_diag" if kind == "diag" else "gamma_off"
            if _nonzero_mass(marg, net, t_sel, q, l) < MASS_EPS:
                report.skipped.append(name)
                continue
            x0 = float(getattr(analytic, arr)[index])
            if isinstance(family, GaussianHomoscedastic):
                w = max(1.0, abs(x0))
                lo, hi = x0 - w, x0 + w
            else:
                lo, hi = 1e-9, max(10.0, 3 * x0)
            _maximise(lambda x: emis(slot(arr, index, x)), x0, lo, hi, tol, name, report)
        if isinstance(family, GaussianHomoscedastic):
            for t in range(T):
                name = f"sigma2[{t}]"
                if sum(_nonzero_mass(marg, net, (t,), a, b)
                       for a in range(Q) for b in range(a, Q)) < MASS_EPS:
                    report.skipped.append(name)
                    continue
                x0 = float(analytic.sigma2[t])
                _maximise(lambda x: emis(slot("sigma2", t, x)), x0, x0 * 1e-3, x0 * 10,
                          tol, name, report)

    # transition rows
    for q in range(Q):
        row = analytic.pi[q]
        for a, b in itertools.combinations(range(Q), 2):
            def f(s, a=a, b=b):
                p = np.array(analytic.pi, copy=True)
                p[q, a] += s
                p[q, b] -= s
                return chain(analytic.replace(pi=p))
            if not np.isfinite(chain(analytic)):
                report.skipped.append(f"pi[{q}]")
                break
            _maximise(f, 0.0, -row[a], row[b], tol, f"pi[{q}][{a}<->{b}]", report)
    return report
