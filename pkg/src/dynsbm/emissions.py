"""Zero-inflated emission families.

An edge value between groups (q, l) at time t has law
``(1 - beta) * delta_0 + beta * F(., gamma)``. Every family writes
``log phi(y)`` as a linear combination ``sum_k g_k(y) * c_k(beta, gamma)`` of
data features ``g_k`` and parameter coefficients ``c_k``. Feature 0 is the
zero indicator and feature 1 the nonzero indicator; families append their
own. With this decomposition the VE scores and the M-step sufficient
statistics are plain matrix products.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special, stats

from dynsbm.errors import DomainError, InvalidParams, UnsupportedFamily, UnsupportedValue
from dynsbm.model_core import expand_cells, n_pairs, pair_indices

# empty-cell threshold on expected (ordered-pair) mass
MASS_EPS = 1e-10
SIGMA2_FLOOR = 1e-8
# smallest Poisson rate an M-step may return (mean of nonzero values == 1)
POISSON_RATE_FLOOR = 1e-8


def psi(x):
    """``x e^x / (e^x - 1)``: mean of a zero-truncated Poisson with rate x."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DomainError("psi is defined for x > 0")
    out = x / -np.expm1(-x)
    return out.item() if out.ndim == 0 else out


def _dpsi(x):
    # d/dx [x / (1 - e^-x)]
    em = math.expm1(-x)
    return (-em - x * math.exp(-x)) / (em * em)


def psi_inverse(y: float) -> float:
    """Solve ``psi(x) = y`` for x > 0 (requires y > 1)."""
    y = float(y)
    if not y > 1.0:
        raise DomainError(f"psi_inverse requires y > 1, got {y!r}")
    lo, hi = 1e-12, max(50.0, 2.0 * y)

    def g(x):
        return x / -math.expm1(-x) - y

    if g(lo) >= 0:
        return lo
    x = optimize.brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    for _ in range(2):
        d = _dpsi(x)
        step = g(x) / d
        if not np.isfinite(step):
            break
        cand = x - step
        if cand > 0 and abs(g(cand)) <= abs(g(x)):
            x = cand
    return x


def _safe_mul(a, c):
    """Elementwise ``a * c`` with ``0 * -inf := 0``."""
    with np.errstate(invalid="ignore"):
        return np.where(a == 0, 0.0, a * c)


class EmissionFamily:
    """Common machinery; subclasses fill in the family-specific parts."""

    name = "abstract"
    cell_ndim = 0
    has_gamma = True
    n_extra_features = 0

    @property
    def n_features(self) -> int:
        return 2 + self.n_extra_features

    # --- support and densities -------------------------------------------
    def in_support(self, y) -> np.ndarray:
        """True where y == 0 or y is a valid nonzero value."""
        y = np.asarray(y, dtype=float)
        return (y == 0) | self._nonzero_support(y)

    def _nonzero_support(self, y):
        raise NotImplementedError

    def log_f(self, y, gamma, sigma2=None):
        """Log density of the nonzero part at nonzero y (vectorised)."""
        raise NotImplementedError

    # --- feature decomposition --------------------------------------------
    def _extra_features(self, w):
        return []

    def features(self, net) -> np.ndarray:
        """``(T, K, N, N)`` feature tensor, zero on the diagonal and on
        pairs touching an absent node."""
        mask = net.pair_mask()
        w = np.where(mask, net.weights, 0.0)
        nz = (w != 0) & mask
        feats = [(mask & ~nz).astype(float), nz.astype(float)]
        feats += [np.where(nz, f, 0.0) for f in self._extra_features(w)]
        return np.stack(feats, axis=1)

    def _extra_coefficients(self, params, beta, gamma):
        return np.zeros((params.n_steps, 0) + beta.shape[1:]), np.zeros_like(beta)

    def coefficients(self, params) -> np.ndarray:
        """``(T, K, Q, Q)`` coefficients matching :meth:`features`."""
        beta = params.beta()
        gamma = params.gamma()
        with np.errstate(divide="ignore"):
            c0 = np.log1p(-beta)
            c1 = np.log(beta)
        extra, c1_shift = self._extra_coefficients(params, beta, gamma)
        c1 = c1 + c1_shift
        return np.concatenate([c0[:, None], c1[:, None], extra], axis=1)

    def emission_term(self, tab, A, marg) -> float:
        """Expected log density summed over present pairs (see
        :meth:`LogDensityTable.emission_term`)."""
        return 0.5 * float(_safe_mul(A, tab.coef).sum())

    # --- M-step -----------------------------------------------------------
    def mstep_gamma(self, A, prev):
        """Closed-form gamma update from ordered pair sums ``A``.

        Returns a dict with keys ``gamma_diag``, ``gamma_off``, ``sigma2``.
        """
        raise NotImplementedError

    def initial_gamma(self, A_total, n_groups, n_steps):
        """Global (one-group) estimate broadcast to every cell."""
        raise NotImplementedError

    def validate_params(self, params) -> None:
        pass

    def penalty(self, n_nodes, n_steps, n_groups, beta_structure="free") -> float:
        raise NotImplementedError

    # --- sampling ---------------------------------------------------------
    def sample_nonzero(self, u, gamma, sigma2=None):
        """Map uniforms ``u`` in (0, 1) to draws from F(., gamma)."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"name": self.name}


def _cells(A):
    """Split an ordered-sum table ``(T, ..., Q, Q)`` into pooled diagonal
    ``(Q, ...)`` and per-time upper triangle ``(T, P, ...)``; leading
    feature axes are moved behind the cell axes."""
    T = A.shape[0]
    q = A.shape[-1]
    iu, ju = pair_indices(q)
    idx = np.arange(q)
    diag = A[..., idx, idx].sum(axis=0)           # (..., Q)
    off = A[..., iu, ju]                          # (T, ..., P)
    diag = np.moveaxis(diag, -1, 0)               # (Q, ...)
    off = np.moveaxis(off, -1, 1)                 # (T, P, ...)
    return diag, off


@dataclass(frozen=True)
class Bernoulli(EmissionFamily):
    """Binary edges: F is the point mass at 1."""

    name = "bernoulli"
    has_gamma = False

    def _nonzero_support(self, y):
        return y == 1

    def log_f(self, y, gamma=None, sigma2=None):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(y == 1, 0.0, -np.inf)

    def mstep_gamma(self, A, prev):
        return {"gamma_diag": None, "gamma_off": None, "sigma2": None}

    def initial_gamma(self, A_total, n_groups, n_steps):
        return {"gamma_diag": None, "gamma_off": None, "sigma2": None}

    def validate_params(self, params):
        if params.gamma_diag is not None or params.gamma_off is not None:
            raise InvalidParams("bernoulli family takes no gamma")

    def penalty(self, n_nodes, n_steps, n_groups, beta_structure="free"):
        N, T, Q = n_nodes, n_steps, n_groups
        return (0.5 * Q * math.log(N * (N - 1) * T / 2)
                + 0.5 * (Q * (Q - 1) / 2) * T * math.log(N * (N - 1) / 2))

    def sample_nonzero(self, u, gamma=None, sigma2=None):
        return np.ones_like(np.asarray(u, dtype=float))


@dataclass(frozen=True)
class FiniteSpace(EmissionFamily):
    """Nonzero values fall in M disjoint bins ``(edges[m], edges[m+1]]``.

    ``values`` are the representative values emitted by the simulator
    (defaults to bin midpoints; an unbounded top bin uses its lower edge
    plus the width of the bin below).
    """

    edges: tuple = ()
    values: tuple = ()
    name = "finite"
    cell_ndim = 1

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if e.ndim != 1 or e.size < 3:
            raise InvalidParams("finite family needs M >= 2 bins (M + 1 edges)")
        if not np.all(np.diff(e) > 0):
            raise InvalidParams("bin edges must be strictly increasing (disjoint bins)")
        if e[0] < 0 or not np.isfinite(e[0]):
            raise InvalidParams("bins must exclude 0: lowest edge must be >= 0")
        object.__setattr__(self, "edges", tuple(float(x) for x in e))
        if not self.values:
            vals = []
            for m in range(e.size - 1):
                lo, hi = e[m], e[m + 1]
                if np.isfinite(hi):
                    vals.append(0.5 * (lo + hi))
                else:
                    width = lo - e[m - 1] if m > 0 else 1.0
                    vals.append(lo + width)
            object.__setattr__(self, "values", tuple(vals))
        else:
            v = np.asarray(self.values, dtype=float)
            if v.shape != (e.size - 1,) or np.any(self.bin_index(v) != np.arange(v.size)):
                raise InvalidParams("each representative value must fall in its own bin")
            object.__setattr__(self, "values", tuple(float(x) for x in v))

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    @property
    def n_extra_features(self):
        return self.n_bins

    @classmethod
    def from_values(cls, values):
        """Point-valued finite space ``{a_1, ..., a_M}`` with positive a_m."""
        v = np.sort(np.asarray(values, dtype=float))
        if np.any(v <= 0):
            raise InvalidParams("finite values must be positive")
        mids = 0.5 * (v[1:] + v[:-1])
        edges = np.concatenate([[0.0], mids, [np.inf]])
        return cls(tuple(edges), tuple(v))

    @classmethod
    def from_quantiles(cls, weights, n_bins=3):
        """Empirical-quantile bins of the nonzero weights (terciles by default)."""
        w = np.asarray(weights, dtype=float)
        w = w[w != 0]
        if w.size == 0 or np.any(w < 0):
            raise InvalidParams("quantile bins need positive nonzero weights")
        cuts = np.quantile(w, np.arange(1, n_bins) / n_bins)
        cuts = np.unique(cuts[(cuts > 0) & (cuts < w.max())])
        edges = np.concatenate([[0.0], cuts, [np.inf]])
        if edges.size < 3:
            raise InvalidParams("nonzero weights are too concentrated to form 2+ bins")
        return cls(tuple(edges))

    def bin_index(self, y):
        """Bin of each value, -1 when outside every bin."""
        y = np.asarray(y, dtype=float)
        e = np.asarray(self.edges)
        idx = np.searchsorted(e, y, side="left") - 1
        return np.where((idx >= 0) & (idx < self.n_bins), idx, -1)

    def _nonzero_support(self, y):
        return (y != 0) & (self.bin_index(y) >= 0)

    def log_f(self, y, gamma, sigma2=None):
        gamma = np.asarray(gamma, dtype=float)
        b = self.bin_index(y)
        g = np.take_along_axis(
            np.broadcast_to(gamma, np.broadcast_shapes(np.shape(b) + (1,), gamma.shape)),
            np.maximum(b, 0)[..., None], axis=-1)[..., 0]
        with np.errstate(divide="ignore"):
            return np.where(b >= 0, np.log(g), -np.inf)

    def _extra_features(self, w):
        b = self.bin_index(w)
        return [(b == m).astype(float) for m in range(self.n_bins)]

    def _extra_coefficients(self, params, beta, gamma):
        with np.errstate(divide="ignore"):
            lg = np.log(gamma)                      # (T, Q, Q, M)
        return np.moveaxis(lg, -1, 1), np.zeros_like(beta)

    def mstep_gamma(self, A, prev):
        counts = A[:, 2:]                           # (T, M, Q, Q)
        diag, off = _cells(counts)                  # (Q, M), (T, P, M)
        out_d = np.array(prev.gamma_diag, dtype=float, copy=True)
        out_o = np.array(prev.gamma_off, dtype=float, copy=True)
        sd = diag.sum(-1)
        ok = sd >= MASS_EPS
        out_d[ok] = diag[ok] / sd[ok, None]
        so = off.sum(-1)
        ok = so >= MASS_EPS
        out_o[ok] = off[ok] / so[ok][:, None]
        return {"gamma_diag": out_d, "gamma_off": out_o, "sigma2": None}

    def initial_gamma(self, A_total, n_groups, n_steps):
        c = A_total[2:].astype(float)
        g = c / c.sum() if c.sum() > 0 else np.full(self.n_bins, 1.0 / self.n_bins)
        # keep every bin reachable at the start
        g = (g + 1e-3) / (1 + 1e-3 * self.n_bins)
        return {"gamma_diag": np.tile(g, (n_groups, 1)),
                "gamma_off": np.tile(g, (n_steps, n_pairs(n_groups), 1)),
                "sigma2": None}

    def validate_params(self, params):
        q, T, M = params.n_groups, params.n_steps, self.n_bins
        if params.gamma_diag is None or params.gamma_diag.shape != (q, M) \
                or params.gamma_off.shape != (T, n_pairs(q), M):
            raise InvalidParams(f"finite gamma must have shapes ({q},{M}) and ({T},{n_pairs(q)},{M})")
        for g in (params.gamma_diag, params.gamma_off):
            if np.any(g < 0) or np.any(np.abs(g.sum(-1) - 1) > 1e-10):
                raise InvalidParams("finite gamma vectors must lie on the simplex")

    def penalty(self, n_nodes, n_steps, n_groups, beta_structure="free"):
        raise UnsupportedFamily(
            "no ICL criterion for the finite-space family; use the elbow method")

    def sample_nonzero(self, u, gamma, sigma2=None):
        gamma = np.asarray(gamma, dtype=float)
        cdf = np.cumsum(gamma, axis=-1)
        cdf[..., -1] = 1.0
        m = (np.asarray(u)[..., None] > cdf).sum(-1)
        return np.asarray(self.values)[np.minimum(m, self.n_bins - 1)]

    def to_dict(self):
        return {"name": self.name,
                "edges": [x if np.isfinite(x) else None for x in self.edges],
                "values": list(self.values)}


@dataclass(frozen=True)
class TruncatedPoisson(EmissionFamily):
    """Zero-truncated Poisson counts on {1, 2, ...}."""

    name = "poisson"
    n_extra_features = 2

    def _nonzero_support(self, y):
        return (y >= 1) & (np.floor(y) == y) & np.isfinite(y)

    def log_f(self, y, gamma, sigma2=None):
        y = np.asarray(y, dtype=float)
        gamma = np.asarray(gamma, dtype=float)
        return y * np.log(gamma) - special.gammaln(y + 1) - np.log(np.expm1(gamma))

    def _extra_features(self, w):
        return [w, special.gammaln(np.abs(w) + 1)]

    def _extra_coefficients(self, params, beta, gamma):
        extra = np.stack([np.log(gamma), -np.ones_like(gamma)], axis=1)
        return extra, -np.log(np.expm1(gamma))

    def _rate(self, mean):
        return psi_inverse(max(mean, psi(POISSON_RATE_FLOOR)))

    def mstep_gamma(self, A, prev):
        s1, s0 = A[:, 2], A[:, 1]
        d1, o1 = _cells(s1)
        d0, o0 = _cells(s0)
        out_d = np.array(prev.gamma_diag, dtype=float, copy=True)
        out_o = np.array(prev.gamma_off, dtype=float, copy=True)
        for q in range(d0.shape[0]):
            if d0[q] >= MASS_EPS:
                out_d[q] = self._rate(d1[q] / d0[q])
        for t, p in zip(*np.nonzero(o0 >= MASS_EPS)):
            out_o[t, p] = self._rate(o1[t, p] / o0[t, p])
        return {"gamma_diag": out_d, "gamma_off": out_o, "sigma2": None}

    def initial_gamma(self, A_total, n_groups, n_steps):
        rate = self._rate(A_total[2] / A_total[1]) if A_total[1] > 0 else 1.0
        return {"gamma_diag": np.full(n_groups, rate),
                "gamma_off": np.full((n_steps, n_pairs(n_groups)), rate),
                "sigma2": None}

    def validate_params(self, params):
        q, T = params.n_groups, params.n_steps
        if params.gamma_diag is None or params.gamma_diag.shape != (q,) \
                or params.gamma_off.shape != (T, n_pairs(q)):
            raise InvalidParams("poisson gamma has wrong shape")
        if np.any(params.gamma_diag <= 0) or np.any(params.gamma_off <= 0):
            raise InvalidParams("poisson rates must be > 0")

    def penalty(self, n_nodes, n_steps, n_groups, beta_structure="free"):
        N, T, Q = n_nodes, n_steps, n_groups
        if beta_structure == "free":
            n_diag, n_off = Q, Q * (Q - 1) / 2 * T
        elif beta_structure == "in_out_constant":
            n_diag, n_off = 2, 0
        else:
            raise ValueError(f"unknown beta_structure {beta_structure!r}")
        return (0.5 * (n_diag + Q) * math.log(N * (N - 1) * T / 2)
                + 0.5 * (n_off + Q * (Q - 1) / 2 * T) * math.log(N * (N - 1) / 2))

    def sample_nonzero(self, u, gamma, sigma2=None):
        gamma = np.asarray(gamma, dtype=float)
        p0 = np.exp(-gamma)
        x = stats.poisson.ppf(p0 + np.asarray(u) * (1 - p0), gamma)
        return np.maximum(x, 1.0)


@dataclass(frozen=True)
class GaussianHomoscedastic(EmissionFamily):
    """Gaussian values with per-cell mean and one variance per time step."""

    name = "gaussian"
    n_extra_features = 2

    def _nonzero_support(self, y):
        return np.isfinite(y) & (y != 0)

    def log_f(self, y, gamma, sigma2=None):
        y = np.asarray(y, dtype=float)
        return -0.5 * np.log(2 * np.pi * sigma2) - (y - gamma) ** 2 / (2 * sigma2)

    def _extra_features(self, w):
        return [w, w * w]

    def _extra_coefficients(self, params, beta, gamma):
        s2 = params.sigma2[:, None, None]
        extra = np.stack([gamma / s2, np.broadcast_to(-0.5 / s2, gamma.shape)], axis=1)
        shift = -0.5 * np.log(2 * np.pi * s2) - gamma ** 2 / (2 * s2)
        return extra, shift

    def emission_term(self, tab, A, marg) -> float:
        # expanding (y - mu)^2 into y^2 - 2 mu y + mu^2 cancels badly once
        # sigma^2 is near its floor, so the quadratic is summed centred
        params = tab.params
        beta = params.beta()
        with np.errstate(divide="ignore"):
            c = np.stack([np.log1p(-beta),
                          np.log(beta) - 0.5 * np.log(2 * np.pi * params.sigma2)[:, None, None]],
                         axis=1)
        total = 0.5 * float(_safe_mul(A[:, :2], c).sum())
        mu = params.gamma()
        nz = tab.features[:, 1] > 0
        w = tab.net.weights
        Q = mu.shape[-1]
        for t in range(w.shape[0]):
            if not nz[t].any():
                continue
            m = marg[t]
            rss = 0.0
            for q in range(Q):
                for l in range(Q):
                    d = np.where(nz[t], (w[t] - mu[t, q, l]) ** 2, 0.0)
                    rss += m[:, q] @ d @ m[:, l]
            total -= 0.5 * rss / (2 * params.sigma2[t])
        return total

    def mstep_gamma(self, A, prev, max_iter=500):
        # joint maximiser over (mu, sigma_t^2) by exact block coordinate ascent:
        # the pooled diagonal mean weights each time step by 1 / sigma_t^2
        s0, s1, s2 = A[:, 1], A[:, 2], A[:, 3]     # (T, Q, Q)
        T, Q = s0.shape[0], s0.shape[-1]
        iu, ju = pair_indices(Q)
        idx = np.arange(Q)
        d0, d1 = s0[:, idx, idx], s1[:, idx, idx]    # (T, Q)
        o0, o1 = s0[:, iu, ju], s1[:, iu, ju]        # (T, P)
        mu_d = np.array(prev.gamma_diag, dtype=float, copy=True)
        mu_o = np.array(prev.gamma_off, dtype=float, copy=True)
        var = np.array(prev.sigma2, dtype=float, copy=True)
        ok_o = o0 >= MASS_EPS
        mu_o[ok_o] = o1[ok_o] / o0[ok_o]
        tot = s0.sum(axis=(1, 2))
        ok_t = tot >= MASS_EPS
        for _ in range(max_iter):
            w = d0 / var[:, None]
            den = w.sum(0)
            ok_d = den >= MASS_EPS / max(var.max(), 1.0)
            new_d = mu_d.copy()
            new_d[ok_d] = (d1 / var[:, None]).sum(0)[ok_d] / den[ok_d]
            mu = expand_cells(new_d, mu_o, T)
            rss = (s2 - 2 * mu * s1 + mu * mu * s0).sum(axis=(1, 2))
            new_var = var.copy()
            new_var[ok_t] = np.maximum(rss[ok_t] / tot[ok_t], SIGMA2_FLOOR)
            done = (np.max(np.abs(new_d - mu_d), initial=0.0) <= 1e-14 * (1 + np.max(np.abs(new_d), initial=0.0))
                    and np.max(np.abs(new_var - var)) <= 1e-14 * (1 + var.max()))
            mu_d, var = new_d, new_var
            if done:
                break
        return {"gamma_diag": mu_d, "gamma_off": mu_o, "sigma2": var}

    def initial_gamma(self, A_total, n_groups, n_steps):
        n, s1, s2 = A_total[1], A_total[2], A_total[3]
        mean = s1 / n if n > 0 else 1.0
        var = max(s2 / n - mean * mean, SIGMA2_FLOOR) if n > 0 else 1.0
        return {"gamma_diag": np.full(n_groups, mean),
                "gamma_off": np.full((n_steps, n_pairs(n_groups)), mean),
                "sigma2": np.full(n_steps, var)}

    def validate_params(self, params):
        q, T = params.n_groups, params.n_steps
        if params.gamma_diag is None or params.gamma_diag.shape != (q,) \
                or params.gamma_off.shape != (T, n_pairs(q)):
            raise InvalidParams("gaussian means have wrong shape")
        if params.sigma2 is None or params.sigma2.shape != (T,) or np.any(params.sigma2 <= 0):
            raise InvalidParams("gaussian sigma2 must be > 0 for every time step")

    def penalty(self, n_nodes, n_steps, n_groups, beta_structure="free"):
        N, T, Q = n_nodes, n_steps, n_groups
        return (Q * math.log(N * (N - 1) * T / 2)
                + Q * (Q - 1) / 2 * T * math.log(N * (N - 1) / 2))

    def sample_nonzero(self, u, gamma, sigma2=None):
        return np.asarray(gamma) + np.sqrt(sigma2) * stats.norm.ppf(u)


FAMILY_NAMES = ("bernoulli", "finite", "poisson", "gaussian")


def family_from_dict(d: dict) -> EmissionFamily:
    name = d.get("name")
    if name == "bernoulli":
        return Bernoulli()
    if name == "poisson":
        return TruncatedPoisson()
    if name == "gaussian":
        return GaussianHomoscedastic()
    if name == "finite":
        edges = [np.inf if x is None else x for x in d["edges"]]
        return FiniteSpace(tuple(edges), tuple(d.get("values", ())))
    raise UnsupportedFamily(f"unknown family {name!r}")


def family_from_spec(spec: str, weights=None) -> EmissionFamily:
    """Parse ``bernoulli | poisson | gaussian | finite:M``.

    ``finite:M`` builds M empirical-quantile bins from ``weights``.
    """
    if spec == "bernoulli":
        return Bernoulli()
    if spec == "poisson":
        return TruncatedPoisson()
    if spec == "gaussian":
        return GaussianHomoscedastic()
    if spec.startswith("finite"):
        _, _, m = spec.partition(":")
        m = int(m) if m else 3
        if m < 2:
            raise UnsupportedFamily("finite family needs M >= 2")
        if weights is None:
            raise ValueError("finite:M needs data to place the bins")
        return FiniteSpace.from_quantiles(weights, m)
    raise UnsupportedFamily(f"unknown family {spec!r}")


def log_density(family: EmissionFamily, beta, gamma, y, sigma2=None):
    """``log[(1-beta) 1{y=0} + beta f(y, gamma) 1{y!=0}]`` (vectorised).

    For the Gaussian family pass the shared variance as ``sigma2`` (or give
    ``gamma`` as a ``(mu, sigma2)`` pair).
    """
    if isinstance(family, GaussianHomoscedastic) and sigma2 is None:
        gamma, sigma2 = gamma
    y = np.asarray(y, dtype=float)
    if not np.all(family.in_support(y)):
        bad = y[~family.in_support(y)] if y.ndim else y
        raise UnsupportedValue(f"value(s) {np.atleast_1d(bad)[:5]} outside the {family.name} support")
    beta = np.asarray(beta, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        zero = np.log1p(-beta)
        safe_y = np.where(y == 0, _placeholder(family), y)
        nonzero = np.log(beta) + family.log_f(safe_y, gamma, sigma2)
        out = np.where(y == 0, zero, nonzero)
    return out.item() if out.ndim == 0 else out


def _placeholder(family):
    if isinstance(family, FiniteSpace):
        return family.values[0]
    return 1.0


class LogDensityTable:
    """Closed-form evaluator of ``log phi^t_{ql}(Y^t_ij)`` for one network.

    Holds the data features (computed once per network) and the parameter
    coefficients (recomputed per parameter value).
    """

    def __init__(self, family: EmissionFamily, net, features=None):
        self.family = family
        self.net = net
        self.features = family.features(net) if features is None else features
        self.coef = None
        self.params = None
        self._coef_finite = None
        self._coef_neginf = None

    def with_params(self, params) -> "LogDensityTable":
        tab = LogDensityTable(self.family, self.net, self.features)
        tab.params = params
        c = self.family.coefficients(params)
        tab.coef = c
        tab._coef_neginf = np.isneginf(c)
        tab._coef_finite = np.where(np.isfinite(c), c, 0.0)
        return tab

    def neighbour_sums(self, marg_filled) -> np.ndarray:
        """``S[t, k, i, l] = sum_j g_k(Y^t_ij) tau_marg(t, j, l)``."""
        return np.matmul(self.features, marg_filled[:, None])

    def scores(self, marg_filled, S=None) -> np.ndarray:
        """``E[t, i, q] = sum_{j != i} sum_l tau_marg(t, j, l) log phi^t_{ql}(Y^t_ij)``."""
        if S is None:
            S = self.neighbour_sums(marg_filled)
        E = np.einsum("tkil,tkql->tiq", S, self._coef_finite)
        if self._coef_neginf.any():
            hit = np.einsum("tkil,tkql->tiq", (S > 0).astype(float),
                            self._coef_neginf.astype(float))
            E = np.where(hit > 0, -np.inf, E)
        return E

    @staticmethod
    def pair_sums(marg_filled, S) -> np.ndarray:
        """Ordered-pair feature sums ``A[t, k, q, l] = sum_{i != j} tau_iq tau_jl g_k``."""
        A = np.einsum("tiq,tkil->tkql", marg_filled, S)
        return 0.5 * (A + np.swapaxes(A, -1, -2))

    def emission_term(self, A, marg_filled) -> float:
        """``sum_t sum_{i<j} sum_{q,l} tau tau log phi`` from ordered sums."""
        return self.family.emission_term(self, A, marg_filled)

    def dense(self) -> np.ndarray:
        """Full ``(T, Q, Q, N, N)`` table (small problems only)."""
        return np.einsum("tkij,tkql->tqlij", self.features, self._coef_finite) + \
            np.where(np.einsum("tkij,tkql->tqlij", (self.features > 0).astype(float),
                               self._coef_neginf.astype(float)) > 0, -np.inf, 0.0)


def mstep_beta(A, prev_diag, prev_off):
    """Sparsity update from ordered pair sums (features 0/1 = zero/nonzero).

    Diagonal cells pool over time; cells with less than ``MASS_EPS``
    expected mass keep their previous value.
    """
    num = A[:, 1]
    den = A[:, 0] + A[:, 1]
    nd, no = _cells(num)
    dd, do = _cells(den)
    out_d = np.array(prev_diag, dtype=float, copy=True)
    out_o = np.array(prev_off, dtype=float, copy=True)
    ok = dd >= MASS_EPS
    out_d[ok] = nd[ok] / dd[ok]
    ok = do >= MASS_EPS
    out_o[ok] = no[ok] / do[ok]
    zd, zo = _cells(A[:, 0])
    return _interior(out_d, nd, zd), _interior(out_o, no, zo)


def _interior(beta, nonzero, zero):
    # num / den rounds to exactly 1 when the zero mass is below 1 ulp; keep
    # log(1 - beta) finite wherever that mass is positive
    beta = np.clip(beta, 0.0, 1.0)
    beta = np.where((zero > 0) & (beta >= 1.0), np.nextafter(1.0, 0.0), beta)
    return np.where((nonzero > 0) & (beta <= 0.0), np.finfo(float).tiny, beta)


def mstep_gamma(family: EmissionFamily, A, prev):
    return family.mstep_gamma(A, prev)


def icl_penalty(family: EmissionFamily, n_nodes, n_steps, n_groups,
                beta_structure="free") -> float:
    """Connectivity penalty ``pen(N, T, beta, gamma)`` of the ICL criterion.

    The transition term ``Q(Q-1)/2 log[N(T-1)]`` is added by the caller.
    """
    if n_nodes < 3 or n_steps < 1 or n_groups < 1:
        raise ValueError("icl_penalty needs N >= 3, T >= 1, Q >= 1")
    return family.penalty(n_nodes, n_steps, n_groups, beta_structure)
