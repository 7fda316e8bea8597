"""Choosing the number of groups: ICL, or the elbow of the complete-data
log-likelihood curve for finite-space emissions."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from dynsbm.emissions import EmissionFamily, FiniteSpace, icl_penalty
from dynsbm.errors import DegenerateFit, UnsupportedFamily
from dynsbm.vem import FitConfig, FitResult, fit

ELBOW_TOL = 1e-9


@dataclass
class QRecord:
    q: int
    complete_ll: float
    icl: float | None
    elbo: float
    converged: bool
    degenerate: bool
    fit: FitResult | None = field(default=None, repr=False)


@dataclass
class SelectionResult:
    records: list
    chosen_q: int
    method: str
    elbow: list
    elbow_suggestion: int | None = None
    no_elbow: bool = False

    def record(self, q) -> QRecord:
        return next(r for r in self.records if r.q == q)


def transition_penalty(n_nodes, n_steps, n_groups) -> float:
    if n_steps < 2 or n_groups < 2:
        return 0.0
    return 0.5 * n_groups * (n_groups - 1) * math.log(n_nodes * (n_steps - 1))


def icl_score(fit_result, family: EmissionFamily, n_nodes, n_steps, n_groups,
              beta_structure="free") -> float:
    """``complete_ll - Q(Q-1)/2 log[N(T-1)] - pen`` at the fit's MAP labels."""
    cll = fit_result if isinstance(fit_result, (int, float)) else fit_result.complete_ll
    pen = icl_penalty(family, n_nodes, n_steps, n_groups, beta_structure)
    return float(cll) - transition_penalty(n_nodes, n_steps, n_groups) - pen


def elbow_curve(qs, complete_ll, tol=ELBOW_TOL):
    """Suggested Q at the sharpest slope drop, and a "no elbow" flag.

    The suggestion maximises ``-(c[k+1] - 2 c[k] + c[k-1])`` over interior
    points; when that maximum is not positive (straight or convex curve) the
    flag is raised.
    """
    qs = list(qs)
    c = np.asarray(complete_ll, dtype=float)
    if len(qs) < 3:
        raise ValueError("the elbow method needs at least 3 values of Q")
    d2 = -(c[2:] - 2 * c[1:-1] + c[:-2])
    k = int(np.argmax(d2))
    return qs[k + 1], bool(d2[k] <= tol * max(1.0, np.abs(c).max()))


def select_q(net, q_range, family: EmissionFamily, config: FitConfig = FitConfig(),
             beta_structure="free", keep_fits=False) -> SelectionResult:
    """Fit every Q in ``q_range`` with the same seed and choose one.

    ICL picks the argmax (ties to the smaller Q); finite-space emissions fall
    back to the elbow method. A fit whose restarts are all degenerate is
    kept and annotated rather than raised.
    """
    qs = sorted(set(int(q) for q in q_range))
    if not qs:
        raise ValueError("q_range is empty")
    use_icl = not isinstance(family, FiniteSpace)
    cfg = replace(config, allow_degenerate=True, threads=1)

    def one(q):
        try:
            return fit(net, q, family, cfg)
        except DegenerateFit as exc:  # pragma: no cover - allow_degenerate is set
            return exc.result

    if config.threads > 1 and len(qs) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as ex:
            fits = list(ex.map(one, qs))
    else:
        fits = [one(q) for q in qs]

    records = []
    for q, f in zip(qs, fits):
        icl = icl_score(f, family, net.n_nodes, net.n_steps, q, beta_structure) if use_icl else None
        records.append(QRecord(q, f.complete_ll, icl, f.elbo, f.converged, f.degenerate,
                               f if keep_fits else None))
    elbow = [(r.q, r.complete_ll) for r in records]
    suggestion, flat = (None, False)
    if len(qs) >= 3:
        suggestion, flat = elbow_curve(qs, [r.complete_ll for r in records])
    if use_icl:
        best = max(records, key=lambda r: (r.icl, -r.q))
        return SelectionResult(records, best.q, "icl", elbow, suggestion, flat)
    if suggestion is None:
        if len(qs) == 1:
            return SelectionResult(records, qs[0], "elbow", elbow, None, True)
        raise UnsupportedFamily("finite-space selection needs at least 3 values of Q")
    return SelectionResult(records, suggestion, "elbow", elbow, suggestion, flat)
