"""Sampling from the dynamic SBM and the benchmark scenario presets.

Random streams are keyed by position: one stream per node for the label
chain and one per (t, i) for the edges ``j > i`` in increasing order. Adding
nodes or time steps therefore appends draws without changing earlier ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dynsbm.emissions import Bernoulli, EmissionFamily
from dynsbm.errors import UnknownPreset
from dynsbm.model_core import ABSENT, DynamicNetwork, ModelParams

_LABEL_STREAM, _EDGE_STREAM, _PRESENCE_STREAM, _PRESET_STREAM = 0, 1, 2, 3

BETA_PRESETS = {
    # (beta_11, beta_12, beta_22)
    "low-": (0.2, 0.1, 0.15),
    "low+": (0.25, 0.1, 0.2),
    "medium-": (0.3, 0.1, 0.2),
    "medium+": (0.4, 0.1, 0.2),
    "affiliation": (0.3, 0.1, 0.3),
}

PI_PRESETS = {
    "pi_low": ((0.6, 0.4), (0.4, 0.6)),
    "pi_medium": ((0.75, 0.25), (0.25, 0.75)),
    "pi_high": ((0.9, 0.1), (0.1, 0.9)),
}

DEFAULT_N, DEFAULT_T = 100, 5


def presence_schedule(kind, n_nodes, n_steps, seed=0, p=None, mask=None) -> np.ndarray:
    """``(T, N)`` presence mask.

    ``kind`` is ``"full"``, ``"bernoulli"`` (each node-time present with
    probability ``p``, one stream per node) or ``"explicit"`` (``mask``).
    """
    if kind == "full":
        return np.ones((n_steps, n_nodes), dtype=bool)
    if kind == "bernoulli":
        if p is None or not 0 <= p <= 1:
            raise ValueError("bernoulli presence needs p in [0, 1]")
        out = np.empty((n_steps, n_nodes), dtype=bool)
        for i in range(n_nodes):
            rng = np.random.default_rng(np.random.SeedSequence([seed, _PRESENCE_STREAM, i]))
            out[:, i] = rng.random(n_steps) < p
        return out
    if kind == "explicit":
        m = np.asarray(mask, dtype=bool)
        if m.shape != (n_steps, n_nodes):
            raise ValueError(f"presence mask must have shape {(n_steps, n_nodes)}")
        return m.copy()
    raise ValueError(f"unknown presence schedule {kind!r}")


def _labels(params, presence, seed):
    T, N = presence.shape
    Q = params.n_groups
    cum_a = np.cumsum(params.alpha)
    cum_pi = np.cumsum(params.pi, axis=1)
    z = np.full((T, N), ABSENT, dtype=int)
    for i in range(N):
        rng = np.random.default_rng(np.random.SeedSequence([seed, _LABEL_STREAM, i]))
        u = rng.random(T)
        for t in range(T):
            if not presence[t, i]:
                continue
            cdf = cum_a if t == 0 or z[t - 1, i] == ABSENT else cum_pi[z[t - 1, i]]
            z[t, i] = min(int(np.searchsorted(cdf, u[t], side="right")), Q - 1)
    return z


def simulate(params: ModelParams, n_nodes: int, n_steps: int | None = None, seed: int = 0,
             presence=None):
    """Draw ``(DynamicNetwork, labels)``; labels are ``ABSENT`` off the mask.

    A node entering (at t=0 or after an absence) draws its group from
    ``alpha``; otherwise it follows its row of ``pi``.
    """
    params.validate()
    T = params.n_steps if n_steps is None else n_steps
    if T != params.n_steps:
        raise ValueError(f"params cover {params.n_steps} time steps, asked for {T}")
    N = n_nodes
    presence = np.ones((T, N), dtype=bool) if presence is None \
        else np.asarray(presence, dtype=bool)
    if presence.shape != (T, N):
        raise ValueError(f"presence must have shape {(T, N)}")
    z = _labels(params, presence, seed)
    fam = params.family
    beta, gamma = params.beta(), params.gamma()
    w = np.zeros((T, N, N))
    for t in range(T):
        s2 = None if params.sigma2 is None else params.sigma2[t]
        for i in range(N - 1):
            rng = np.random.default_rng(np.random.SeedSequence([seed, _EDGE_STREAM, t, i]))
            u = rng.random((N - 1 - i, 2))
            if not presence[t, i]:
                continue
            j = np.arange(i + 1, N)
            ok = presence[t, j]
            j, u = j[ok], u[ok]
            zi, zj = z[t, i], z[t, j]
            edge = u[:, 0] < beta[t, zi, zj]
            if not edge.any():
                continue
            je, ue = j[edge], u[edge, 1]
            g = None if gamma is None else gamma[t, zi, z[t, je]]
            vals = fam.sample_nonzero(np.clip(ue, 1e-300, 1 - 1e-16), g, s2)
            w[t, i, je] = vals
            w[t, je, i] = vals
    return DynamicNetwork(w, presence), z


@dataclass(frozen=True)
class ScenarioPreset:
    name: str
    pi: np.ndarray
    beta: np.ndarray
    family: EmissionFamily
    n_nodes: int = DEFAULT_N
    n_steps: int = DEFAULT_T
    gamma: np.ndarray | None = None
    sigma2: np.ndarray | None = None
    presence: str = "full"
    presence_p: float | None = None

    def params(self, n_steps: int | None = None) -> ModelParams:
        T = self.n_steps if n_steps is None else n_steps
        return ModelParams.from_full(self.family, self.pi, self.beta, self.gamma,
                                     self.sigma2, n_steps=T)

    def presence_mask(self, n_nodes=None, n_steps=None, seed=0):
        N = self.n_nodes if n_nodes is None else n_nodes
        T = self.n_steps if n_steps is None else n_steps
        return presence_schedule(self.presence, N, T, seed, self.presence_p)

    def simulate(self, seed=0, n_nodes=None, n_steps=None):
        N = self.n_nodes if n_nodes is None else n_nodes
        T = self.n_steps if n_steps is None else n_steps
        return simulate(self.params(T), N, T, seed, self.presence_mask(N, T, seed))


def _canonical(name: str) -> str:
    return name.strip().replace("−", "-").lower()


def _beta2(b11, b12, b22):
    return np.array([[b11, b12], [b12, b22]])


def _icl_q4(seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, _PRESET_STREAM]))
    Q = 4
    eps = rng.uniform(-1, 1, size=(Q, Q))
    eps = np.triu(eps) + np.triu(eps, 1).T
    beta = np.where(np.eye(Q, dtype=bool), 0.4, 0.1) + 0.1 * eps
    pi = np.full((Q, Q), 0.03)
    np.fill_diagonal(pi, 0.91)
    return pi, beta


def preset_scenario(name: str, seed: int = 0, n_nodes: int | None = None,
                    n_steps: int | None = None) -> ScenarioPreset:
    """Benchmark presets (Bernoulli emissions).

    ``name`` is a sparsity preset (``low-``, ``low+``, ``medium-``,
    ``medium+``, ``affiliation``), a stability preset (``pi_low``,
    ``pi_medium``, ``pi_high``), a combination ``"medium+/pi_high"`` or
    ``icl_q4``. A missing half defaults to ``pi_high`` or ``medium+``.
    ``seed`` only matters for ``icl_q4``, whose connectivity perturbations
    are drawn from it.
    """
    key = _canonical(name)
    N = DEFAULT_N if n_nodes is None else n_nodes
    T = DEFAULT_T if n_steps is None else n_steps
    if key == "icl_q4":
        pi, beta = _icl_q4(seed)
        return ScenarioPreset(name=key, pi=pi, beta=beta, family=Bernoulli(),
                              n_nodes=N, n_steps=T)
    parts = [p for p in key.replace(",", "/").split("/") if p]
    b_name = p_name = None
    for p in parts:
        if p in BETA_PRESETS and b_name is None:
            b_name = p
        elif (p in PI_PRESETS or "pi_" + p in PI_PRESETS) and p_name is None:
            p_name = p if p in PI_PRESETS else "pi_" + p
        else:
            raise UnknownPreset(f"unknown preset {name!r}; known: "
                                f"{sorted(BETA_PRESETS)} x {sorted(PI_PRESETS)} and icl_q4")
    if not parts or (b_name is None and p_name is None):
        raise UnknownPreset(f"unknown preset {name!r}")
    b_name = b_name or "medium+"
    p_name = p_name or "pi_high"
    return ScenarioPreset(name=f"{b_name}/{p_name}", pi=np.array(PI_PRESETS[p_name]),
                          beta=_beta2(*BETA_PRESETS[b_name]), family=Bernoulli(),
                          n_nodes=N, n_steps=T)
