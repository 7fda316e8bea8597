import numpy as np
import pytest

from dynsbm import Bernoulli, FiniteSpace, GaussianHomoscedastic, ModelParams, TruncatedPoisson
from dynsbm.simulation import simulate

FAMILIES = {
    "bernoulli": Bernoulli(),
    "poisson": TruncatedPoisson(),
    "gaussian": GaussianHomoscedastic(),
    "finite": FiniteSpace.from_values([1.0, 2.0, 3.0]),
}


def _sym(a):
    return 0.5 * (a + np.swapaxes(a, 0, 1))


def random_params(family, n_groups, n_steps, rng, time_varying=True) -> ModelParams:
    """Random valid parameters; off-diagonal cells vary with t when asked."""
    Q, T = n_groups, n_steps
    pi = rng.dirichlet(np.full(Q, 2.0), size=Q)

    def cells(draw):
        base = _sym(draw())
        full = np.broadcast_to(base, (T,) + base.shape).copy()
        if time_varying:
            for t in range(1, T):
                other = _sym(draw())
                idx = np.arange(Q)
                other[idx, idx] = base[idx, idx]
                full[t] = other
        return full

    beta = cells(lambda: rng.uniform(0.15, 0.85, (Q, Q)))
    gamma = sigma2 = None
    if family.name == "poisson":
        gamma = cells(lambda: rng.uniform(0.4, 4.0, (Q, Q)))
    elif family.name == "gaussian":
        gamma = cells(lambda: rng.normal(0.0, 2.0, (Q, Q)))
        sigma2 = rng.uniform(0.3, 2.0, T)
    elif family.name == "finite":
        gamma = cells(lambda: rng.dirichlet(np.ones(family.n_bins), size=(Q, Q)))
    return ModelParams.from_full(family, pi, beta, gamma, sigma2)


def random_instance(family, rng, n_nodes=(3, 5), n_steps=(1, 3), n_groups=2, p_present=0.85):
    """Small simulated network with random presence."""
    N = int(rng.integers(n_nodes[0], n_nodes[1] + 1))
    T = int(rng.integers(n_steps[0], n_steps[1] + 1))
    params = random_params(family, n_groups, T, rng)
    presence = rng.random((T, N)) < p_present
    net, z = simulate(params, N, T, int(rng.integers(1 << 30)), presence)
    return params, net, z


@pytest.fixture(params=sorted(FAMILIES))
def family(request):
    return FAMILIES[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
