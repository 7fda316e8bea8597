import math

import numpy as np
import pytest
from scipy import stats

from dynsbm import (
    Bernoulli,
    DomainError,
    DynamicNetwork,
    FiniteSpace,
    GaussianHomoscedastic,
    TruncatedPoisson,
    UnsupportedFamily,
    UnsupportedValue,
    icl_penalty,
    log_density,
    psi,
    psi_inverse,
)
from dynsbm.emissions import LogDensityTable, family_from_dict, family_from_spec
from dynsbm.oracle import hard_state
from dynsbm.vem import initial_guess, mstep

from conftest import FAMILIES, random_instance


def test_bernoulli_density():
    assert log_density(Bernoulli(), 0.3, None, 0) == pytest.approx(math.log(0.7))
    assert log_density(Bernoulli(), 0.3, None, 1) == pytest.approx(math.log(0.3))
    assert log_density(Bernoulli(), 1.0, None, 0) == -math.inf


def test_poisson_density_against_formula_and_scipy():
    expected = math.log(2**3 / math.factorial(3) / (math.e**2 - 1))
    assert log_density(TruncatedPoisson(), 1.0, 2.0, 3) == pytest.approx(expected, abs=1e-13)
    y = np.arange(1, 15)
    via_scipy = stats.poisson.logpmf(y, 2.0) - np.log1p(-np.exp(-2.0)) + np.log(0.4)
    assert np.allclose(log_density(TruncatedPoisson(), 0.4, 2.0, y), via_scipy, atol=1e-12)


def test_gaussian_density_against_scipy():
    y = np.array([-2.0, 0.5, 3.0])
    got = log_density(GaussianHomoscedastic(), 0.6, 1.0, y, sigma2=2.0)
    assert np.allclose(got, np.log(0.6) + stats.norm.logpdf(y, 1.0, math.sqrt(2.0)))
    assert log_density(GaussianHomoscedastic(), 0.6, (1.0, 2.0), 0.0) == pytest.approx(math.log(0.4))


@pytest.mark.parametrize("family, y", [
    (TruncatedPoisson(), 0.5), (Bernoulli(), 2.0), (FiniteSpace((0.0, 1.0, 2.0)), 3.0),
])
def test_out_of_support_raises(family, y):
    with pytest.raises(UnsupportedValue):
        log_density(family, 0.5, np.array([0.5, 0.5]) if family.name == "finite" else 1.0, y)


def test_truncated_poisson_mass_sums_to_one():
    for lam in (0.3, 2.0, 9.0):
        y = np.arange(1, 200)
        assert np.exp(log_density(TruncatedPoisson(), 1.0, lam, y)).sum() == pytest.approx(1, abs=1e-8)


def test_finite_masses_sum_to_one():
    fam = FiniteSpace((0.0, 1.0, 2.0, np.inf))
    g = np.array([0.2, 0.5, 0.3])
    ys = np.array(fam.values)
    assert np.exp(log_density(fam, 1.0, g, ys)).sum() == pytest.approx(1.0)
    assert fam.values == (0.5, 1.5, 3.0)


def test_finite_bins_are_half_open():
    fam = FiniteSpace((0.0, 1.0, 2.0))
    assert list(fam.bin_index([0.5, 1.0, 1.0000001, 2.0, 2.5])) == [0, 0, 1, 1, -1]


def test_psi_values_and_domain():
    assert psi(1.0) == pytest.approx(math.e / (math.e - 1), abs=1e-15)
    assert psi_inverse(psi(2.5)) == pytest.approx(2.5, abs=1e-10)
    with pytest.raises(DomainError):
        psi_inverse(1.0)
    with pytest.raises(DomainError):
        psi(0.0)


def test_psi_inverse_tends_to_zero_near_one():
    xs = [psi_inverse(1 + 10.0**-k) for k in range(1, 9)]
    assert all(a > b for a, b in zip(xs, xs[1:]))
    assert xs[-1] < 1e-6


def test_psi_strictly_increasing_on_grid():
    x = np.linspace(1e-6, 30, 10_000)
    assert np.all(np.diff(psi(x)) > 0)


def test_icl_penalty_bernoulli_formula():
    expected = 0.5 * 2 * math.log(24750) + 0.5 * 1 * 5 * math.log(4950)
    assert icl_penalty(Bernoulli(), 100, 5, 2) == pytest.approx(expected, rel=1e-15)


def test_icl_penalty_gaussian_single_group():
    N, T = 20, 3
    assert icl_penalty(GaussianHomoscedastic(), N, T, 1) == pytest.approx(math.log(N * (N - 1) * T / 2))


def test_icl_penalty_poisson_variants():
    N, T, Q = 30, 4, 3
    a, b = math.log(N * (N - 1) * T / 2), math.log(N * (N - 1) / 2)
    free = 0.5 * (Q + Q) * a + 0.5 * (3 * T + 3 * T) * b
    const = 0.5 * (2 + Q) * a + 0.5 * (3 * T) * b
    assert icl_penalty(TruncatedPoisson(), N, T, Q) == pytest.approx(free)
    assert icl_penalty(TruncatedPoisson(), N, T, Q, "in_out_constant") == pytest.approx(const)


def test_icl_penalty_finite_unsupported():
    with pytest.raises(UnsupportedFamily):
        icl_penalty(FiniteSpace((0.0, 1.0, 2.0)), 10, 2, 2)


@pytest.mark.parametrize("name", ["bernoulli", "poisson", "gaussian"])
def test_icl_penalty_increasing_in_q(name):
    vals = [icl_penalty(FAMILIES[name], 50, 5, q) for q in range(1, 11)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


# --- M-step closed forms on hand-built cells ------------------------------

def _two_group_net(values_in_cell, family, n_steps=1):
    """Group 0 = nodes 0..k, group 1 = one extra node with no edges. The
    within-group-0 pairs carry ``values_in_cell`` (zeros elsewhere)."""
    k = 1
    while k * (k - 1) // 2 < len(values_in_cell):
        k += 1
    N = k + 1
    w = np.zeros((n_steps, N, N))
    iu, ju = np.triu_indices(k, 1)
    for p, v in enumerate(values_in_cell):
        w[:, iu[p], ju[p]] = w[:, ju[p], iu[p]] = v
    labels = np.zeros((n_steps, N), int)
    labels[:, -1] = 1
    net = DynamicNetwork(w)
    state = hard_state(labels, 2, net.presence)
    tab = LogDensityTable(family, net)
    return mstep(state, initial_guess(family, tab, 2), tab, net.presence)


def test_mstep_finite_counts():
    fam = FiniteSpace.from_values([1.0, 2.0, 3.0])
    p = _two_group_net([1] * 2 + [2] * 5 + [3] * 3, fam)
    assert np.allclose(p.gamma_diag[0], [0.2, 0.5, 0.3])


def test_mstep_poisson_psi_inverse():
    p = _two_group_net([2, 2, 4, 4, 2, 2, 4, 4, 2, 4], TruncatedPoisson())
    assert p.gamma_diag[0] == pytest.approx(psi_inverse(3.0), abs=1e-14)
    assert psi(p.gamma_diag[0]) == pytest.approx(3.0, abs=1e-12)
    assert p.beta_diag[0] == 1.0


def test_mstep_gaussian_constant_cell():
    p = _two_group_net([2.5] * 6, GaussianHomoscedastic())
    assert p.gamma_diag[0] == pytest.approx(2.5)
    # the only nonzero cell has zero residuals, so the variance hits its floor
    assert p.sigma2[0] == pytest.approx(1e-8)


def test_mstep_beta_extremes():
    p = _two_group_net([1.0] * 6, Bernoulli())
    assert p.beta_diag[0] == 1.0
    assert p.beta_off[0, 0] == 0.0       # no edges towards the lone node


def test_mstep_beta_soft_matches_brute_force(rng):
    params, net, _ = random_instance(Bernoulli(), rng, n_nodes=(4, 4), n_steps=(2, 2))
    from dynsbm import kmeans_init
    state = kmeans_init(net, 2, seed=1)
    tab = LogDensityTable(Bernoulli(), net)
    p = mstep(state, params, tab, net.presence)
    m = state.marg_filled()
    num = den = 0.0
    for t in range(2):
        for i in range(4):
            for j in range(4):
                if i != j and net.presence[t, i] and net.presence[t, j]:
                    w = m[t, i, 0] * m[t, j, 0]
                    den += w
                    num += w * (net.weights[t, i, j] != 0)
    assert p.beta_diag[0] == pytest.approx(num / den, rel=1e-12)


def test_features_reproduce_log_density(family, rng):
    """Dual route: feature x coefficient decomposition vs direct density."""
    params, net, _ = random_instance(family, rng, n_nodes=(5, 5), n_steps=(2, 3))
    dense = LogDensityTable(family, net).with_params(params).dense()
    beta, gamma = params.beta(), params.gamma()
    for t in range(net.n_steps):
        for i in range(net.n_nodes):
            for j in range(net.n_nodes):
                if i == j or not (net.presence[t, i] and net.presence[t, j]):
                    assert np.all(dense[t, :, :, i, j] == 0)
                    continue
                for q in range(2):
                    for l in range(2):
                        g = None if gamma is None else gamma[t, q, l]
                        s2 = None if params.sigma2 is None else params.sigma2[t]
                        ref = log_density(family, beta[t, q, l], g, net.weights[t, i, j], sigma2=s2)
                        assert dense[t, q, l, i, j] == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_family_spec_parsing():
    assert family_from_spec("bernoulli") == Bernoulli()
    fam = family_from_spec("finite:3", np.array([1.0, 2, 3, 4, 5, 6, 7, 8, 9]))
    assert fam.n_bins == 3 and fam.edges[-1] == np.inf
    assert family_from_dict(fam.to_dict()) == fam
    with pytest.raises(UnsupportedFamily):
        family_from_spec("negbin")
