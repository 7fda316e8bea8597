import itertools

import numpy as np
import pytest

from dynsbm import (
    ABSENT,
    Bernoulli,
    DegenerateFit,
    DynamicNetwork,
    FitConfig,
    GaussianHomoscedastic,
    ModelParams,
    TruncatedPoisson,
    complete_log_likelihood,
    compute_elbo,
    fit,
    kmeans_init,
    log_density,
    map_classification,
)
from dynsbm.emissions import LogDensityTable
from dynsbm.model_core import make_state
from dynsbm.oracle import (
    direct_elbo,
    direct_initial_row,
    direct_transition_row,
    exact_log_likelihood,
    exhaustive_hard_search,
    hard_state,
)
from dynsbm.simulation import simulate
from dynsbm.vem import (
    _run_restart,
    mstep_alpha,
    mstep_pi,
    ve_update_initial_tau,
    ve_update_transition_tau,
)

from conftest import random_instance, random_params


def _random_state(rng, N, T, Q, presence):
    init = rng.dirichlet(np.ones(Q), size=N)
    trans = rng.dirichlet(np.ones(Q), size=(max(T - 1, 0), N, Q))
    for t in range(1, T):
        re = presence[t] & ~presence[t - 1]
        trans[t - 1][re] = trans[t - 1][re, :1]
    return make_state(init, trans, presence)


def test_single_sweep_matches_product_formula(family, rng):
    params, net, _ = random_instance(family, rng, n_nodes=(4, 4), n_steps=(2, 2), p_present=1.0)
    state = _random_state(rng, 4, 2, 2, net.presence)
    tab = LogDensityTable(family, net).with_params(params)
    new = ve_update_transition_tau(state, params, tab, net.presence, n_sweeps=1)
    for i in range(4):
        for q in range(2):
            ref = direct_transition_row(params, state, net, 1, i, q)
            assert np.allclose(new.trans_tau[0, i, q], ref, atol=1e-12)
    new = ve_update_initial_tau(state, params, tab, net.presence, n_sweeps=1)
    for i in range(4):
        assert np.allclose(new.initial_tau[i], direct_initial_row(params, state, net, i), atol=1e-12)


def test_uninformative_densities_leave_prior_rows():
    N, T = 4, 3
    pi = np.array([[1 - 1e-9, 1e-9], [1e-9, 1 - 1e-9]])
    params = ModelParams.from_full(Bernoulli(), pi, np.full((2, 2), 0.3), n_steps=T)
    rng = np.random.default_rng(0)
    net = DynamicNetwork((rng.random((T, N, N)) < 0.3).astype(float) * 0)
    presence = net.presence
    state = _random_state(rng, N, T, 2, presence)
    tab = LogDensityTable(Bernoulli(), net).with_params(params)
    new = ve_update_transition_tau(state, params, tab, presence)
    assert np.allclose(new.trans_tau, np.broadcast_to(pi, new.trans_tau.shape))
    new = ve_update_initial_tau(state, params, tab, presence)
    assert np.allclose(new.initial_tau, params.alpha)


def test_single_group_is_trivial(rng):
    params, net, _ = random_instance(Bernoulli(), rng, n_nodes=(5, 5), n_steps=(3, 3), n_groups=1)
    res = fit(net, 1, Bernoulli())
    assert len(res.elbo_trace) <= 3 and res.converged
    mask = np.triu(net.pair_mask(), 1)
    # one-group MLE of a time-constant diagonal: pooled edge density
    assert res.params.beta_diag[0] == pytest.approx((net.weights[mask] != 0).mean())
    assert res.elbo == pytest.approx(exact_log_likelihood(res.params, net), abs=1e-9)


def test_elbo_matches_direct_sum(family, rng):
    for _ in range(3):
        params, net, _ = random_instance(family, rng)
        state = _random_state(rng, net.n_nodes, net.n_steps, 2, net.presence)
        assert compute_elbo(params, state, net) == pytest.approx(direct_elbo(params, state, net),
                                                                 rel=1e-12, abs=1e-10)


def test_elbo_at_hard_labels_is_complete_loglik(family, rng):
    params, net, z = random_instance(family, rng)
    state = hard_state(z, 2, net.presence)
    assert compute_elbo(params, state, net) == pytest.approx(
        complete_log_likelihood(params, z, net), rel=1e-12, abs=1e-10)


def test_elbo_below_exact_loglik(rng):
    fam = Bernoulli()
    params = random_params(fam, 2, 3, rng)
    from dynsbm.simulation import simulate
    net, _ = simulate(params, 4, 3, seed=5)
    exact = exact_log_likelihood(params, net)          # 2^12 configurations
    for _ in range(200):
        state = _random_state(rng, 4, 3, 2, net.presence)
        assert compute_elbo(params, state, net) <= exact + 1e-9


def test_complete_loglik_by_hand():
    w = np.zeros((2, 3, 3))
    w[0, 0, 1] = w[0, 1, 0] = 1
    w[1, 1, 2] = w[1, 2, 1] = 1
    presence = np.array([[1, 1, 1], [1, 1, 0]], bool)
    net = DynamicNetwork(w * np.array([1, 1, 1])[None, None], presence)
    w[1, 1, 2] = w[1, 2, 1] = 0
    net = DynamicNetwork(w, presence)
    pi = np.array([[0.8, 0.2], [0.3, 0.7]])
    beta = np.array([[0.6, 0.2], [0.2, 0.4]])
    params = ModelParams.from_full(Bernoulli(), pi, beta, n_steps=2, alpha=[0.4, 0.6])
    z = np.array([[0, 0, 1], [0, 1, ABSENT]])
    ref = (np.log(0.4) * 2 + np.log(0.6)            # entries
           + np.log(0.8) + np.log(0.2)              # node 0: 0->0, node 1: 0->1
           + np.log(0.6) + np.log(0.8) * 2          # t=1: (0,1) edge, (0,2) and (1,2) none
           + np.log(0.8))                           # t=2: (0,1) in cell (0,1), no edge
    assert complete_log_likelihood(params, z, net) == pytest.approx(ref, abs=1e-12)


def test_node_absent_everywhere_contributes_nothing(rng):
    params, net, z = random_instance(Bernoulli(), rng, n_nodes=(4, 4), n_steps=(2, 2), p_present=1)
    pres = np.array(net.presence)
    pres[:, 3] = False
    w = np.array(net.weights)
    w[:, 3, :] = w[:, :, 3] = 0
    z2 = z.copy()
    z2[:, 3] = ABSENT
    smaller = DynamicNetwork(w[:, :3, :3])
    assert complete_log_likelihood(params, z2, DynamicNetwork(w, pres)) == pytest.approx(
        complete_log_likelihood(params, z[:, :3], smaller))


def test_mstep_pi_counts_transitions():
    # 5 nodes, T = 3, hard paths
    z = np.array([[0, 0, 1, 1, 0], [0, 1, 1, 0, 0], [1, 1, 1, 0, 0]])
    presence = np.ones((3, 5), bool)
    state = hard_state(z, 2, presence)
    counts = np.zeros((2, 2))
    for t in range(1, 3):
        for i in range(5):
            counts[z[t - 1, i], z[t, i]] += 1
    assert np.allclose(mstep_pi(state, presence), counts / counts.sum(1, keepdims=True))
    assert np.allclose(mstep_alpha(state, presence), np.bincount(z.ravel()) / 15)


def test_mstep_pi_single_node_fallback():
    z = np.array([[0], [1], [1]])
    state = hard_state(z, 2, np.ones((3, 1), bool))
    pi = mstep_pi(state, np.ones((3, 1), bool))
    assert np.allclose(pi, [[0, 1], [0, 1]])


def test_mstep_pi_unvisited_row_is_uniform():
    z = np.array([[0], [0]])
    pi = mstep_pi(hard_state(z, 2, np.ones((2, 1), bool)), np.ones((2, 1), bool))
    assert np.allclose(pi, [[1, 0], [0.5, 0.5]])


def test_mstep_uniform_tau_gives_uniform_pi():
    presence = np.ones((3, 4), bool)
    state = make_state(np.full((4, 2), 0.5), np.full((2, 4, 2, 2), 0.5), presence)
    assert np.allclose(mstep_pi(state, presence), 0.5)


def test_map_marginal_ties_and_hard():
    presence = np.ones((1, 2), bool)
    state = make_state(np.array([[0.5, 0.5], [0.2, 0.8]]), np.zeros((0, 2, 2, 2)), presence)
    assert list(map_classification(state)[0]) == [0, 1]
    z = np.array([[0, 1], [1, 1], [0, ABSENT]])
    pres = z != ABSENT
    s = hard_state(z, 2, pres)
    for mode in ("marginal_argmax", "viterbi"):
        assert np.array_equal(map_classification(s, mode, pres), z)


def test_viterbi_matches_path_enumeration():
    rng = np.random.default_rng(7)
    Q, T = 3, 3
    for _ in range(20):
        init = rng.dirichlet(np.ones(Q), size=1)
        trans = rng.dirichlet(np.ones(Q), size=(T - 1, 1, Q))
        presence = np.ones((T, 1), bool)
        s = make_state(init, trans, presence)
        best = max(itertools.product(range(Q), repeat=T),
                   key=lambda p: init[0, p[0]] * trans[0, 0, p[0], p[1]] * trans[1, 0, p[1], p[2]])
        assert tuple(map_classification(s, "viterbi", presence)[:, 0]) == best


def test_fit_trace_monotone_and_state_valid(family, rng):
    for _ in range(3):
        _, net, _ = random_instance(family, rng, n_nodes=(5, 8), n_steps=(2, 4))
        res = fit(net, 2, family, FitConfig(seed=1, n_restarts=2, allow_degenerate=True))
        assert np.all(np.diff(res.elbo_trace) >= -1e-9)
        res.state.check(net.presence)
        assert np.all((res.map_labels == ABSENT) == ~net.presence)
        assert res.params.beta_diag.shape == (2,)         # one slot per group, all t


def _tiny_instances(rng, n=5):
    for k in range(n):
        params = random_params(Bernoulli(), 2, 2, rng)
        net, _ = simulate(params, 5, 2, seed=k)
        yield k, net, exhaustive_hard_search(net, 2, Bernoulli())


def test_fit_reaches_exhaustive_hard_optimum(rng):
    """N=5, T=2, Q=2: the fitted J should be within 1e-6 of the best hard
    labelling. Known shortfall, see the decisions ledger: the time-constant
    k-means start and the fixed-point VE updates stop short on most of these
    instances, so this stays red rather than being loosened."""
    gaps = []
    for k, net, best in _tiny_instances(rng):
        res = fit(net, 2, Bernoulli(), FitConfig(seed=k, allow_degenerate=True, elbo_rel_tol=1e-10))
        gaps.append(res.elbo - best.elbo)
    assert min(gaps) >= -1e-6, f"J_fit - J_hard per instance: {np.round(gaps, 4).tolist()}"


def test_vem_from_hard_optimum_never_falls_below_it(rng):
    # the ascent half of the claim: started (almost) at the best hard
    # labelling, the guarded iteration can only improve on it
    eps = 1e-6
    for k, net, best in _tiny_instances(rng):
        h = hard_state(best.labels, 2, net.presence)
        state = make_state(h.initial_tau * (1 - 2 * eps) + eps,
                           h.trans_tau * (1 - 2 * eps) + eps, net.presence)
        cfg = FitConfig(seed=k, elbo_rel_tol=1e-10)
        _, _, trace, _, _ = _run_restart(net, Bernoulli(), 2, state, 0, cfg,
                                         Bernoulli().features(net))
        assert trace[-1] >= best.elbo - 1e-4 * abs(best.elbo)
        assert np.all(np.diff(trace) >= -1e-9)


def test_fit_is_deterministic_across_threads(rng):
    _, net, _ = random_instance(TruncatedPoisson(), rng, n_nodes=(12, 12), n_steps=(3, 3))
    a = fit(net, 2, TruncatedPoisson(), FitConfig(seed=3, threads=1, allow_degenerate=True))
    b = fit(net, 2, TruncatedPoisson(), FitConfig(seed=3, threads=4, allow_degenerate=True))
    assert a.elbo_trace == b.elbo_trace
    assert np.array_equal(a.params.beta_off, b.params.beta_off)


def test_degenerate_fit_raises_with_result():
    net = DynamicNetwork(np.zeros((2, 4, 4)))
    with pytest.raises(DegenerateFit) as info:
        fit(net, 3, Bernoulli(), FitConfig(n_restarts=2))
    assert info.value.result is not None and info.value.result.degenerate
    res = fit(net, 3, Bernoulli(), FitConfig(n_restarts=2, allow_degenerate=True))
    assert res.degenerate


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(elbo_rel_tol=0)
    with pytest.raises(ValueError):
        FitConfig(fp_inner_iters=0)
    with pytest.raises(ValueError):
        FitConfig(map_mode="mode")


def test_gaussian_fit_recovers_means():
    from dynsbm.simulation import simulate
    mu = np.array([[4.0, -1.0], [-1.0, 1.0]])
    params = ModelParams.from_full(GaussianHomoscedastic(), [[0.9, 0.1], [0.1, 0.9]],
                                   np.full((2, 2), 0.6), mu, 0.25, n_steps=3)
    net, z = simulate(params, 40, 3, seed=2)
    res = fit(net, 2, GaussianHomoscedastic(), FitConfig(seed=0))
    got = np.sort(res.params.gamma_diag)
    assert np.allclose(got, [1.0, 4.0], atol=0.1)
    assert np.allclose(res.params.sigma2, 0.25, rtol=0.2)
