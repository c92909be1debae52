import math

import numpy as np
import pytest
from scipy import integrate, stats

import checks
from conftest import make_panel
from multirel.model import HyperParams, ModelError, NumericalError, Partition, \
    canonical_labels, joint_logprob, path_logprob
from multirel.samplers import (
    GAMMA_HYPER_BOUNDS,
    Algo8Config,
    ChainState,
    SliceConfig,
    SweepConfig,
    assignment_log_weights,
    base_rate_log_conditional,
    deviation_posterior_mean,
    detach_edge,
    ffbs_paths,
    ffbs_state_path,
    gamma_hyper_loglik,
    gibbs_group_assignment,
    rng_stream,
    sample_deviation_factors,
    sample_prior_paths,
    sample_transition_matrix,
    slice_sample_base_rate,
    slice_sample_gamma_hypers,
    sweep,
)
from oracles import all_paths, tv_distance


def make_state(counts, hypers, labels, paths, rates, theta=((0.7, 0.3), (0.35, 0.65))):
    return ChainState(make_panel(counts), hypers, labels, paths, rates, theta,
                      hypers.gamma_shape, hypers.gamma_scale)


# -- configuration -----------------------------------------------------------------

def test_configs_reject_nonpositive():
    with pytest.raises(ValueError):
        SliceConfig(initial_width=0.0)
    with pytest.raises(ValueError):
        SliceConfig(max_shrink=0)
    with pytest.raises(ValueError):
        Algo8Config(m_aux=0)


def test_rng_stream_is_reproducible_and_streams_differ():
    a = rng_stream(42, 0).random(5)
    assert np.array_equal(a, rng_stream(42, 0).random(5))
    assert not np.array_equal(a, rng_stream(42, 1).random(5))


# -- generic slice sampler ---------------------------------------------------------

@pytest.mark.parametrize("name", sorted(checks.SLICE_TARGETS))
def test_slice_sampler_ks_against_analytic_targets(name):
    assert checks.slice_ks(name) < 0.01


def test_slice_sampler_exhaustion_keeps_value():
    rng = rng_stream(0)
    # a density that is only finite at the current point cannot be hit by shrinkage
    x, lp, ok = checks.slice_sample(lambda x: 0.0 if x == 0.25 else -math.inf, 0.25, rng,
                                    SliceConfig(max_shrink=5))
    assert (x, lp, ok) == (0.25, 0.0, False)


# -- base rates ---------------------------------------------------------------------

def _rate_chain(state, e, n, thin, seed):
    rng = rng_stream(seed)
    out = np.empty(n)
    for i in range(n * thin):
        slice_sample_base_rate(state, e, rng)
        if (i + 1) % thin == 0:
            out[i // thin] = state.rates[e]
    return out


def test_base_rate_limiting_case_recovers_gamma_prior():
    h = HyperParams(1.0, 2.0, 5.0, [1.0, 4.0], [1e-12, 1.0], np.ones((2, 2)))
    st = make_state([[0, 0, 0]], h, [0], [[0, 0, 0]], [10.0])
    draws = _rate_chain(st, 0, 100_000, 3, seed=1)
    assert abs(draws.mean() / 10.0 - 1) < 0.02
    assert abs(draws.var() / 50.0 - 1) < 0.02


def test_base_rate_one_edge_t1_matches_grid_cdf():
    h = HyperParams(1.0, 2.0, 3.0, [3.0, 2.0], [0.4, 2.5], np.ones((2, 2)))
    st = make_state([[7]], h, [0], [[1]], [1.0])
    draws = _rate_chain(st, 0, 100_000, 4, seed=2)
    # density of lambda: Gamma(2, 3) * lambda^7 * (1/(1/d + lambda))^(c + 7)
    def log_dens(lam):
        return (2.0 - 1 + 7) * np.log(lam) - lam / 3.0 - (2.0 + 7) * np.log(1 / 2.5 + lam)
    grid = np.linspace(1e-6, 200.0, 400_001)
    dens = np.exp(log_dens(grid) - log_dens(grid).max())
    cdf = integrate.cumulative_trapezoid(dens, grid, initial=0.0)
    cdf /= cdf[-1]
    ks = stats.kstest(draws, lambda x: np.interp(x, grid, cdf)).statistic
    assert ks < 0.01


def test_base_rate_conditional_ignores_other_groups():
    h = HyperParams(1.0, 2.0, 3.0, [3.0, 2.0], [0.4, 2.5], np.ones((2, 2)))
    paths = [[0, 1], [1, 1]]
    a = make_state([[1, 4], [9, 0], [2, 2]], h, [0, 1, 0], paths, [1.0, 2.0, 3.0])
    b = make_state([[1, 4], [50, 71], [2, 2]], h, [0, 1, 0], paths, [1.0, 2.0, 3.0])
    ra = slice_sample_base_rate(a, 0, rng_stream(5))
    rb = slice_sample_base_rate(b, 0, rng_stream(5))
    assert ra == rb


def test_base_rate_conditional_matches_joint_differences():
    h = HyperParams(1.0, 2.0, 3.0, [3.0, 2.0], [0.4, 2.5], np.ones((2, 2)))
    st = make_state([[1, 4, 0], [3, 0, 2]], h, [0, 0], [[0, 1, 1]], [1.0, 2.0])
    other = 2.0
    cs = st.state_c[0]
    def cond(lam):
        return base_rate_log_conditional(math.log(lam), st.total_y[0], other, cs,
                                         st.inv_scale, 2.0, 3.0) - math.log(lam)
    def joint(lam):
        return joint_logprob(st.panel, st.partition(), [lam, 2.0], st.paths, h)
    for a, b in [(0.5, 1.7), (0.1, 4.0)]:
        assert cond(a) - cond(b) == pytest.approx(joint(a) - joint(b), abs=1e-9)


def test_base_rate_exhaustion_is_counted():
    h = HyperParams(1.0, 2.0, 3.0, [3.0, 2.0], [0.4, 2.5], np.ones((2, 2)))
    st = make_state([[400]], h, [0], [[1]], [1e-6])
    rng = rng_stream(0)
    for _ in range(20):
        st.rates[0] = 1e-6
        st.refresh()
        slice_sample_base_rate(st, 0, rng, SliceConfig(initial_width=1e-3, max_stepout=1,
                                                       max_shrink=1))
    assert st.diagnostics.slice_calls == 20
    assert st.diagnostics.slice_exhausted > 0


# -- Gamma hyperparameters -------------------------------------------------------------

def test_gamma_hypers_concentrate_on_truth():
    rates = np.random.default_rng(0).gamma(2.0, 5.0, size=10_000)
    rng = rng_stream(3)
    a, b = 1.0, 1.0
    draws = []
    for i in range(3000):
        a, b = slice_sample_gamma_hypers(a, b, rates, rng)
        if i >= 1000:
            draws.append((a, b))
    mean = np.mean(draws, axis=0)
    assert abs(mean[0] - 2.0) < 0.15
    assert abs(mean[1] - 5.0) < 0.4


def test_gamma_hypers_single_rate_stays_in_support():
    rng = rng_stream(4)
    a, b = 2.0, 5.0
    lo, hi = GAMMA_HYPER_BOUNDS
    for _ in range(500):
        a, b = slice_sample_gamma_hypers(a, b, [3.3], rng)
        assert lo <= a <= hi and lo <= b <= hi


def test_gamma_hypers_reject_out_of_support_start():
    with pytest.raises(ModelError):
        slice_sample_gamma_hypers(1e4, 1.0, [1.0], rng_stream(0))


def test_gamma_hyper_likelihood_is_exchangeable():
    rates = np.random.default_rng(1).gamma(2.0, 5.0, size=50)
    perm = rates[::-1]
    for a, b in [(0.5, 2.0), (3.0, 7.0)]:
        la = gamma_hyper_loglik(a, b, 50, float(np.log(rates).sum()), float(rates.sum()))
        lb = gamma_hyper_loglik(a, b, 50, float(np.log(perm).sum()), float(perm.sum()))
        assert la == pytest.approx(lb, rel=1e-13)
        ref = stats.gamma.logpdf(rates, a, scale=b).sum()
        assert la == pytest.approx(ref, rel=1e-12)


# -- group assignments --------------------------------------------------------------------

def test_two_edge_assignment_matches_ratio_of_joints(soft_hypers):
    h = soft_hypers
    theta = np.array([[0.7, 0.3], [0.35, 0.65]])
    counts = [[3, 1], [4, 0]]
    rates = [1.3, 0.8]
    st = make_state(counts, h, [0, 1], [[0, 1], [1, 1]], rates, theta)
    m = 3
    _, emptied = detach_edge(st, 1)
    aux = [emptied, np.array([0, 0]), np.array([1, 0])]
    groups = np.flatnonzero(st.sizes)
    logw = assignment_log_weights(st, 1, groups, aux, h.alpha, m)
    panel = make_panel(counts)
    ref = [joint_logprob(panel, Partition([0, 0]), rates, [[0, 1]], h, theta=theta)]
    for a in aux:
        full = joint_logprob(panel, Partition([0, 1]), rates, [[0, 1], a], h, theta=theta)
        ref.append(full - path_logprob(a[None, :], theta) - math.log(m))
    ref = np.array(ref)
    p = np.exp(logw - logw.max())
    q = np.exp(ref - ref.max())
    np.testing.assert_allclose(p / p.sum(), q / q.sum(), rtol=0, atol=1e-12)


def test_assignment_weights_two_ways_agree(soft_hypers):
    rng = np.random.default_rng(7)
    h = soft_hypers
    theta = np.array([[0.6, 0.4], [0.3, 0.7]])
    m = 3
    for _ in range(15):
        n, T = 6, 4
        counts = rng.integers(0, 9, size=(n, T))
        labels = canonical_labels(rng.integers(0, 3, size=n))
        G = int(labels.max()) + 1
        paths = rng.integers(0, 2, size=(G, T))
        rates = rng.gamma(2.0, 1.0, size=n)
        st = make_state(counts, h, labels, paths, rates, theta)
        e = int(rng.integers(0, n))
        _, emptied = detach_edge(st, e)
        aux = list(sample_prior_paths(theta, m, T, rng))
        groups = np.flatnonzero(st.sizes)
        logw = assignment_log_weights(st, e, groups, aux, h.alpha, m)
        full = []
        for g in groups:
            lab = st.labels.copy()
            lab[e] = g
            full.append(_joint(st, lab, st.paths, rates, h, theta))
        for a in aux:
            lab = st.labels.copy()
            lab[e] = st.paths.shape[0]
            paths_ = np.vstack([st.paths, a])
            full.append(_joint(st, lab, paths_, rates, h, theta)
                        - path_logprob(a[None, :], theta) - math.log(m))
        diff = logw - np.array(full)
        assert np.ptp(diff) < 1e-9


def _joint(st, labels, paths, rates, h, theta):
    used = np.unique(labels)
    canon = Partition.from_labels(labels)
    order = [int(np.flatnonzero(labels == g)[0]) for g in used]
    order.sort()
    return joint_logprob(st.panel, canon, rates, paths[labels[order]], h, theta=theta)


def test_new_group_vanishes_as_alpha_goes_to_zero():
    h = HyperParams(1e-12, 2.0, 1.5, [3.0, 2.0], [0.4, 2.5], np.ones((2, 2)))
    st = make_state([[3, 1], [4, 0]], h, [0, 0], [[0, 1]], [1.0, 1.0])
    detach_edge(st, 1)
    aux = [np.array([0, 0]), np.array([1, 1]), np.array([0, 1])]
    logw = assignment_log_weights(st, 1, np.array([0]), aux, h.alpha, 3)
    p = np.exp(logw - logw.max())
    assert p[1:].sum() / p.sum() < 1e-9


def test_all_zero_weights_raise():
    h = HyperParams(1.0, 2.0, 1.5, [3.0, 2.0], [0.4, 2.5], np.ones((2, 2)))
    st = make_state([[3, 1]], h, [0], [[0, 1]], [1.0])
    st.rates[0] = math.inf
    st.refresh()
    with pytest.raises(NumericalError), np.errstate(invalid="ignore"):
        gibbs_group_assignment(st, 0, rng_stream(0))


def test_gibbs_kernel_leaves_exact_posterior_invariant():
    assert checks.stationarity_error(*checks.tiny_instance()) < 1e-9


# -- transition matrix ----------------------------------------------------------------------

def test_transition_prior_draws():
    beta = np.array([[2.0, 1.0, 0.5], [1.0, 1.0, 4.0], [0.3, 0.3, 0.3]])
    rng = rng_stream(8)
    draws = np.array([sample_transition_matrix(np.empty((0, 3), dtype=int), beta, rng)
                      for _ in range(100_000)])
    mean = beta / beta.sum(axis=1, keepdims=True)
    se = draws.std(axis=0) / math.sqrt(draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 3 * se + 1e-12)
    np.testing.assert_allclose(draws.sum(axis=2), 1.0, atol=1e-12)


def test_transition_concentrates_on_huge_counts():
    paths = np.zeros((1, 10 ** 6 + 1), dtype=np.int64)
    theta = sample_transition_matrix(paths, np.ones((2, 2)), rng_stream(0))
    assert theta[0, 0] > 0.9999


def test_transition_posterior_mean_includes_virtual_start():
    beta = np.array([[2.0, 1.0], [1.0, 3.0]])
    paths = np.array([[1, 1, 0, 0], [1, 0, 1, 1]])
    n = np.array([[1, 1 + 2], [2, 2]])  # row 0 includes the two virtual starts
    rng = rng_stream(9)
    draws = np.array([sample_transition_matrix(paths, beta, rng) for _ in range(50_000)])
    expect = (beta + n) / (beta + n).sum(axis=1, keepdims=True)
    se = draws.std(axis=0) / math.sqrt(draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - expect) < 3 * se + 1e-12)


# -- FFBS ------------------------------------------------------------------------------------

def test_ffbs_t1_single_step_posterior(soft_hypers):
    h = soft_hypers
    theta = np.array([[0.7, 0.3], [0.35, 0.65]])
    exact = checks.exact_path_posterior([4.0], 1.5, theta, h)
    n = 200_000
    draws = ffbs_paths(np.full((n, 1), 4.0), np.full(n, 1.5), theta, h, rng_stream(1))
    p1 = draws.mean()
    assert abs(p1 - exact[(1,)]) < 3 * math.sqrt(exact[(1,)] * exact[(0,)] / n)


def test_ffbs_t6_matches_enumeration(soft_hypers):
    theta = np.array([[0.7, 0.3], [0.35, 0.65]])
    assert checks.ffbs_tv([3, 0, 5, 9, 1, 0], 2.0, theta, soft_hypers) < 0.01


def test_ffbs_uniform_emissions_give_markov_prior():
    h = HyperParams(1.0, 2.0, 1.5, [3.0, 3.0], [0.5, 0.5], np.ones((2, 2)))
    theta = np.array([[0.8, 0.2], [0.4, 0.6]])
    n, T = 200_000, 4
    draws = ffbs_paths(np.tile([5.0, 0.0, 2.0, 7.0], (n, 1)), np.full(n, 3.0), theta, h,
                       rng_stream(2))
    keys, counts = np.unique(draws, axis=0, return_counts=True)
    emp = {tuple(int(v) for v in k): c / n for k, c in zip(keys, counts)}
    prior = {tuple(int(v) for v in p): math.exp(path_logprob(p[None, :], theta))
             for p in all_paths(T, 2)}
    assert tv_distance(emp, prior) < 0.01


def test_ffbs_underflow_reports_time_index():
    h = HyperParams(1.0, 2.0, 1.5, [3.0, 2.0], [0.4, 2.5], np.ones((2, 2)))
    with pytest.raises(NumericalError, match="time index 0"):
        ffbs_paths(np.zeros((1, 3)), np.array([math.inf]), np.full((2, 2), 0.5), h,
                   rng_stream(0))


def test_ffbs_state_path_rejects_empty_group(soft_hypers):
    panel = make_panel([[1, 2]])
    with pytest.raises(ModelError):
        ffbs_state_path(panel, Partition([0]), [1.0], 1, np.full((2, 2), 0.5),
                        soft_hypers, rng_stream(0))


# -- deviation factors ----------------------------------------------------------------------------

def test_deviation_posterior_mean_is_cprime_dprime(soft_hypers):
    h = soft_hypers
    mean = deviation_posterior_mean([3, 0], 2.0, [0, 1], h)
    np.testing.assert_allclose(mean, [(3 + 3) / (1 / 0.4 + 2), 2 / (1 / 2.5 + 2)], rtol=1e-15)


def test_deviation_prior_dominated_spike_mean():
    h = HyperParams(1.0, 2.0, 5.0, [1000.0, 4.0], [1e-3, 1.0], np.ones((2, 2)))
    mean = deviation_posterior_mean([0, 0], 1e-3, [0, 0], h)
    np.testing.assert_allclose(mean, 1.0, rtol=2e-6)


def test_deviation_draws_match_posterior_mean(soft_hypers):
    draws = sample_deviation_factors([4, 1, 0], 1.7, [1, 0, 1], soft_hypers, rng_stream(3),
                                     size=100_000)
    mean = deviation_posterior_mean([4, 1, 0], 1.7, [1, 0, 1], soft_hypers)
    se = draws.std(axis=0) / math.sqrt(draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 3 * se)


# -- sweeps ---------------------------------------------------------------------------------------

def _random_state(seed, n=30, T=8):
    rng = np.random.default_rng(seed)
    h = HyperParams(1.0, 2.0, 5.0, [100.0, 2.0], [0.01, 2.0], [[8.0, 1.0], [2.0, 6.0]])
    counts = rng.poisson(5.0, size=(n, T))
    return make_state(counts, h, np.zeros(n, dtype=int), np.zeros((1, T), dtype=int),
                      np.full(n, 5.0), np.array([[0.9, 0.1], [0.3, 0.7]]))


def test_sweep_is_deterministic():
    a, b = _random_state(0), _random_state(0)
    ra, rb = rng_stream(11), rng_stream(11)
    for _ in range(5):
        sweep(a, ra)
        sweep(b, rb)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.paths, b.paths)
    assert np.array_equal(a.rates, b.rates)
    assert np.array_equal(a.theta, b.theta)
    assert a.joint_logprob() == b.joint_logprob()


def test_sweeps_keep_canonical_form_and_caches():
    st = _random_state(1)
    rng = rng_stream(12)
    for _ in range(40):
        sweep(st, rng, SweepConfig(debug=True))
        fresh = st.copy()
        np.testing.assert_allclose(st.sum_lam, fresh.sum_lam, rtol=1e-12)
        np.testing.assert_array_equal(st.sum_y, fresh.sum_y)
        np.testing.assert_allclose(st.state_c, fresh.state_c, rtol=1e-12)
        assert np.all(st.sizes > 0)


@pytest.mark.slow
def test_joint_gibbs_matches_exact_posterior():
    panel, rates, theta, hypers = checks.tiny_instance()
    exact = checks.exact_posterior(panel, rates, theta, hypers)
    st = ChainState(panel, hypers, [0, 0, 0], [[0, 0]], rates, theta,
                    hypers.gamma_shape, hypers.gamma_scale)
    cfg = SweepConfig(update_rates=False, update_gamma=False, update_theta=False)
    rng = rng_stream(21)
    n = 1_000_000
    tally = {}
    for _ in range(n):
        sweep(st, rng, cfg)
        k = checks.state_key(st.labels, st.paths)
        tally[k] = tally.get(k, 0) + 1
    emp = {k: v / n for k, v in tally.items()}
    assert tv_distance(emp, exact) < 0.02
