import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metaseird.core import (
    D, E, I, R, S,
    EpiParams, EpsilonSet, RegionMeta, TestParams,
    apply_fluxes, clamp_conserving, compute_epsilons, gravity_coupling, gravity_weights, observe_mean,
    observe_stochastic, sample_multinomial, seeded_initial_state, simulate, step_mean, step_stochastic,
    testing_rates as forward_rates,
)
from metaseird.errors import (
    DegenerateDistanceError, DegenerateStateError, InconsistentInputsError, InfectionPressureError,
    InversionInfeasibleError,
)


def region(i, pop=1000, lat=30.0, lon=-97.0):
    return RegionMeta(i, f"r{i}", pop, lat, lon)


# ---------------------------------------------------------------- coupling

def test_single_region_coupling_is_identity():
    assert gravity_coupling([region(0)]).tolist() == [[1.0]]


def test_two_equal_regions_hit_cap():
    c = gravity_coupling([region(0, 5000), region(1, 5000, lat=31.2)], cap=0.1)
    assert c[0, 1] == 0.1 and c[1, 0] == 0.1
    assert np.all(np.diag(c) == 1.0)


def test_three_region_gravity_by_hand():
    # raw weights: 1e6*2e6/100^2 = 2e8, 1e6*4e6/200^2 = 1e8, 2e6*4e6/400^2 = 5e7
    d = np.array([[0, 100, 200], [100, 0, 400], [200, 400, 0]], dtype=float)
    c = gravity_weights([1e6, 2e6, 4e6], d, exponent=2, cap=0.1)
    expected = np.array([[1, 0.1, 0.05], [0.1, 1, 0.025], [0.05, 0.025, 1]])
    np.testing.assert_allclose(c, expected, rtol=1e-14)


def test_duplicate_centroids_rejected():
    with pytest.raises(DegenerateDistanceError):
        gravity_coupling([region(0), region(1)])


def test_texas_coupling_symmetric_unit_diagonal(texas):
    c = gravity_coupling(texas)
    assert c.shape == (11, 11)
    np.testing.assert_array_equal(c, c.T)
    np.testing.assert_array_equal(np.diag(c), 1.0)
    off = c[~np.eye(11, dtype=bool)]
    assert off.max() == pytest.approx(0.1) and off.min() > 0


# ---------------------------------------------------------------- stochastic step

def test_no_infectives_no_change(params):
    x = np.array([[900, 0, 0, 100, 0], [500, 0, 0, 0, 0]])
    c = np.array([[1, 0.1], [0.1, 1]])
    nxt, flux = step_stochastic(x, params, c, np.random.default_rng(0))
    np.testing.assert_array_equal(nxt, x)
    for f in (flux.n_s, flux.n_e, flux.n_r, flux.n_d):
        assert not f.any()


def test_certain_incubation():
    p = EpiParams(0.4, 1.0, 0.1, 0.01)
    x = np.array([[950, 50, 0, 0, 0]])
    _, flux = step_stochastic(x, p, np.eye(1), np.random.default_rng(3))
    assert flux.n_e[0] == 50


def test_exposure_moments_match_binomial(params):
    # S=1000, I/N=0.1 -> exposure probability 0.04
    n = 100_000
    x = np.broadcast_to(np.array([[1000, 0, 200, 800, 0]]), (n, 1, 5))
    _, flux = step_stochastic(x, params, np.eye(1), np.random.default_rng(11))
    draws = flux.n_s.sum(axis=-1)[:, 0]
    var = 1000 * 0.04 * 0.96
    assert abs(draws.mean() - 40) < 3 * np.sqrt(var / n)
    assert draws.var() == pytest.approx(var, rel=0.05)


def test_pressure_overflow_names_region():
    p = EpiParams(0.9, 0.1, 0.1, 0.01)
    x = np.array([[10, 0, 90, 0, 0], [100, 0, 0, 0, 0]])
    c = np.array([[1.0, 1.0], [1.0, 1.0]])
    x[1, I] = 100
    x[1, S] = 0
    with pytest.raises(InfectionPressureError) as info:
        step_stochastic(x, p, c, np.random.default_rng(0))
    assert info.value.region == 0


def test_sample_multinomial_respects_total():
    rng = np.random.default_rng(5)
    out = sample_multinomial(np.full(1000, 37), [0.2, 0.3, 0.1], rng)
    assert out.shape == (1000, 3)
    assert np.all(out.sum(axis=1) <= 37)
    np.testing.assert_allclose(out.mean(axis=0), [7.4, 11.1, 3.7], rtol=0.05)


def test_step_mean_matches_stochastic_average(params):
    x = np.array([[9000, 300, 500, 200, 0], [4000, 50, 100, 0, 10]])
    c = np.array([[1.0, 0.08], [0.08, 1.0]])
    n = 100_000
    nxt, _ = step_stochastic(np.broadcast_to(x, (n, 2, 5)), params, c, np.random.default_rng(21))
    mean = nxt.mean(axis=0)
    se = nxt.std(axis=0) / np.sqrt(n)
    expected = step_mean(x, params, c)
    assert np.all(np.abs(mean - expected) <= 3 * se + 1e-12)


# ---------------------------------------------------------------- mean map

def test_disease_free_fixed_point(params):
    x = np.array([[900.0, 0, 0, 100, 0], [50, 0, 0, 0, 5]])
    np.testing.assert_array_equal(step_mean(x, params, np.array([[1, 0.1], [0.1, 1]])), x)


def test_step_mean_hand_values(params):
    out = step_mean(np.array([[9000.0, 0, 1000, 0, 0]]), params, np.eye(1))[0]
    np.testing.assert_allclose(out, [8640, 360, 1000 * (1 - 1 / 14 - 0.01), 1000 / 14, 10], rtol=1e-14)


def test_symmetric_regions_stay_identical(params):
    x = np.array([[9000.0, 20, 80, 0, 0]] * 2)
    c = np.array([[1.0, 0.05], [0.05, 1.0]])
    out = step_mean(x, params, c)
    np.testing.assert_array_equal(out[0], out[1])


def test_step_mean_conserves_population(params, texas):
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1e5, size=(11, 5))
    pops = x.sum(axis=1)
    out = step_mean(x, params, gravity_coupling(texas), pops)
    np.testing.assert_allclose(out.sum(axis=1), pops, rtol=1e-12)
    assert np.all(out >= 0)


def test_clamp_conserving_keeps_total():
    x = np.array([[5.0, -1.0, 3.0, -0.5, 2.0]])
    out = clamp_conserving(x)
    assert out.min() >= 0
    assert out.sum() == pytest.approx(x.sum())


# ---------------------------------------------------------------- epsilon inversion

def test_epsilon_round_trip_example():
    tests = TestParams(alpha=0.01, beta=0.85, zeta=3.0, eps4=0.2)
    truth = EpsilonSet.from_tests(0.03, 0.1, tests)
    state = np.array([9500.0, 200, 250, 50, 0])
    rt, rp = forward_rates(state, truth, tests)
    got = compute_epsilons(state, rt, rp, tests)
    np.testing.assert_allclose(got.as_array(), [0.03, 0.09, 0.1, 0.2], rtol=1e-9)


def test_positivity_at_alpha_is_infeasible(tests_):
    with pytest.raises(InversionInfeasibleError):
        compute_epsilons([9500, 200, 250, 50], 0.01, tests_.alpha, tests_)


def test_zeta_one_is_degenerate():
    tests = TestParams(0.01, 0.85, 1.0, 0.2)
    with pytest.raises(DegenerateStateError):
        compute_epsilons([9500, 200, 250, 50], 0.01, 0.05, tests)


def test_out_of_range_epsilon_reports_value(tests_):
    # a testing rate far above anything the state can produce forces eps2 = zeta * eps1 > 1
    with pytest.raises(InconsistentInputsError) as info:
        compute_epsilons([9500, 200, 250, 50], 0.9, 0.05, tests_)
    assert info.value.name == "eps2"
    assert info.value.value > 1


def test_epsilon_set_rejects_out_of_range():
    with pytest.raises(InconsistentInputsError):
        EpsilonSet(0.1, 1.2, 0.1, 0.2)


# ---------------------------------------------------------------- observations

def test_observe_mean_empty(eps, tests_):
    assert observe_mean(np.zeros(5), eps, tests_) == (0.0, 0.0)


def test_observe_mean_deaths_only():
    tests = TestParams(0.0, 0.85, 3.0, 0.2)
    p, q = observe_mean([0, 0, 0, 0, 1000], EpsilonSet(0.03, 0.09, 0.1, 0.2), tests)
    assert (p, q) == (0.0, pytest.approx(850.0))


def test_observe_mean_hand_sum(eps, tests_):
    # 0.85*0.1*0.8*250 + 0.85*0.03*(0.2*250+200) + 0.01*0.03*0.9*9550 + 0.01*0.1*0.1*9550
    p, q = observe_mean([9500, 200, 250, 50, 0], eps, tests_)
    assert p == pytest.approx(17 + 6.375 + 2.5785 + 0.955, rel=1e-12)
    assert q == 0


def test_observe_stochastic_zero_state(eps, tests_):
    rec = observe_stochastic(np.zeros(5, dtype=np.int64), eps, tests_, np.random.default_rng(0))
    assert rec.p == 0 and rec.q == 0


def test_observe_stochastic_deterministic_corner():
    tests = TestParams(0.0, 1.0, 1.0, 0.0)
    rec = observe_stochastic(np.array([500, 0, 100, 0, 0]), EpsilonSet(1, 1, 0, 0), tests, np.random.default_rng(9))
    assert rec.p == 100


def test_observe_stochastic_mean_matches(eps, tests_):
    n = 100_000
    state = np.broadcast_to(np.array([9500, 200, 250, 50, 0]), (n, 5))
    rec = observe_stochastic(state, eps, tests_, np.random.default_rng(4))
    expected, _ = observe_mean(state[0], eps, tests_)
    assert abs(rec.p.mean() - expected) < 3 * rec.p.std() / np.sqrt(n)


# ---------------------------------------------------------------- simulate

def test_horizon_one_is_one_manual_step(params, tests_, eps):
    x0 = np.array([[9990, 0, 10, 0, 0], [5000, 0, 0, 0, 0]])
    c = np.array([[1.0, 0.1], [0.1, 1.0]])
    traj = simulate(x0, params, tests_, eps, c, 1, np.random.default_rng(8))
    rng = np.random.default_rng(8)
    x1, _ = step_stochastic(x0, params, c, rng)
    obs = observe_stochastic(x1, eps, tests_, rng, aggregate=x1.sum(axis=0))
    np.testing.assert_array_equal(traj.states[1], x1)
    np.testing.assert_array_equal(traj.observations.p[0], obs.p)
    np.testing.assert_array_equal(traj.observations.q[0], obs.q)


def test_isolated_regions_stay_clean(params, tests_, eps):
    x0 = seeded_initial_state([10000, 20000, 5000], [20, 0, 0])
    traj = simulate(x0, params, tests_, eps, np.eye(3), 100, np.random.default_rng(0))
    assert not traj.states[:, 1:, E].any()
    assert not traj.states[:, 1:, I].any()


def test_texas_epidemic_shape(texas_run):
    truth, _, _ = texas_run
    inf0 = truth[:, 0, I]
    peak = int(np.argmax(inf0))
    assert 10 < peak < len(inf0) - 10
    assert inf0[peak] > 100 * inf0[0] and inf0[-1] < inf0[peak] / 2
    assert np.all(np.diff(truth[:, :, D], axis=0) >= 0)
    assert np.all(truth[-1, :, D] > 0)


def test_simulate_rejects_zero_horizon(params, tests_, eps):
    with pytest.raises(ValueError):
        simulate(np.array([[100, 0, 1, 0, 0]]), params, tests_, eps, np.eye(1), 0, np.random.default_rng(0))


def test_simulate_is_reproducible(params, tests_, eps):
    x0 = np.array([[9990, 0, 10, 0, 0]])
    a = simulate(x0, params, tests_, eps, np.eye(1), 30, np.random.default_rng(5))
    b = simulate(x0, params, tests_, eps, np.eye(1), 30, np.random.default_rng(5))
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.observations.p, b.observations.p)


# ---------------------------------------------------------------- properties

rates = st.fixed_dictionaries({
    "lambda_S": st.floats(0.01, 0.9),
    "lambda_E": st.floats(0.01, 1.0),
    "lambda_R": st.floats(0.0, 0.5),
    "lambda_D": st.floats(0.0, 0.5),
})


@settings(max_examples=60, deadline=None)
@given(rates, st.lists(st.integers(1, 5000), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
def test_step_properties(r, pops, seed):
    params = EpiParams(**r)
    rng = np.random.default_rng(seed)
    g = len(pops)
    x = np.stack([rng.multinomial(n, [0.6, 0.1, 0.1, 0.15, 0.05]) for n in pops])
    c = np.full((g, g), 0.05)
    np.fill_diagonal(c, 1.0)
    for _ in range(5):
        nxt, flux = step_stochastic(x, params, c, rng)
        np.testing.assert_array_equal(nxt.sum(axis=1), pops)
        np.testing.assert_array_equal(apply_fluxes(x, flux), nxt)
        assert np.all(nxt >= 0)
        assert np.all(nxt[:, S] <= x[:, S])
        assert np.all(nxt[:, R] >= x[:, R]) and np.all(nxt[:, D] >= x[:, D])
        x = nxt


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.floats(1.0, 1e6), min_size=4, max_size=4),
    st.floats(0.001, 0.3), st.floats(1.5, 6.0), st.floats(0.01, 0.9), st.floats(0.0, 0.95),
)
def test_epsilon_round_trip_property(state, eps1, zeta, eps3, eps4):
    tests = TestParams(0.01, 0.85, zeta, eps4)
    if zeta * eps1 > 1:
        return
    truth = EpsilonSet.from_tests(eps1, eps3, tests)
    rt, rp = forward_rates(np.array(state + [0.0]), truth, tests)
    got = compute_epsilons(state, rt, rp, tests)
    back = forward_rates(np.array(state + [0.0]), got, tests)
    np.testing.assert_allclose(back, (rt, rp), rtol=1e-9)
