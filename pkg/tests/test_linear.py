import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from agentbullwhip.linear import (BOUND_COLUMNS, GainProfile, LagFilter, average_gain, bound_table,
                                  bound_table_csv, cascade, decision_bound, decision_bound_uniform,
                                  demand_bound, demand_bound_uniform, frequency_gain, intertemporal_variance,
                                  mean_gain_quadrature, shock_filter, simulate_linear, simulate_linear_filtered,
                                  stationary_decision_variance, stationary_demand_variance, tier_filter,
                                  tier_gain, tier_impulse)

G = shock_filter()
thetas = st.floats(0.05, 5.0)
lams = st.floats(0.05, 1.0)


def complex_gain(theta, lam, omega):
    # direct evaluation of the rational response, independent of the closed form
    z = np.exp(-1j * omega)
    a = theta * lam
    return abs(((1 + a) * z - (a + 1 - lam) * z * z) / (1 - (1 - lam) * z)) ** 2


def test_tier_filter_impulses():
    np.testing.assert_allclose(tier_filter(1, 1).impulse(5), [0, 2, -1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(tier_filter(2, 0.5).impulse(5), [0, 2, -0.5, -0.25, -0.125], atol=1e-15)
    np.testing.assert_allclose(G.impulse(3), [1, -1, 0])


@given(theta=thetas, lam=lams)
def test_impulse_matches_closed_form(theta, lam):
    np.testing.assert_allclose(tier_filter(theta, lam).impulse(40), tier_impulse(theta, lam, 40),
                               rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("lam", [0.0, -0.1, 1.5])
def test_tier_filter_rejects_bad_smoothing(lam):
    with pytest.raises(ValueError):
        tier_filter(1.0, lam)


def test_denominator_must_be_monic():
    with pytest.raises(ValueError):
        LagFilter((1.0,), (2.0, 1.0))


def test_frequency_gain_examples():
    assert frequency_gain(tier_filter(1, 1), np.pi) == pytest.approx(9.0)
    assert tier_gain(1, 1, np.pi) == pytest.approx(9.0)
    assert frequency_gain(G, np.pi) == pytest.approx(4.0)
    assert tier_gain(2.5, 0.3, 0.0) == 1.0


@given(theta=thetas, lam=lams, omega=st.floats(-math.pi, math.pi))
def test_closed_form_gain_matches_complex_evaluation(theta, lam, omega):
    assert tier_gain(theta, lam, omega) == pytest.approx(complex_gain(theta, lam, omega), rel=1e-9)
    assert frequency_gain(tier_filter(theta, lam), omega) == pytest.approx(complex_gain(theta, lam, omega),
                                                                           rel=1e-9)


@given(theta=thetas, lam=lams, omega=st.floats(1e-3, math.pi))
def test_gain_never_attenuates(theta, lam, omega):
    assert tier_gain(theta, lam, omega) > 1.0
    assert tier_gain(theta, lam, -omega) > 1.0


@pytest.mark.parametrize("theta,lam,gamma", [(0, 0.7, 1.0), (1, 1, 5.0), (3, 0.5, 7.0)])
def test_average_gain_examples(theta, lam, gamma):
    assert average_gain(theta, lam) == pytest.approx(gamma)


@given(theta=thetas, lam=lams)
def test_average_gain_equals_impulse_energy(theta, lam):
    # oracle: closed-form coefficients summed until the geometric tail is negligible
    h = tier_impulse(theta, lam, 4000 if lam < 0.2 else 400)
    assert average_gain(theta, lam) == pytest.approx(math.fsum(h * h), rel=1e-9)
    assert tier_filter(theta, lam).energy() == pytest.approx(average_gain(theta, lam), rel=1e-9)


@pytest.mark.parametrize("theta,lam", [(0.5, 0.1), (1, 1), (3, 0.5), (4, 0.9)])
def test_average_gain_equals_adaptive_quadrature(theta, lam):
    val, _ = integrate.quad(lambda w: complex_gain(theta, lam, w), -np.pi, np.pi, limit=200, epsabs=1e-12)
    assert average_gain(theta, lam) == pytest.approx(val / (2 * np.pi), rel=1e-8)
    assert mean_gain_quadrature(lambda w: tier_gain(theta, lam, w)) == pytest.approx(average_gain(theta, lam),
                                                                                     abs=1e-6)


def test_mean_gain_of_difference_filter_is_two():
    assert abs(mean_gain_quadrature(lambda w: frequency_gain(G, w)) - 2.0) < 1e-9


@given(theta=st.floats(0.05, 5.0), lam=st.floats(0.05, 0.95))
def test_average_gain_increasing_in_both_arguments(theta, lam):
    step = 1e-4
    assert average_gain(theta + step, lam) > average_gain(theta, lam)
    assert average_gain(theta, lam + step) > average_gain(theta, lam)


@given(params=st.lists(st.tuples(thetas, lams), min_size=1, max_size=4))
def test_product_gain_bound(params):
    gains = GainProfile(tuple(p[0] for p in params), tuple(p[1] for p in params))

    def product(w):
        return np.prod([tier_gain(t, l, w) for t, l in params], axis=0)

    assert mean_gain_quadrature(product) >= np.prod(gains.gammas) * (1 - 1e-9)


def test_demand_bounds():
    gains = GainProfile.uniform(1, 1, 3)
    assert demand_bound(1, 1.0, gains) == pytest.approx(5)
    assert demand_bound(2, 1.0, gains) == pytest.approx(25)
    assert demand_bound(0, 2.5, gains) == 2.5
    with pytest.raises(ValueError):
        demand_bound(4, 1.0, gains)


def test_decision_bounds():
    gains = GainProfile.uniform(1, 1, 3)
    assert decision_bound(1, [1.0], gains) == pytest.approx(2)
    assert decision_bound(2, [1.0, 0.0], gains) == pytest.approx(10)
    assert decision_bound(3, [0.0, 0.0, 0.0], gains) == 0.0
    assert decision_bound(3, [1.0, 1.0, 1.0], gains) == pytest.approx(62)
    with pytest.raises(ValueError):
        decision_bound(2, [1.0], gains)


@given(params=st.lists(st.tuples(thetas, lams), min_size=1, max_size=4),
       s2=st.lists(st.floats(0, 5), min_size=4, max_size=4), dv=st.floats(0, 5))
def test_exact_bounds_dominate_uniform_and_are_attained_at_tier_one(params, s2, dv):
    gains = GainProfile(tuple(p[0] for p in params), tuple(p[1] for p in params))
    for k in range(1, gains.n + 1):
        assert demand_bound(k, dv, gains) >= demand_bound_uniform(k, dv, gains) * (1 - 1e-12) >= 0
        assert decision_bound(k, s2, gains) >= decision_bound_uniform(k, s2, gains) * (1 - 1e-12) >= 0
        assert stationary_demand_variance(k, dv, gains) >= demand_bound(k, dv, gains) * (1 - 1e-7)
        assert stationary_decision_variance(k, s2, gains) >= decision_bound(k, s2, gains) * (1 - 1e-7)
    assert stationary_demand_variance(1, dv, gains) == pytest.approx(demand_bound(1, dv, gains), rel=1e-9, abs=1e-12)
    assert stationary_decision_variance(1, s2, gains) == pytest.approx(2 * s2[0], abs=1e-12)


def test_gain_profile_gammas_exceed_one():
    gains = GainProfile((1.0, 0.5, 3.0), (0.5, 1.0, 0.2))
    assert np.all(gains.gammas >= gains.gamma_floor) and gains.gamma_floor > 1


def test_cascade_examples():
    np.testing.assert_allclose(cascade([G]).impulse(3), [1, -1, 0])
    np.testing.assert_allclose(cascade([G, G]).impulse(4), [1, -2, 1, 0])
    np.testing.assert_allclose(cascade([tier_filter(1, 1), G]).impulse(5), [0, 2, -3, 1, 0], atol=1e-15)
    with pytest.raises(ValueError):
        cascade([])


def test_intertemporal_examples():
    np.testing.assert_allclose(intertemporal_variance(1, 3, [1.0], GainProfile.uniform(1, 1, 1)), [1, 2, 2])
    np.testing.assert_allclose(intertemporal_variance(2, 4, [1.0, 0.0], GainProfile.uniform(1, 1, 2)),
                               [0, 4, 13, 14], atol=1e-12)
    np.testing.assert_array_equal(intertemporal_variance(3, 5, [0, 0, 0], GainProfile.uniform(2, 0.5, 3)), 0)


@given(params=st.lists(st.tuples(thetas, lams), min_size=1, max_size=4),
       s2=st.lists(st.floats(0, 5), min_size=4, max_size=4), T=st.integers(1, 30))
def test_intertemporal_nondecreasing(params, s2, T):
    gains = GainProfile(tuple(p[0] for p in params), tuple(p[1] for p in params))
    for k in range(1, gains.n + 1):
        w = intertemporal_variance(k, T, s2, gains)
        assert np.all(np.diff(w) >= -1e-12)


def test_simulate_linear_impulses():
    d = np.zeros(6)
    assert not simulate_linear([1, 2], [1, 0.5], d).any()
    d[0] = 1.0
    np.testing.assert_allclose(simulate_linear([1], [1], d)[0], [0, 2, -1, 0, 0, 0], atol=1e-15)
    e = np.zeros((1, 6))
    e[0, 0] = 1.0
    np.testing.assert_allclose(simulate_linear([1], [1], np.zeros(6), e)[0], [1, -1, 0, 0, 0, 0])


@given(params=st.lists(st.tuples(thetas, lams), min_size=1, max_size=4), seed=st.integers(0, 2 ** 32 - 1))
def test_recursion_and_filter_paths_agree(params, seed):
    rng = np.random.default_rng(seed)
    n = len(params)
    d = rng.normal(size=(2, 40))
    e = rng.normal(size=(2, n, 40))
    gains = GainProfile(tuple(p[0] for p in params), tuple(p[1] for p in params))
    a = simulate_linear(gains.thetas, gains.lams, d, e)
    b = simulate_linear_filtered(gains, d, e)
    assert np.max(np.abs(a - b)) <= 1e-9 * max(1.0, np.max(np.abs(a)))


def test_bound_table_csv():
    rows = bound_table(GainProfile.uniform(1, 1, 3), 1.0, [1, 1, 1])
    assert [r.demand_bound for r in rows] == pytest.approx([5, 25, 125])
    assert [r.decision_bound for r in rows] == pytest.approx([2, 12, 62])
    lines = bound_table_csv(rows, {"theta": 1, "lam": 1}).splitlines()
    assert lines[0].split(",") == ["theta", "lam", *BOUND_COLUMNS]
    assert len(lines) == 4
