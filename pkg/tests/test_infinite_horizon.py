import math

import numpy as np
import pytest

from stockdp.discounting import DiscountFunction
from stockdp.environments import Kernel, TabularMdp, build_chain_mdp, build_deterministic_chain
from stockdp.finite_horizon import StockGrid
from stockdp.infinite_horizon import (
    bound_check,
    entropic_ce,
    entropic_recursion,
    fit_decay_slope,
    risk_neutral_tail,
    solve_infinite,
)
from stockdp.risk import OceUtility

from conftest import scalar_vi


def test_tail_single_state_geometric_series():
    mdp = build_deterministic_chain([2.0])
    tail = risk_neutral_tail(mdp, 0.8)
    assert tail.values[0] == pytest.approx(10.0, abs=1e-6)
    assert tail.distribution(0).mean() == pytest.approx(10.0, abs=1e-6)


def test_tail_two_armed_bandit():
    mdp = TabularMdp.stationary(Kernel.from_rows(1, 2, {(0, 0): [(0, 1.0, 1.0)], (0, 1): [(0, 2.0, 1.0)]}),
                                reward_bounds=(1.0, 2.0))
    tail = risk_neutral_tail(mdp, 0.5)
    assert tail.policy[0] == 1
    assert tail.values[0] == pytest.approx(4.0, abs=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_tail_distribution_mean_matches_scalar_vi(seed):
    mdp = build_chain_mdp(4, 2, seed)
    tail = risk_neutral_tail(mdp, 0.9, tol=1e-10)
    v = scalar_vi(mdp, 0.9, 600)
    np.testing.assert_allclose(tail.values, v, atol=1e-7)
    for s in range(4):
        assert tail.distribution(s).mean() == pytest.approx(v[s], abs=1e-7)


def test_tail_rejects_bad_gamma():
    with pytest.raises(ValueError):
        risk_neutral_tail(build_deterministic_chain([1.0]), 1.0)


def test_t_prime_zero_is_tail_everywhere():
    mdp = build_chain_mdp(3, 2, 5)
    d = DiscountFunction.hyperbolic(0.5, 50)
    policy, _, tail = solve_infinite(mdp, OceUtility.entropic(-1.0), d, 0, StockGrid.invariant())
    assert policy.horizon == 0
    for t in (0, 3, 40):
        np.testing.assert_array_equal(policy.actions_for(t, np.arange(3), np.zeros(3)), tail.policy)


def test_exponential_mean_composite_is_stationary_optimum():
    mdp = build_chain_mdp(4, 3, 6)
    d = DiscountFunction.exponential(0.9)
    policy, _, tail = solve_infinite(mdp, OceUtility.mean(), d, 5, StockGrid.invariant())
    assert tail.gamma == 0.9
    for t in range(8):
        np.testing.assert_array_equal(policy.actions_for(t, np.arange(4), np.zeros(4)), tail.policy)


def test_pure_cvar_rejected():
    with pytest.raises(ValueError, match="CVaR"):
        solve_infinite(build_deterministic_chain([1.0]), OceUtility.cvar(0.2), DiscountFunction.hyperbolic(0.1), 2,
                       StockGrid.exact([0.0]))


def test_entropic_recursion_matches_closed_form():
    mdp = TabularMdp.stationary(Kernel.from_rows(1, 1, {(0, 0): [(0, 0.0, 0.5), (0, 1.0, 0.5)]}))
    d = DiscountFunction.exponential(0.5, 10)
    beta = 1.0
    _, log_z = entropic_recursion(mdp, d, beta, 3)
    # the certainty equivalent of independent coins adds up over steps
    expected = sum(-math.log(0.5 * (1 + math.exp(-beta * 0.5**t))) / beta for t in range(3))
    assert float(entropic_ce(log_z[0], beta)[0]) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_entropic_bound_holds_and_shrinks(seed):
    mdp = build_chain_mdp(3, 2, seed, reward_values=[0.0, 0.5, 1.0])
    d = DiscountFunction.hyperbolic(0.05).truncate_at_horizon(60)
    rows = bound_check(mdp, OceUtility.entropic(1.0), d, [2, 5, 10], t_ref=300, seed=seed)
    assert all(r.holds for r in rows)
    assert rows[0].bound > rows[1].bound > rows[2].bound


def test_near_risk_neutral_entropic_gives_tiny_loss():
    mdp = build_chain_mdp(3, 2, 1, reward_values=[0.0, 1.0])
    d = DiscountFunction.hyperbolic(0.05).truncate_at_horizon(20)
    rows = bound_check(mdp, OceUtility.entropic(1e-6), d, [2, 5], t_ref=200)
    assert all(r.measured < 1e-4 for r in rows)


def test_mean_cvar_bound_holds():
    mdp = build_chain_mdp(2, 2, 3, reward_values=[-0.5, 0.0, 1.0])
    d = DiscountFunction.hyperbolic(0.5).truncate_at_horizon(3)
    f = OceUtility.mean_cvar(0.5, 0.25)
    rows = bound_check(mdp, f, d, [1, 2, 3], grid=StockGrid.exact(np.linspace(-1, 1, 5)), t_ref=5)
    assert all(r.holds for r in rows)
    assert all(r.measured_sup <= r.bound_sup + 1e-9 for r in rows)


def test_bound_check_rejects_other_utilities():
    with pytest.raises(ValueError):
        bound_check(build_deterministic_chain([1.0]), OceUtility.mean(), DiscountFunction.exponential(0.5), [1])


def test_fit_decay_slope():
    d = np.array([0.5, 0.25, 0.125])
    assert fit_decay_slope(d, 3.0 * d**2) == pytest.approx(2.0)
    assert fit_decay_slope(d, [1e-3, 0.0, 0.0]) == math.inf
