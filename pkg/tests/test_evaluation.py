import numpy as np
import pytest

from stockdp.discounting import DiscountFunction
from stockdp.environments import GbwmConfig, build_chain_mdp, build_deterministic_chain, build_gbwm
from stockdp.evaluation import (
    aggregate_reports,
    anytime_residual,
    exact_evaluate,
    exact_oce,
    mdp_fingerprint,
    monte_carlo_evaluate,
    multi_anytime_residual,
    multi_seed_evaluate,
    preference_reversal_metric,
)
from stockdp.finite_horizon import NonStationaryPolicy, StockGrid, backward_induction
from stockdp.multi_horizon import build_hyperbolic_basis, multi_backward_induction
from stockdp.risk import OceUtility


def constant_policy(mdp, layers, a):
    return NonStationaryPolicy([np.full((mdp.n_states, l.size), a) for l in layers[:-1]], layers[:-1],
                               StockGrid.exact(layers[0]))


@pytest.mark.parametrize("f", [OceUtility.cvar(0.3), OceUtility.mean_cvar(0.4, 0.2), OceUtility.entropic(-1.0)],
                         ids=repr)
def test_exact_evaluate_agrees_with_solver(f):
    mdp = build_chain_mdp(3, 2, 1, horizon=3)
    d = DiscountFunction.hyperbolic(0.3)
    grid = StockGrid.exact(np.linspace(-1, 1, 5))
    policy, table = backward_induction(mdp, f, d, grid)
    best, c0 = table.initial_stock(mdp.initial_state)
    assert exact_oce(mdp, policy, f, d, grid) == pytest.approx(best, abs=1e-12)
    layers = grid.layers(mdp, d, 3)
    for a in (0, 1):
        worst = constant_policy(mdp, layers, a)
        assert exact_evaluate(mdp, worst, f, d, grid, c0=c0) <= table.objective(0, mdp.initial_state, c0) + 1e-12


def test_exact_matches_monte_carlo():
    mdp = build_chain_mdp(3, 2, 2, horizon=4)
    d = DiscountFunction.hyperbolic(0.2)
    f = OceUtility.mean_cvar(0.5, 0.3)
    grid = StockGrid.exact([-0.5, 0.0, 0.5])
    policy, _ = backward_induction(mdp, f, d, grid)
    exact = exact_oce(mdp, policy, f, d, grid)
    mc = monte_carlo_evaluate(mdp, policy, f, d, 1_000_000, seed=3)
    assert abs(mc.objective - exact) <= 4 * mc.objective_se


def test_deterministic_monte_carlo_is_exact():
    mdp = build_deterministic_chain([1.0, 2.0, 3.0], horizon=3)
    d = DiscountFunction.exponential(0.5)
    grid = StockGrid.exact([0.0])
    policy, _ = backward_induction(mdp, OceUtility.mean(), d, grid)
    rep = monte_carlo_evaluate(mdp, policy, OceUtility.mean(), d, 50, seed=0)
    assert rep.utility_se == 0.0 and rep.objective_se == 0.0
    assert rep.expected_utility == 6.0
    assert rep.discounted_mean == pytest.approx(1 + 1 + 0.75)


def test_monte_carlo_is_reproducible_and_checks_input():
    mdp = build_chain_mdp(2, 2, 0, horizon=3)
    d = DiscountFunction.exponential(0.9)
    policy, _ = backward_induction(mdp, OceUtility.mean(), d, StockGrid.invariant())
    a = monte_carlo_evaluate(mdp, policy, OceUtility.mean(), d, 500, seed=4)
    b = monte_carlo_evaluate(mdp, policy, OceUtility.mean(), d, 500, seed=4)
    assert a.row() == b.row()
    with pytest.raises(ValueError):
        monte_carlo_evaluate(mdp, policy, OceUtility.mean(), d, 0, seed=4)


def test_aggregation_rejects_mixed_environments():
    m1 = build_chain_mdp(2, 2, 0, horizon=2)
    m2 = build_chain_mdp(2, 2, 1, horizon=2)
    assert mdp_fingerprint(m1) != mdp_fingerprint(m2)
    d = DiscountFunction.exponential(0.9)
    r1 = monte_carlo_evaluate(m1, backward_induction(m1, OceUtility.mean(), d, StockGrid.invariant())[0],
                              OceUtility.mean(), d, 10, 0)
    r2 = monte_carlo_evaluate(m2, backward_induction(m2, OceUtility.mean(), d, StockGrid.invariant())[0],
                              OceUtility.mean(), d, 10, 0)
    with pytest.raises(ValueError):
        aggregate_reports([r1, r2])


def test_anytime_residuals_on_recorded_paths():
    mdp = build_chain_mdp(3, 2, 8, horizon=15)
    d = DiscountFunction.hyperbolic(0.1)
    grid = StockGrid.exact([0.0])
    policy, _ = backward_induction(mdp, OceUtility.mean(), d, StockGrid.invariant())
    rep = monte_carlo_evaluate(mdp, policy, OceUtility.mean(), d, 200, seed=1, c0=0.3, record=True)
    assert anytime_residual(rep.paths, d) < 1e-12
    basis = build_hyperbolic_basis(0.1, 5, 0.99)
    mpol, _ = multi_backward_induction(mdp, OceUtility.mean(), basis, StockGrid.invariant())
    rep = monte_carlo_evaluate(mdp, mpol, OceUtility.mean(), basis.as_discount(16), 200, seed=1, c0=-0.2, record=True)
    assert multi_anytime_residual(rep.paths, basis) < 1e-12


@pytest.fixture(scope="module")
def gbwm10():
    return build_gbwm(GbwmConfig(T=10))


def test_gbwm_risk_neutral_band(gbwm10):
    d = DiscountFunction.exponential(1.0)
    f = OceUtility.mean()
    policy, _ = backward_induction(gbwm10, f, d, StockGrid.invariant())
    rep = multi_seed_evaluate(gbwm10, policy, f, d, 10_000, [0, 1, 2])
    early, late = rep.goal(5).take, rep.goal(10).take
    # same ordering as the published neural-agent numbers (0.848 early, 0.256 late)
    assert early > 0.7 and late < early
    assert 1000.0 < rep.expected_utility < 2000.0


def test_gbwm_cvar_takes_early_goal(gbwm10):
    d = DiscountFunction.exponential(1.0)
    f = OceUtility.cvar(0.1)
    policy, _ = backward_induction(gbwm10, f, d, StockGrid.exact(np.arange(-4000.0, 1.0, 1000.0)))
    rep = multi_seed_evaluate(gbwm10, policy, f, d, 10_000, [0, 1, 2])
    assert rep.goal(5).take >= 0.95


def test_reversal_metric(gbwm10):
    d = DiscountFunction.exponential(1.0)
    f = OceUtility.mean()
    policy, _ = backward_induction(gbwm10, f, d, StockGrid.invariant())
    a = monte_carlo_evaluate(gbwm10, policy, f, d, 10_000, seed=0)
    b = monte_carlo_evaluate(gbwm10, policy, f, d, 10_000, seed=1)
    gap = preference_reversal_metric(a, b)
    assert abs(gap) <= 4 * np.hypot(a.goal(5).take_se, b.goal(5).take_se)
    other = monte_carlo_evaluate(build_deterministic_chain([1.0], horizon=1),
                                 backward_induction(build_deterministic_chain([1.0], horizon=1), f, d,
                                                    StockGrid.invariant())[0], f, d, 10, 0)
    with pytest.raises(ValueError):
        preference_reversal_metric(a, other)
