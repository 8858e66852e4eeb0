import numpy as np
import pytest
from hypothesis import given, strategies as st

from stockdp.discounting import DiscountFunction
from stockdp.environments import build_chain_mdp, build_deterministic_chain
from stockdp.finite_horizon import StockGrid, backward_induction
from stockdp.multi_horizon import (
    HorizonBasis,
    build_hyperbolic_basis,
    multi_backward_induction,
    preference_reversal_sweep,
    select_action,
    spacing_base,
)
from stockdp.risk import OceUtility


def test_atari_basis_spacing():
    b = spacing_base(0.05, 10, 0.999)
    assert (1 - b**10) ** 0.05 == pytest.approx(0.999, abs=1e-12)
    basis = build_hyperbolic_basis(0.05, 10, 0.999)
    assert basis.m == 10
    assert basis.gammas[-1] == 0.999
    assert np.all(np.diff(basis.gammas) > 0)
    assert basis.base_weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert basis.discount_values(0)[0] == pytest.approx(1.0)


def test_basis_discount_shape():
    basis = build_hyperbolic_basis(0.1, 8, 0.995)
    v = basis.discount_values(2000)
    assert np.all(np.diff(v) < 0)
    factors = v[1:] / v[:-1]
    assert factors[-1] == pytest.approx(0.995, abs=1e-4)


def test_approximation_error_falls_with_m():
    target = DiscountFunction.hyperbolic(0.05, 250)
    errs = [build_hyperbolic_basis(0.05, m, 0.999).max_relative_error(target, 200) for m in (5, 10, 20)]
    assert errs[0] > errs[1] > errs[2]


def test_m1_basis_is_exponential():
    basis = build_hyperbolic_basis(0.2, 1, 0.9)
    np.testing.assert_array_equal(basis.gammas, [0.9])
    np.testing.assert_allclose(basis.discount_values(5), 0.9 ** np.arange(6))


@given(t=st.integers(0, 5000))
def test_time_weights_sum_to_one(t):
    basis = build_hyperbolic_basis(0.05, 10, 0.999)
    w = basis.time_weights(t)
    assert w.sum() == pytest.approx(1.0, abs=1e-12) and np.all(w >= 0)


def test_time_weights_limits():
    basis = build_hyperbolic_basis(0.05, 10, 0.999)
    np.testing.assert_allclose(basis.time_weights(0), basis.base_weights)
    assert basis.time_weights(100_000)[-1] > 0.999


def test_basis_validation():
    with pytest.raises(ValueError):
        HorizonBasis(np.array([0.9, 0.5]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        HorizonBasis(np.array([1.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        spacing_base(-1.0, 3, 0.9)


@pytest.mark.parametrize("f", [OceUtility.mean(), OceUtility.cvar(0.3), OceUtility.mean_cvar(0.5, 0.2)], ids=repr)
def test_m1_matches_single_discount_solver(f):
    mdp = build_chain_mdp(3, 2, 4, horizon=3)
    grid = StockGrid.exact(np.linspace(-1, 1, 5))
    basis = build_hyperbolic_basis(0.3, 1, 0.85)
    p1, t1 = multi_backward_induction(mdp, f, basis, grid)
    p2, t2 = backward_induction(mdp, f, DiscountFunction.exponential(0.85), grid)
    for a, b in zip(p1.actions, p2.actions):
        np.testing.assert_array_equal(a, b)
    for t in range(4):
        np.testing.assert_array_equal(t1.component(t, 0).dist.values, t2.slices[t].dist.values)


def test_deterministic_path_aggregate_is_discounted_sum():
    rewards = [1.0, -2.0, 0.5, 3.0]
    mdp = build_deterministic_chain(rewards, horizon=4)
    basis = build_hyperbolic_basis(0.5, 6, 0.99)
    _, table = multi_backward_induction(mdp, OceUtility.mean(), basis, StockGrid.exact([0.0]))
    nu = table.aggregate(0, 0, 0.0)
    assert len(nu) == 1
    assert nu.values[0] == pytest.approx(float(basis.discount_values(3) @ rewards), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_gap_to_exact_hyperbolic_shrinks_with_m(seed):
    mdp = build_chain_mdp(3, 2, seed, horizon=4)
    f = OceUtility.mean()
    _, exact = backward_induction(mdp, f, DiscountFunction.hyperbolic(0.5, 50), StockGrid.invariant())
    target = exact.distribution(0, 0, 0.0).mean()
    gaps = []
    for m in (2, 5, 10, 20):
        _, table = multi_backward_induction(mdp, f, build_hyperbolic_basis(0.5, m, 0.999), StockGrid.invariant())
        gaps.append(abs(table.aggregate(0, 0, 0.0).mean() - target))
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


def test_modes_agree_at_time_zero():
    mdp = build_chain_mdp(3, 3, 9, horizon=3)
    basis = build_hyperbolic_basis(0.5, 4, 0.95)
    f = OceUtility.mean()
    _, table = multi_backward_induction(mdp, f, basis, StockGrid.invariant())
    for s in range(3):
        picks = {select_action(m, table, basis, s, 0.0, 0, f) for m in ("time_consistent", "time_aware_inconsistent")}
        assert len(picks) == 1
    with pytest.raises(ValueError, match="selection mode"):
        select_action("greedy", table, basis, 0, 0.0, 0, f)


def test_preference_reversal():
    basis = build_hyperbolic_basis(1.0, 10, 0.999)
    out = preference_reversal_sweep(basis, 1.0, 1.5, 6)
    switch = out["predicted"]
    assert switch is not None and switch >= 1
    assert out["consistent"] == [0] * switch + [1] * (7 - switch)
    assert len(set(out["inconsistent"])) == 1
