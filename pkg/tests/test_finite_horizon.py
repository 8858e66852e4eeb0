import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stockdp.discounting import DiscountFunction
from stockdp.distributions import ReturnDistribution, wasserstein1
from stockdp.environments import Kernel, TabularMdp, build_chain_mdp, build_deterministic_chain, sample_transition
from stockdp.finite_horizon import (
    StockGrid,
    anytime_outcome,
    backward_induction,
    bellman_apply,
    greedy_step,
    policy_evaluation,
    stock_update,
    terminal_slice,
)
from stockdp.risk import OceUtility

from conftest import enumerate_policies, path_law, scalar_vi

UTILS = [OceUtility.mean(), OceUtility.cvar(0.5), OceUtility.mean_cvar(0.5, 0.2),
         OceUtility.entropic(-1.0), OceUtility.mean_variance(0.5)]


def two_action_mdp(a_rows, b_rows):
    return TabularMdp.stationary(Kernel.from_rows(1, 2, {(0, 0): a_rows, (0, 1): b_rows}), horizon=1)


def test_stock_update_examples():
    assert stock_update(1.0, 0.5, DiscountFunction.exponential(0.8), 3) == pytest.approx(1.5 / 0.8)
    assert stock_update(1.0, 0.5, DiscountFunction.exponential(1.0), 0) == 1.5


@given(rewards=st.lists(st.floats(-5, 5), min_size=1, max_size=12), k=st.floats(0.01, 1.0))
def test_stock_iteration_closed_form(rewards, k):
    d = DiscountFunction.hyperbolic(k, 20)
    c = 0.0
    for t, r in enumerate(rewards):
        c = stock_update(c, r, d, t)
        expected = sum(d.evaluate(j) * rewards[j] for j in range(t + 1)) / d.evaluate(t + 1)
        assert c == pytest.approx(expected, rel=1e-12, abs=1e-12 * (1 + abs(expected)))


def test_bellman_one_step_examples():
    grid = StockGrid.exact([0.0, 1.0])
    d = DiscountFunction.exponential(0.9)
    det = TabularMdp.stationary(Kernel.from_rows(2, 1, {(0, 0): [(1, 2.5, 1.0)], (1, 0): [(0, 2.5, 1.0)]}), horizon=1)
    layers = grid.layers(det, d, 1)
    out = bellman_apply(det, np.zeros((2, 2), int), terminal_slice(det, grid, layers[1], 1), d, 0, grid, layers[0])
    for s in range(2):
        for j in range(2):
            assert out.distribution(s, j) == ReturnDistribution([2.5], [1.0])
    coin = TabularMdp.stationary(Kernel.from_rows(1, 1, {(0, 0): [(0, -1.0, 0.3), (0, 2.0, 0.7)]}), horizon=1)
    layers = grid.layers(coin, d, 1)
    out = bellman_apply(coin, np.zeros((1, 2), int), terminal_slice(coin, grid, layers[1], 1), d, 0, grid, layers[0])
    assert out.distribution(0, 1) == ReturnDistribution([-1.0, 2.0], [0.3, 0.7])


@pytest.mark.parametrize("seed", range(6))
def test_policy_evaluation_matches_trajectory_enumeration(seed):
    mdp = build_chain_mdp(3, 2, seed, horizon=3)
    d = DiscountFunction.hyperbolic(0.3, 10)
    grid = StockGrid.exact([0.0])
    rng = np.random.default_rng(seed)
    layers = grid.layers(mdp, d, 3)
    table = [rng.integers(0, 2, size=(3, layers[t].size)) for t in range(3)]

    def choose(t, s, acc):
        c = acc / d.evaluate(t)
        return int(table[t][s, grid.locate(layers[t], np.array([c]))[0]])

    from stockdp.finite_horizon import NonStationaryPolicy
    pol = NonStationaryPolicy(table, layers[:3], grid)
    slices = policy_evaluation(mdp, pol, d, grid)
    assert wasserstein1(slices[0].distribution(mdp.initial_state, 0), path_law(mdp, d, 3, choose)) < 1e-12


def test_single_action_greedy_equals_bellman():
    mdp = build_chain_mdp(3, 1, 2, horizon=2)
    d = DiscountFunction.exponential(0.7)
    grid = StockGrid.exact([-1.0, 0.0, 1.0])
    layers = grid.layers(mdp, d, 2)
    eta = terminal_slice(mdp, grid, layers[2], 2)
    eta = bellman_apply(mdp, np.zeros((3, layers[1].size), int), eta, d, 1, grid, layers[1])
    acts, g, _ = greedy_step(mdp, eta, OceUtility.cvar(0.3), d, 0, grid, layers[0])
    b = bellman_apply(mdp, np.zeros((3, layers[0].size), int), eta, d, 0, grid, layers[0])
    assert np.all(acts == 0)
    np.testing.assert_array_equal(g.dist.values, b.dist.values)
    np.testing.assert_array_equal(g.dist.probs, b.dist.probs)


@pytest.mark.parametrize("f", UTILS, ids=repr)
def test_dominant_action_is_chosen(f):
    # action 1 is action 0 shifted up by 0.5 on every atom
    mdp = two_action_mdp([(0, -1.0, 0.4), (0, 1.0, 0.6)], [(0, -0.5, 0.4), (0, 1.5, 0.6)])
    # stocks where no utility is flat over both payoffs, so dominance is strict
    grid = StockGrid.exact(np.linspace(-2, 0, 5))
    policy, _ = backward_induction(mdp, f, DiscountFunction.exponential(0.9), grid)
    assert np.all(policy.actions[0] == 1)


def test_risk_split_example():
    mdp = two_action_mdp([(0, 0.0, 1.0)], [(0, -1.0, 0.5), (0, 1.0, 0.5)])
    d = DiscountFunction.exponential(1.0)
    grid = StockGrid.exact([0.0])
    pol, table = backward_induction(mdp, OceUtility.mean(), d, grid)
    assert pol.action(0, 0, 0.0) == 0
    pol, table = backward_induction(mdp, OceUtility.cvar(0.5), d, grid)
    assert pol.action(0, 0, 0.0) == 0
    q = table.q[0][0, 0]
    assert q[0] - q[1] == pytest.approx(1.0)


def test_horizon_zero():
    mdp = build_deterministic_chain([1.0], horizon=0)
    f = OceUtility.mean_cvar(0.5, 0.2)
    grid = StockGrid.exact([-1.0, 2.0])
    policy, table = backward_induction(mdp, f, DiscountFunction.exponential(0.9), grid)
    assert policy.horizon == 0
    assert table.distribution(0, 0, 2.0) == ReturnDistribution([0.0], [1.0])
    for c in (-1.0, 2.0):
        assert table.objective(0, 0, c) == pytest.approx(float(f(c)))


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("f", [OceUtility.cvar(0.4), OceUtility.mean_cvar(0.3, 0.25), OceUtility.entropic(-0.8)],
                         ids=repr)
def test_matches_exhaustive_policy_search(seed, f):
    rng = np.random.default_rng(100 + seed)
    S, A, T = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    mdp = build_chain_mdp(S, A, seed, horizon=T, branching=2)
    d = DiscountFunction.hyperbolic(0.5, 10)
    c0 = float(rng.choice([-1.0, 0.0, 0.5]))
    _, table = backward_induction(mdp, f, d, StockGrid.exact([c0]))
    best = max(float(np.dot(f(c0 + nu.values), nu.probs)) for nu in enumerate_policies(mdp, d, T))
    assert table.objective(0, mdp.initial_state, c0) == pytest.approx(best, abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_mean_exponential_reduces_to_scalar_vi(seed):
    mdp = build_chain_mdp(4, 3, seed, horizon=5)
    gamma = 0.85
    _, table = backward_induction(mdp, OceUtility.mean(), DiscountFunction.exponential(gamma), StockGrid.invariant())
    v = scalar_vi(mdp, gamma, 5)
    for s in range(4):
        assert table.distribution(0, s, 0.0).mean() == pytest.approx(v[s], abs=1e-10)


def test_anytime_outcome_is_constant_along_paths():
    mdp = build_chain_mdp(3, 2, 11)
    d = DiscountFunction.generalized_hyperbolic(0.4, 1.5, 40)
    rng = np.random.default_rng(1)
    assert anytime_outcome(0.3, 1.2, d, 0) == pytest.approx(1.5)
    for _ in range(50):
        s, c, T = 0, float(rng.normal()), 20
        rewards = []
        c0 = c
        cs = [c]
        for t in range(T):
            s, r = sample_transition(mdp, s, int(rng.integers(2)), rng)
            rewards.append(r)
            c = stock_update(c, r, d, t)
            cs.append(c)
        disc = d.values(T)
        total = c0 + float(np.dot(disc[:T], rewards))
        for t in range(T + 1):
            g_t = float(np.dot(disc[t:T], rewards[t:])) / disc[t]
            assert anytime_outcome(cs[t], g_t, d, t) == pytest.approx(total, abs=1e-12 * (1 + abs(total)))


def test_invariant_grid_rejects_stock_dependent_utility():
    mdp = build_deterministic_chain([1.0], horizon=1)
    with pytest.raises(ValueError):
        backward_induction(mdp, OceUtility.cvar(0.3), DiscountFunction.exponential(0.9), StockGrid.invariant())


def test_exact_grid_growth_guard():
    mdp = build_chain_mdp(2, 2, 0, horizon=8, reward_atoms=3)
    with pytest.raises(ValueError, match="exact stock grid grew"):
        StockGrid.exact(np.linspace(-1, 1, 5), max_nodes=50).layers(mdp, DiscountFunction.hyperbolic(0.37), 8)
