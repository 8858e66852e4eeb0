import numpy as np
import pytest

from stockdp.discounting import DiscountFunction
from stockdp.distributions import ReturnDistribution, project_to_quantiles
from stockdp.environments import Kernel, TabularMdp, build_deterministic_chain
from stockdp.finite_horizon import StockGrid
from stockdp.multi_horizon import HorizonBasis, build_hyperbolic_basis
from stockdp.rigor import (
    QuantileTable,
    ReplayBuffer,
    RigorConfig,
    _Streams,
    dp_quantile_reference,
    learned_w1,
    q_value,
    td_update,
    train,
    train_multi_horizon,
)
from stockdp.risk import OceUtility


def coin_mdp(horizon=1):
    rows = {(0, 0): [(0, 0.0, 0.5), (0, 1.0, 0.5)]}
    return TabularMdp.stationary(Kernel.from_rows(1, 1, rows), horizon=horizon)


def table_for(mdp, d, n=8, m=1, grid=None):
    grid = grid or StockGrid.exact([0.0])
    return QuantileTable.zeros(mdp, grid.layers(mdp, d, mdp.horizon), n, m)


def batch_of(size, **fixed):
    base = dict(s=0, t=0, node=0, a=0, r=0.0, s2=0, node2=0, c2=0.0)
    base.update(fixed)
    return {k: np.full(size, v, dtype=float if k in ("r", "c2") else np.int64) for k, v in base.items()}


def test_q_value_examples():
    mdp = coin_mdp()
    d = DiscountFunction.exponential(0.8)
    table = table_for(mdp, d, n=4)
    xi = np.array([-1.0, 0.0, 0.5, 2.0])
    table.theta[0, 0, 0, 0, 0] = xi
    assert q_value(table, OceUtility.mean(), d, 0, 0, 0.0, 0) == pytest.approx(xi.mean())
    nu = project_to_quantiles(ReturnDistribution(xi, np.full(4, 0.25)), 4).to_distribution()
    f = OceUtility.mean_cvar(0.3, 0.4)
    assert q_value(table, f, d, 0, 0, 0.0, 0) == pytest.approx(nu.expectation_of_utility(f))
    table.theta[0, 0, 1, 0, 0] = 0.7
    f = OceUtility.entropic(-1.0)
    assert q_value(table, f, d, 0, 1, 0.0, 0) == pytest.approx(float(f(0.8 * 0.7)) / 0.8)


def test_td_update_zero_target_converges_to_zero():
    mdp = build_deterministic_chain([0.0], horizon=1)
    d = DiscountFunction.exponential(0.9)
    table = table_for(mdp, d)
    table.theta[0, 0, 0, 0, 0] = np.linspace(-2, 3, 8)
    streams = _Streams(d)
    for _ in range(2000):
        td_update(table, batch_of(1), OceUtility.mean(), streams, 0.5, visit_scale=100.0)
    # the last step size bounds the final oscillation around the target
    np.testing.assert_allclose(table.theta[0, 0, 0, 0, 0], 0.0, atol=0.5 / 20)


def test_td_update_point_target_fixed_point():
    mdp = build_deterministic_chain([1.5], horizon=1)
    d = DiscountFunction.exponential(0.9)
    table = table_for(mdp, d)
    table.theta[0, 0, 0, 0, 0] = 1.5
    before = table.theta.copy()
    td_update(table, batch_of(8, r=1.5), OceUtility.mean(), _Streams(d), 0.1)
    # the pinball subgradient at a point target is tau - 1 {u < 0} = tau, so step towards it only if off target
    assert np.all(table.theta[0, 0, 0, 0, 0] >= before[0, 0, 0, 0, 0])
    for _ in range(2000):
        td_update(table, batch_of(1, r=1.5), OceUtility.mean(), _Streams(d), 0.5, visit_scale=100.0)
    np.testing.assert_allclose(table.theta[0, 0, 0, 0, 0], 1.5, atol=0.5 / 20)


def test_uniform_behaviour_learns_a_coin():
    mdp = coin_mdp()
    d = DiscountFunction.exponential(1.0)
    f = OceUtility.mean()
    grid = StockGrid.exact([0.0])
    cfg = RigorConfig(n_quantiles=4, steps=4000, eps_start=1.0, eps_end=1.0, huber=0.0, lr=0.05,
                      lr_visit_scale=200.0, buffer=4000)
    res = train(mdp, f, d, grid, cfg)
    ref = dp_quantile_reference(mdp, f, d, grid, 4)
    w1, cells = learned_w1(res.table, ref, min_visits=1)
    assert cells == 1 and w1 < 0.05


def test_training_is_deterministic():
    mdp = coin_mdp(horizon=2)
    d = DiscountFunction.exponential(0.9)
    cfg = RigorConfig(steps=600, log_every=100, seed=5)
    a = train(mdp, OceUtility.mean(), d, StockGrid.exact([0.0]), cfg)
    b = train(mdp, OceUtility.mean(), d, StockGrid.exact([0.0]), cfg)
    assert a.log == b.log
    np.testing.assert_array_equal(a.table.theta, b.table.theta)
    c = train(mdp, OceUtility.mean(), d, StockGrid.exact([0.0]), RigorConfig(steps=600, log_every=100, seed=6))
    assert not np.array_equal(a.table.theta, c.table.theta)


def test_single_stream_basis_matches_exponential_training():
    rows = {(0, 0): [(0, 0.0, 0.5), (1, 1.0, 0.5)], (0, 1): [(1, 0.5, 1.0)],
            (1, 0): [(0, -0.5, 0.3), (1, 1.0, 0.7)], (1, 1): [(0, 0.0, 1.0)]}
    mdp = TabularMdp.stationary(Kernel.from_rows(2, 2, rows), horizon=3)
    f = OceUtility.mean()
    grid = StockGrid.invariant()
    cfg = RigorConfig(steps=800, seed=2)
    a = train(mdp, f, DiscountFunction.exponential(0.9), grid, cfg)
    b = train_multi_horizon(mdp, f, build_hyperbolic_basis(0.3, 1, 0.9), grid, cfg)
    np.testing.assert_array_equal(a.table.theta, b.table.theta)
    assert a.log == b.log


def test_streams_are_decoupled():
    mdp = coin_mdp(horizon=2)
    basis = HorizonBasis(np.array([0.5, 0.9]), np.array([0.5, 0.5]))
    d = basis.as_discount(10)
    streams = _Streams(d, basis)
    rng = np.random.default_rng(0)
    base = table_for(mdp, d, n=4, m=2)
    base.theta[:] = rng.normal(size=base.theta.shape)
    base.target[:] = rng.normal(size=base.target.shape)
    other = QuantileTable(base.theta.copy(), base.target.copy(), base.layers, base.mask, base.visits.copy(), 0.01)
    other.target[0] += 5.0
    batch = batch_of(6, r=1.0)
    td_update(base, batch, OceUtility.mean(), streams, 0.1)
    td_update(other, batch, OceUtility.mean(), streams, 0.1)
    np.testing.assert_array_equal(base.theta[1], other.theta[1])
    assert not np.array_equal(base.theta[0], other.theta[0])


def test_replay_buffer_is_a_ring():
    buf = ReplayBuffer(3)
    for i in range(5):
        buf.push(s=i, t=0, node=0, a=0, r=float(i), s2=0, node2=0, c2=0.0)
    assert len(buf) == 3
    assert sorted(buf._data["s"].tolist()) == [2, 3, 4]
    with pytest.raises(ValueError):
        ReplayBuffer(2).sample(np.random.default_rng(0), 1)


def test_config_validation():
    with pytest.raises(ValueError):
        RigorConfig(buffer=4, batch=8)
    with pytest.raises(ValueError):
        RigorConfig(alpha=0.0)
    with pytest.raises(ValueError, match="unknown rigor"):
        RigorConfig.from_config({"steps": 10, "nope": 1})
    cfg = RigorConfig(steps=100)
    assert cfg.epsilon(0) == 1.0 and cfg.epsilon(50) == cfg.eps_end
    assert RigorConfig(lr=0.1, lr_end=0.01, steps=10).learning_rate(10) == pytest.approx(0.01)
