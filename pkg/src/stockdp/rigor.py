"""Tabular quantile-regression TD learning on the stock-augmented state.

The table holds ``n`` quantile values per ``(state, t, stock node, action)``
(and per discount stream for the multi-horizon learner).  Stocks are binned
to the nearest node of the same :class:`StockGrid` layers the exact solver
uses, so learned and exact tables can be compared cell by cell.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .discounting import DiscountFunction
from .distributions import quantile_levels
from .environments import TabularMdp
from .finite_horizon import NonStationaryPolicy, StockGrid, _resolve_horizon
from .risk import OceUtility, argmax_lowest
from .rng import stream


@dataclass(frozen=True)
class RigorConfig:
    n_quantiles: int = 16
    steps: int = 50_000
    batch: int = 32
    buffer: int = 10_000
    lr: float = 0.05
    lr_end: float | None = None
    lr_visit_scale: float | None = None
    alpha: float = 0.01
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay: int | None = None
    huber: float = 0.1
    outer_period: int = 1000
    warmup: int | None = None
    log_every: int = 1000
    target_for_action: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_quantiles < 1:
            raise ValueError("n_quantiles must be positive")
        if self.steps < 1 or self.batch < 1 or self.buffer < self.batch:
            raise ValueError("need steps >= 1, batch >= 1 and buffer >= batch")
        if not self.lr > 0 or (self.lr_end is not None and not self.lr_end > 0):
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not (0.0 <= self.eps_end <= 1.0 and 0.0 <= self.eps_start <= 1.0):
            raise ValueError("epsilon must lie in [0, 1]")
        if self.huber < 0:
            raise ValueError("huber threshold must be non-negative")
        if self.outer_period < 1 or self.log_every < 1:
            raise ValueError("periods must be positive")

    @classmethod
    def from_config(cls, cfg) -> "RigorConfig":
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown rigor key(s): {sorted(unknown)}")
        return cls(**cfg)

    def epsilon(self, step: int) -> float:
        horizon = self.eps_decay if self.eps_decay is not None else max(self.steps // 2, 1)
        if step >= horizon:
            return self.eps_end
        return self.eps_start + (self.eps_end - self.eps_start) * step / horizon

    def learning_rate(self, step: int) -> float:
        if self.lr_end is None:
            return self.lr
        return self.lr + (self.lr_end - self.lr) * min(step / self.steps, 1.0)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of ``(s, t, node, a, r, s', node')`` transitions."""

    FIELDS = ("s", "t", "node", "a", "r", "s2", "node2", "c2")

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._data = {k: np.zeros(capacity, dtype=float if k in ("r", "c2") else np.int64) for k in self.FIELDS}
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, **row):
        i = self._next
        for k in self.FIELDS:
            self._data[k][i] = row[k]
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch: int) -> dict:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch)
        return {k: v[idx] for k, v in self._data.items()}


@dataclass
class QuantileTable:
    """Main and target quantile tables, shape ``(m, S, T + 1, N, A, n)``."""

    theta: np.ndarray
    target: np.ndarray
    layers: list
    mask: np.ndarray
    visits: np.ndarray
    alpha: float
    env_visits: np.ndarray | None = None

    def __post_init__(self):
        if self.env_visits is None:
            self.env_visits = np.zeros_like(self.visits)

    @classmethod
    def zeros(cls, mdp: TabularMdp, layers: list, n: int, m: int = 1, alpha: float = 0.01) -> "QuantileTable":
        T = len(layers) - 1
        N = max(l.size for l in layers)
        S, A = mdp.n_states, mdp.n_actions
        theta = np.zeros((m, S, T + 1, N, A, n))
        mask = np.stack([mdp.kernel(t).mask for t in range(T + 1)], axis=1)  # (S, T+1, A)
        return cls(theta, theta.copy(), layers, mask, np.zeros((S, T + 1, N, A), dtype=np.int64), alpha)

    @property
    def m(self) -> int:
        return self.theta.shape[0]

    @property
    def n(self) -> int:
        return self.theta.shape[-1]

    @property
    def horizon(self) -> int:
        return self.theta.shape[2] - 1

    def node(self, t, c) -> np.ndarray:
        """Nearest stock node at time ``t`` (vectorised over ``t`` and ``c``)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        c = np.atleast_1d(np.asarray(c, dtype=float))
        out = np.empty(np.broadcast(t, c).shape, dtype=np.int64)
        t, c = np.broadcast_arrays(t, c)
        for tt in np.unique(t):
            sel = t == tt
            layer = self.layers[tt]
            hi = np.clip(np.searchsorted(layer, c[sel]), 0, layer.size - 1)
            lo = np.clip(hi - 1, 0, layer.size - 1)
            out[sel] = np.where(np.abs(layer[lo] - c[sel]) <= np.abs(layer[hi] - c[sel]), lo, hi)
        return out

    def node_scalar(self, t: int, c: float) -> int:
        layer = self._lists[t]
        i = bisect.bisect_left(layer, c)
        if i == 0:
            return 0
        if i == len(layer):
            return i - 1
        return i - 1 if c - layer[i - 1] <= layer[i] - c else i

    @property
    def _lists(self):
        cached = getattr(self, "_layer_lists", None)
        if cached is None:
            cached = [l.tolist() for l in self.layers]
            self._layer_lists = cached
        return cached

    def smooth_target(self):
        self.target *= 1.0 - self.alpha
        self.target += self.alpha * self.theta

    def quantiles(self, s: int, t: int, c: float, a: int, stream_index: int = 0) -> np.ndarray:
        return self.theta[stream_index, s, t, int(self.node(t, c)[0]), a].copy()


def _scores(f: OceUtility, xi: np.ndarray, c: np.ndarray, weights: np.ndarray, d_t: np.ndarray) -> np.ndarray:
    """Objective per action from quantile arrays ``xi`` of shape ``(B, m, A, n)``."""
    g = np.einsum("bm,bman->ban", weights, xi)
    x = c[:, None, None] + g
    if f.scale_indifferent:
        return f(x).mean(axis=2)
    dt = d_t[:, None, None]
    return (f(dt * x) / dt).mean(axis=2)


def q_value(table: QuantileTable, f: OceUtility, d: DiscountFunction, s: int, t: int, c: float, a: int,
            weights=None) -> float:
    """``mean_j f(d_t c + d_t xi_j) / d_t`` with ``xi`` the (mixed) quantiles of one cell."""
    node = int(table.node(t, c)[0])
    w = np.ones(table.m) / table.m if weights is None else np.asarray(weights, dtype=float)
    xi = table.theta[:, s, t, node, a]
    g = w @ xi
    d_t = d.evaluate(t)
    if f.scale_indifferent:
        return float(np.mean(f(c + g)))
    return float(np.mean(f(d_t * c + d_t * g)) / d_t)


class _Streams:
    """Per-stream bootstrap factors and mixing weights for one or many discount streams."""

    def __init__(self, d_stock: DiscountFunction, basis=None):
        self.d = d_stock
        self.basis = basis

    @property
    def m(self) -> int:
        return 1 if self.basis is None else self.basis.m

    def scales(self, t: np.ndarray) -> np.ndarray:
        if self.basis is None:
            return self.d.factors(int(t.max()) + 1)[t][:, None]
        return np.broadcast_to(self.basis.gammas, (t.size, self.m))

    def weights(self, t: np.ndarray) -> np.ndarray:
        if self.basis is None:
            return np.ones((t.size, 1))
        return np.stack([self.basis.time_weights(int(tt)) for tt in t])

    def d_t(self, t: np.ndarray) -> np.ndarray:
        return self.d.values(int(t.max()))[t]


def _greedy(table, f, streams, s, t, node, c, source="main"):
    src = table.theta if source == "main" else table.target
    xi = np.moveaxis(src[:, s, t, node], 0, 1)  # (B, m, A, n)
    scores = _scores(f, xi, c, streams.weights(t), streams.d_t(t))
    scores = np.where(table.mask[s, np.minimum(t, table.horizon)], scores, -np.inf)
    return argmax_lowest(scores, axis=1), scores


def td_update(table: QuantileTable, batch: dict, f: OceUtility, streams: _Streams, learning_rate: float,
              huber: float = 0.0, target_for_action: bool = False, visit_scale: float | None = None) -> float:
    """One quantile-regression step on a batch; returns the mean pinball (or Huber) loss.

    With ``visit_scale`` the step for a cell is ``learning_rate / (1 + k / visit_scale)``
    where ``k`` counts that cell's earlier updates.
    """
    s, t, node, a, r = batch["s"], batch["t"], batch["node"], batch["a"], batch["r"]
    s2, node2 = batch["s2"], batch["node2"]
    t2 = t + 1
    T = table.horizon
    B, m, n = s.size, table.m, table.n
    c2 = batch["c2"]
    a2, _ = _greedy(table, f, streams, s2, t2, node2, c2, "target" if target_for_action else "main")
    xi_next = table.target[:, s2, t2, node2, a2]  # (m, B, n)
    xi_next = np.where((t2 >= T)[None, :, None], 0.0, xi_next)
    y = r[None, :, None] + streams.scales(t).T[:, :, None] * xi_next  # (m, B, n)
    theta = table.theta[:, s, t, node, a]  # (m, B, n)
    u = y[:, :, None, :] - theta[:, :, :, None]  # (m, B, j, l)
    tau = quantile_levels(n)[None, None, :, None]
    below = (u < 0).astype(float)
    weight = np.abs(tau - below)
    if huber > 0:
        au = np.abs(u)
        loss = weight * np.where(au <= huber, 0.5 * u * u, huber * (au - 0.5 * huber)) / huber
        grad = weight * np.clip(u, -huber, huber) / huber
    else:
        loss = u * (tau - below)
        grad = tau - below
    rate = np.full(B, learning_rate)
    if visit_scale is not None:
        rate = rate / (1.0 + table.visits[s, t, node, a] / visit_scale)
    step = rate[None, :, None] * grad.mean(axis=3)  # (m, B, j)
    for i in range(m):
        np.add.at(table.theta[i], (s, t, node, a), step[i])
    np.add.at(table.visits, (s, t, node, a), 1)
    return float(loss.mean(axis=3).sum(axis=2).mean())


@dataclass
class TrainResult:
    table: QuantileTable
    log: list
    initial_stock: float
    policy: NonStationaryPolicy
    config: RigorConfig
    inversions: int = 0

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["step", "loss", "epsilon", "objective"])
            for row in self.log:
                out.writerow([row[0], f"{row[1]:.17g}", f"{row[2]:.17g}", f"{row[3]:.17g}"])


def _greedy_one(table, f, streams, s, t, node, c) -> int:
    xi = table.theta[:, s, t, node]  # (m, A, n)
    g = xi[0] if table.m == 1 else np.tensordot(streams.weights(np.array([t]))[0], xi, axes=1)
    if f.scale_indifferent:
        scores = f(c + g).mean(axis=1)
    else:
        d_t = streams.d.evaluate(t)
        scores = f(d_t * c + d_t * g).mean(axis=1) / d_t
    scores = np.where(table.mask[s, t], scores, -np.inf)
    return int(argmax_lowest(scores))


def _outer(table, f, streams, s0, candidates) -> tuple[float, float]:
    k = candidates.size
    nodes = table.node(np.zeros(k, dtype=np.int64), candidates)
    _, scores = _greedy(table, f, streams, np.full(k, s0), np.zeros(k, dtype=np.int64), nodes, candidates)
    values = -candidates + scores.max(axis=1)
    best = int(argmax_lowest(values))
    return float(values[best]), float(candidates[best])


def greedy_policy(table: QuantileTable, f: OceUtility, streams: _Streams, grid: StockGrid,
                  initial_stock: float | None) -> NonStationaryPolicy:
    acts = []
    S = table.theta.shape[1]
    for t in range(table.horizon):
        layer = table.layers[t]
        N = layer.size
        s = np.repeat(np.arange(S), N)
        node = np.tile(np.arange(N), S)
        best, _ = _greedy(table, f, streams, s, np.full(s.size, t), node, layer[node])
        acts.append(best.reshape(S, N))
    return NonStationaryPolicy(acts, table.layers[: table.horizon], grid, initial_stock=initial_stock)


def _train(mdp: TabularMdp, f: OceUtility, streams: _Streams, grid: StockGrid, cfg: RigorConfig,
           T: int | None) -> TrainResult:
    T = _resolve_horizon(mdp, T)
    if T < 1:
        raise ValueError("training needs a horizon of at least one step")
    layers = grid.layers(mdp, streams.d, T)
    table = QuantileTable.zeros(mdp, layers, cfg.n_quantiles, streams.m, cfg.alpha)
    env_rng = stream(cfg.seed, 0)
    replay_rng = stream(cfg.seed, 1)
    act_rng = stream(cfg.seed, 2)
    buffer = ReplayBuffer(cfg.buffer)
    candidates = grid.initial if grid.mode != "invariant" else np.zeros(1)
    s0 = mdp.initial_state
    _, c0 = _outer(table, f, streams, s0, candidates)
    warmup = cfg.batch if cfg.warmup is None else max(cfg.warmup, cfg.batch)
    log = []
    s, t, c = s0, 0, c0
    losses = []
    for step in range(1, cfg.steps + 1):
        node = table.node_scalar(t, c)
        eps = cfg.epsilon(step)
        valid = np.flatnonzero(table.mask[s, t])
        if act_rng.random() < eps:
            a = int(valid[act_rng.integers(valid.size)])
        else:
            a = _greedy_one(table, f, streams, s, t, node, c)
        kernel = mdp.kernel(t)
        s2, r = kernel.sample(np.array([s]), np.array([a]), env_rng.random(1))
        s2, r = int(s2[0]), float(r[0])
        c2 = (c + r) / streams.d.one_step(t)
        node2 = table.node_scalar(t + 1, c2)
        buffer.push(s=s, t=t, node=node, a=a, r=r, s2=s2, node2=node2, c2=c2)
        table.env_visits[s, t, node, a] += 1
        if len(buffer) >= warmup:
            batch = buffer.sample(replay_rng, cfg.batch)
            losses.append(td_update(table, batch, f, streams, cfg.learning_rate(step), cfg.huber, cfg.target_for_action,
                                    cfg.lr_visit_scale))
            table.smooth_target()
        if step % cfg.outer_period == 0:
            _, c0 = _outer(table, f, streams, s0, candidates)
        if t + 1 >= T:
            # explore initial stocks with the same epsilon as actions
            start = c0
            if candidates.size > 1 and act_rng.random() < eps:
                start = float(candidates[act_rng.integers(candidates.size)])
            s, t, c = s0, 0, start
        else:
            s, t, c = s2, t + 1, c2
        if step % cfg.log_every == 0:
            value, _ = _outer(table, f, streams, s0, candidates)
            log.append((step, float(np.mean(losses)) if losses else math.nan, eps, value))
            losses = []
    _, c0 = _outer(table, f, streams, s0, candidates)
    policy = greedy_policy(table, f, streams, grid, c0)
    inversions = int(np.sum(np.diff(table.theta, axis=-1) < -1e-12))
    return TrainResult(table, log, c0, policy, cfg, inversions)


def train(mdp: TabularMdp, f: OceUtility, d: DiscountFunction, grid: StockGrid, config: RigorConfig | None = None,
          T: int | None = None) -> TrainResult:
    """Single-stream learner bootstrapping with ``d_hat_t``."""
    return _train(mdp, f, _Streams(d), grid, config or RigorConfig(), T)


def train_multi_horizon(mdp: TabularMdp, f: OceUtility, basis, grid: StockGrid, config: RigorConfig | None = None,
                        T: int | None = None) -> TrainResult:
    """One quantile stream per basis gamma; the stock moves with the aggregate factor."""
    T_ = _resolve_horizon(mdp, T)
    return _train(mdp, f, _Streams(basis.as_discount(max(T_ + 1, 16)), basis), grid, config or RigorConfig(), T)


def learned_w1(table: QuantileTable, reference: np.ndarray, min_visits: int = 1) -> tuple[float, int]:
    """Largest W1 between learned and reference quantile arrays over visited cells.

    A cell counts as visited once the behaviour policy has taken it
    ``min_visits`` times (replayed updates are not counted).

    ``reference`` has the table's shape without the stream axis, with NaN
    marking cells that have no reference.  Returns ``(max W1, cells compared)``.
    """
    learned = np.sort(table.theta[0], axis=-1)
    ref = np.sort(reference, axis=-1)
    visited = (table.env_visits >= min_visits) & ~np.isnan(ref[..., 0])
    if not visited.any():
        return math.nan, 0
    w1 = np.abs(learned - ref).mean(axis=-1)
    return float(w1[visited].max()), int(visited.sum())


def dp_quantile_reference(mdp: TabularMdp, f: OceUtility, d: DiscountFunction, grid: StockGrid, n: int,
                          T: int | None = None) -> np.ndarray:
    """Exact per-action return distributions projected to ``n`` quantiles.

    Shape ``(S, T + 1, N, A, n)`` on the exact solver's stock layers, NaN
    where an action is unavailable or a node does not exist.
    """
    from .finite_horizon import MERGE_EPS, DEFAULT_ATOM_CAP, StepStats, _propagate, backward_induction, candidate_pairs

    T = _resolve_horizon(mdp, T)
    _, value_table = backward_induction(mdp, f, d, grid, T=T)
    layers = [sl.stocks for sl in value_table.slices]
    N = max(l.size for l in layers)
    S, A = mdp.n_states, mdp.n_actions
    out = np.full((S, T + 1, N, A, n), np.nan)
    for t in range(T):
        stocks = layers[t]
        states, nodes, acts, _ = candidate_pairs(mdp, t, stocks.size)
        dist = _propagate(mdp, t, states, acts, stocks[nodes], value_table.slices[t + 1], d.one_step(t), grid,
                          MERGE_EPS, DEFAULT_ATOM_CAP, StepStats())
        out[states, t, nodes, acts] = dist.quantiles(n)
    return out
