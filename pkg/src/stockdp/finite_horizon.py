"""Stock-augmented distributional backward induction.

A value table stores, for every decision time ``t``, one return
distribution per ``(state, stock node)`` cell.  The stock ``c`` moves as
``c' = (c + r) / d_hat_t``, which keeps ``d_t (c_t + G_t)`` equal to the
time-0 outcome and lets a time-``t`` decision optimise the time-0 objective.

Three stock-grid modes are supported:

``exact``
    Node sets are the closure of the stock update over the reward support,
    started from the candidate initial stocks.  No interpolation error.
``interpolated``
    One fixed node set for all times.  Off-node lookups interpolate the
    quantile values of the two bracketing nodes; tables are kept as ``n``
    quantiles per cell and stocks leaving the node range are clamped (and
    counted).
``invariant``
    A single node.  Only valid for utilities whose greedy action does not
    depend on the stock (mean and entropic).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ._ragged import Ragged, group_canonicalize, project_large, ragged_w1, segment_positions
from .discounting import DiscountFunction
from .distributions import MERGE_EPS, ReturnDistribution
from .environments import TabularMdp
from .risk import OceUtility, argmax_lowest, objective_terms

DEFAULT_ATOM_CAP = 4096
MODES = ("exact", "interpolated", "invariant")


def stock_update(c, r, d: DiscountFunction, t: int):
    return (c + r) / d.one_step(t)


def anytime_outcome(c_t, g, d: DiscountFunction, t: int):
    """Time-0 outcome ``c_0 + G_0`` implied by the time-``t`` pair."""
    return d.evaluate(t) * (c_t + g)


def _merge_sorted(values: np.ndarray, tol: float) -> np.ndarray:
    values = np.sort(np.asarray(values, dtype=float))
    if values.size == 0:
        return values
    keep = np.ones(values.size, dtype=bool)
    keep[1:] = np.diff(values) > tol * (1.0 + np.abs(values[1:]))
    return values[keep]


@dataclass(frozen=True)
class StockGrid:
    mode: str
    initial: np.ndarray
    n_quantiles: int = 64
    tol: float = 1e-9
    max_nodes: int = 1_000_000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown stock grid mode {self.mode!r}; expected one of {MODES}")
        nodes = np.unique(np.asarray(self.initial, dtype=float).ravel())
        if nodes.size == 0:
            raise ValueError("stock grid needs at least one node")
        if not np.all(np.isfinite(nodes)):
            raise ValueError("stock nodes must be finite")
        object.__setattr__(self, "initial", nodes)

    @classmethod
    def exact(cls, initial, tol: float = 1e-9, max_nodes: int = 1_000_000) -> "StockGrid":
        return cls("exact", initial, tol=tol, max_nodes=max_nodes)

    @classmethod
    def interpolated(cls, nodes, n_quantiles: int = 64) -> "StockGrid":
        return cls("interpolated", nodes, n_quantiles=n_quantiles)

    @classmethod
    def invariant(cls, initial=(0.0,)) -> "StockGrid":
        return cls("invariant", initial)

    @classmethod
    def uniform(cls, lo: float, hi: float, count: int, mode: str = "exact", **kw) -> "StockGrid":
        return cls(mode, np.linspace(lo, hi, count), **kw)

    @property
    def spacing(self) -> float:
        """Largest gap between adjacent initial stocks (0 for a single node)."""
        return float(np.max(np.diff(self.initial))) if self.initial.size > 1 else 0.0

    def layers(self, mdp: TabularMdp, d: DiscountFunction, T: int) -> list[np.ndarray]:
        if self.mode == "invariant":
            return [np.zeros(1)] * (T + 1)
        if self.mode == "interpolated":
            return [self.initial] * (T + 1)
        out = [self.initial]
        for t in range(T):
            support = mdp.kernel(t).reward_support()
            nxt = (out[-1][:, None] + support[None, :]) / d.one_step(t)
            merged = _merge_sorted(nxt.ravel(), self.tol)
            if merged.size > self.max_nodes:
                raise ValueError(
                    f"exact stock grid grew to {merged.size} nodes at t={t + 1}; "
                    "use fewer initial stocks or an interpolated grid"
                )
            out.append(merged)
        return out

    def locate(self, layer: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Node index for each stock value (nearest node; exact mode checks the match)."""
        c = np.asarray(c, dtype=float)
        if self.mode == "invariant" or layer.size == 1 and self.mode != "exact":
            return np.zeros(c.shape, dtype=np.int64)
        hi = np.clip(np.searchsorted(layer, c), 0, layer.size - 1)
        lo = np.clip(hi - 1, 0, layer.size - 1)
        pick = np.where(np.abs(layer[lo] - c) <= np.abs(layer[hi] - c), lo, hi)
        if self.mode == "exact":
            gap = np.abs(layer[pick] - c)
            bad = gap > 10.0 * self.tol * (1.0 + np.abs(c))
            if np.any(bad):
                raise ValueError(f"stock {c[bad].ravel()[0]!r} is not on the exact grid")
        return pick

    def bracket(self, layer: np.ndarray, c: np.ndarray):
        """``(lower node, weight on upper node, number clamped)`` for interpolation."""
        c = np.asarray(c, dtype=float)
        if layer.size == 1:
            return np.zeros(c.shape, dtype=np.int64), np.zeros(c.shape), 0
        outside = (c < layer[0] - self.tol) | (c > layer[-1] + self.tol)
        cc = np.clip(c, layer[0], layer[-1])
        lo = np.clip(np.searchsorted(layer, cc, side="right") - 1, 0, layer.size - 2)
        lam = (cc - layer[lo]) / (layer[lo + 1] - layer[lo])
        return lo, np.clip(lam, 0.0, 1.0), int(outside.sum())

    def to_config(self) -> dict:
        return {"mode": self.mode, "initial": self.initial.tolist(), "n_quantiles": self.n_quantiles}


@dataclass
class TimeSlice:
    """Distributions for every ``(state, node)`` cell at one decision time."""

    t: int
    stocks: np.ndarray
    dist: Ragged
    n_states: int

    @property
    def n_nodes(self) -> int:
        return self.stocks.size

    def cell(self, s: int, node: int) -> int:
        return s * self.n_nodes + node

    def distribution(self, s: int, node: int) -> ReturnDistribution:
        return self.dist.cell(self.cell(s, node))

    def quantile_values(self) -> np.ndarray:
        counts = self.dist.counts
        if counts.size and np.all(counts == counts[0]):
            return self.dist.values.reshape(self.dist.n_cells, counts[0])
        raise ValueError("slice is not stored as equal-count quantiles")

    def objective(self, f: OceUtility, d_t: float) -> np.ndarray:
        c = np.tile(self.stocks, self.n_states)
        terms = objective_terms(f, self.dist.values, np.repeat(c, self.dist.counts), d_t)
        return self.dist.expect(terms).reshape(self.n_states, self.n_nodes)


def terminal_slice(mdp: TabularMdp, grid: StockGrid, stocks: np.ndarray, T: int, terminal: Ragged | None = None):
    n_cells = mdp.n_states * stocks.size
    if terminal is None:
        dist = Ragged.point(n_cells)
    else:
        if terminal.n_cells != mdp.n_states:
            raise ValueError("terminal table must hold one distribution per state")
        dist = terminal.tile(stocks.size)
    if grid.mode == "interpolated":
        dist = Ragged.from_quantiles(dist.quantiles(grid.n_quantiles))
    return TimeSlice(T, stocks, dist, mdp.n_states)


@dataclass
class StepStats:
    projection_error: float = 0.0
    clamped: int = 0


def _propagate(mdp, t, states, actions, c, nxt: TimeSlice, hat, grid: StockGrid, eps, atom_cap, stats: StepStats,
               scale=None):
    """Distribution of ``r + scale * G'`` for each requested ``(state, action, stock)`` pair.

    The stock always moves with ``hat``; ``scale`` defaults to it.
    """
    scale = hat if scale is None else scale
    kernel = mdp.kernel(t)
    pair, s2, r, p = kernel.expand(states, actions)
    n_pairs = states.size
    c2 = (c[pair] + r) / hat
    n2 = nxt.n_nodes
    if grid.mode == "interpolated":
        lo, lam, clamped = grid.bracket(nxt.stocks, c2)
        stats.clamped += clamped
        q = nxt.quantile_values()
        hi = np.minimum(lo + 1, n2 - 1)
        mixed = (1.0 - lam)[:, None] * q[s2 * n2 + lo] + lam[:, None] * q[s2 * n2 + hi]
        n = q.shape[1]
        vals = (r[:, None] + scale * mixed).ravel()
        probs = np.repeat(p / n, n)
        exact = group_canonicalize(np.repeat(pair, n), vals, probs, n_pairs, eps)
        out = Ragged.from_quantiles(exact.quantiles(grid.n_quantiles))
        stats.projection_error = max(stats.projection_error, float(np.max(ragged_w1(exact, out), initial=0.0)))
        return out
    node = grid.locate(nxt.stocks, c2)
    cell = s2 * n2 + node
    counts = nxt.dist.counts[cell]
    pos = segment_positions(nxt.dist.offsets[cell], counts)
    vals = np.repeat(r, counts) + scale * nxt.dist.values[pos]
    probs = np.repeat(p, counts) * nxt.dist.probs[pos]
    out = group_canonicalize(np.repeat(pair, counts), vals, probs, n_pairs, eps)
    out, err = project_large(out, atom_cap, atom_cap)
    stats.projection_error = max(stats.projection_error, err)
    return out


def _check_mode(f: OceUtility, grid: StockGrid):
    if grid.mode == "invariant" and f.kind not in ("mean", "entropic") and not f.risk_neutral:
        raise ValueError(
            f"the invariant stock grid needs a stock-independent greedy action; {f.kind} depends on the stock"
        )


def candidate_pairs(mdp: TabularMdp, t: int, n_nodes: int):
    """Every available ``(state, node, action)`` triple in ``(s, node, a)`` order."""
    S, A = mdp.n_states, mdp.n_actions
    mask = mdp.kernel(t).mask
    s_full = np.repeat(np.arange(S), n_nodes * A)
    node_full = np.tile(np.repeat(np.arange(n_nodes), A), S)
    a_full = np.tile(np.arange(A), S * n_nodes)
    valid = mask[s_full, a_full]
    return s_full[valid], node_full[valid], a_full[valid], valid


def choose_actions(scores: np.ndarray, valid: np.ndarray, S: int, n: int, A: int):
    """Greedy action per cell, the matching pair index, and the full score cube."""
    q = np.full(S * n * A, -np.inf)
    q[valid] = scores
    q = q.reshape(S, n, A)
    best = argmax_lowest(q, axis=2)
    index = np.full(S * n * A, -1, dtype=np.int64)
    index[valid] = np.arange(int(valid.sum()))
    chosen = index[np.arange(S * n) * A + best.ravel()]
    return best, chosen, q


def bellman_apply(mdp: TabularMdp, actions: np.ndarray, eta_next: TimeSlice, d: DiscountFunction, t: int,
                  grid: StockGrid, stocks: np.ndarray, eps: float = MERGE_EPS,
                  atom_cap: int = DEFAULT_ATOM_CAP, stats: StepStats | None = None) -> TimeSlice:
    """Apply the time-``t`` Bellman operator of a fixed decision rule.

    ``actions`` has shape ``(n_states, len(stocks))``.
    """
    stats = stats if stats is not None else StepStats()
    n = stocks.size
    actions = np.asarray(actions, dtype=np.int64).reshape(mdp.n_states, n)
    states = np.repeat(np.arange(mdp.n_states), n)
    flat = actions.ravel()
    mask = mdp.kernel(t).mask
    if np.any(flat < 0) or np.any(flat >= mdp.n_actions) or not np.all(mask[states, np.clip(flat, 0, mdp.n_actions - 1)]):
        raise ValueError(f"policy selects an unavailable action at t={t}")
    c = np.tile(stocks, mdp.n_states)
    dist = _propagate(mdp, t, states, flat, c, eta_next, d.one_step(t), grid, eps, atom_cap, stats)
    return TimeSlice(t, stocks, dist, mdp.n_states)


def greedy_step(mdp: TabularMdp, eta_next: TimeSlice, f: OceUtility, d: DiscountFunction, t: int,
                grid: StockGrid, stocks: np.ndarray, eps: float = MERGE_EPS,
                atom_cap: int = DEFAULT_ATOM_CAP, stats: StepStats | None = None):
    """Greedy decision rule at time ``t``.

    Returns ``(actions, slice, q)`` where ``q[s, node, a]`` is the objective
    of taking ``a`` (``-inf`` if unavailable).  Ties go to the lowest action.
    """
    stats = stats if stats is not None else StepStats()
    S, n = mdp.n_states, stocks.size
    states, nodes, acts, valid = candidate_pairs(mdp, t, n)
    c = stocks[nodes]
    table = _propagate(mdp, t, states, acts, c, eta_next, d.one_step(t), grid, eps, atom_cap, stats)
    terms = objective_terms(f, table.values, np.repeat(c, table.counts), d.evaluate(t))
    best, chosen, q = choose_actions(table.expect(terms), valid, S, n, mdp.n_actions)
    return best, TimeSlice(t, stocks, table.take(chosen), S), q


@dataclass
class NonStationaryPolicy:
    """Decision rules ``actions[t][s, node]`` for ``t < len(actions)``, then an optional stationary tail."""

    actions: list
    stocks: list
    grid: StockGrid
    tail: np.ndarray | None = None
    switch: int | None = None
    initial_stock: float | None = None

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def actions_for(self, t: int, states, stocks) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        if self.tail is not None and (self.switch is None or t >= self.switch):
            return np.asarray(self.tail)[states]
        if t >= len(self.actions):
            raise ValueError(f"policy is undefined at t={t}")
        node = self.grid.locate(self.stocks[t], np.broadcast_to(np.asarray(stocks, dtype=float), states.shape))
        return self.actions[t][states, node]

    def action(self, t: int, s: int, c: float) -> int:
        return int(self.actions_for(t, np.array([s]), np.array([c]))[0])

    def rows(self):
        for t, (acts, stocks) in enumerate(zip(self.actions, self.stocks)):
            for s in range(acts.shape[0]):
                for j, c in enumerate(stocks):
                    yield t, s, float(c), int(acts[s, j])


@dataclass
class ValueTable:
    slices: list
    objectives: list
    q: list
    f: OceUtility
    d: DiscountFunction
    grid: StockGrid
    projection_errors: list = field(default_factory=list)
    clamped: int = 0

    @property
    def horizon(self) -> int:
        return len(self.slices) - 1

    def node(self, t: int, c: float) -> int:
        return int(self.grid.locate(self.slices[t].stocks, np.array([c]))[0])

    def distribution(self, t: int, s: int, c: float) -> ReturnDistribution:
        return self.slices[t].distribution(s, self.node(t, c))

    def objective(self, t: int, s: int, c: float) -> float:
        if self.grid.mode == "invariant":
            from .risk import objective as _objective
            return _objective(self.f, self.distribution(t, s, c), c, self.d.evaluate(t))
        return float(self.objectives[t][s, self.node(t, c)])

    def initial_stock(self, s0: int) -> tuple[float, float]:
        """Outer OCE step: ``max_c0 {-c0 + F(eta_0(s0, c0))}``, ties to the smallest ``c0``."""
        if self.grid.mode == "invariant":
            nu = self.slices[0].distribution(s0, 0)
            c0 = self.grid.initial
            scores = -c0 + self.f(c0[:, None] + nu.values[None, :]) @ nu.probs
        else:
            c0 = self.slices[0].stocks
            scores = -c0 + self.objectives[0][s0]
        best = int(argmax_lowest(scores))
        return float(scores[best]), float(c0[best])

    def rows(self, policy: NonStationaryPolicy | None = None):
        for t, sl in enumerate(self.slices):
            obj = self.objectives[t]
            for s in range(sl.n_states):
                for j, c in enumerate(sl.stocks):
                    a = -1
                    if policy is not None and t < policy.horizon:
                        a = int(policy.actions[t][s, j])
                    yield t, s, float(c), a, float(obj[s, j])

    def write_csv(self, path, policy: NonStationaryPolicy | None = None):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "state", "stock", "action", "objective"])
            for t, s, c, a, v in self.rows(policy):
                w.writerow([t, s, f"{c:.17g}", a, f"{v:.17g}"])


def _resolve_horizon(mdp: TabularMdp, T: int | None) -> int:
    if T is None:
        if mdp.horizon is None:
            raise ValueError("the MDP has no horizon; pass T explicitly")
        T = mdp.horizon
    if T < 0:
        raise ValueError("horizon must be non-negative")
    return int(T)


def backward_induction(mdp: TabularMdp, f: OceUtility, d: DiscountFunction, grid: StockGrid,
                       T: int | None = None, terminal: Ragged | None = None, eps: float = MERGE_EPS,
                       atom_cap: int = DEFAULT_ATOM_CAP, layers: list | None = None):
    """Greedy backward induction from ``eta_T = delta_0`` (or ``terminal``)."""
    T = _resolve_horizon(mdp, T)
    _check_mode(f, grid)
    layers = layers if layers is not None else grid.layers(mdp, d, T)
    eta = terminal_slice(mdp, grid, layers[T], T, terminal)
    slices = [None] * (T + 1)
    objectives = [None] * (T + 1)
    qs = [None] * T
    acts = [None] * T
    errors = [0.0] * T
    slices[T] = eta
    objectives[T] = eta.objective(f, d.evaluate(T))
    clamped = 0
    for t in range(T - 1, -1, -1):
        stats = StepStats()
        acts[t], eta, qs[t] = greedy_step(mdp, eta, f, d, t, grid, layers[t], eps, atom_cap, stats)
        slices[t] = eta
        objectives[t] = np.max(qs[t], axis=2)
        errors[t] = stats.projection_error
        clamped += stats.clamped
    policy = NonStationaryPolicy(acts, layers[:T], grid)
    table = ValueTable(slices, objectives, qs, f, d, grid, errors, clamped)
    if T > 0 or grid.mode != "invariant":
        _, policy.initial_stock = table.initial_stock(mdp.initial_state)
    return policy, table


def policy_evaluation(mdp: TabularMdp, policy: NonStationaryPolicy, d: DiscountFunction, grid: StockGrid,
                      T: int | None = None, terminal: Ragged | None = None, eps: float = MERGE_EPS,
                      atom_cap: int = DEFAULT_ATOM_CAP, layers: list | None = None) -> list:
    """Slices ``eta^pi_t`` for ``t = 0..T`` under a fixed (possibly composite) policy."""
    T = _resolve_horizon(mdp, T)
    layers = layers if layers is not None else grid.layers(mdp, d, T)
    eta = terminal_slice(mdp, grid, layers[T], T, terminal)
    out = [None] * (T + 1)
    out[T] = eta
    for t in range(T - 1, -1, -1):
        stocks = layers[t]
        states = np.repeat(np.arange(mdp.n_states), stocks.size)
        acts = policy.actions_for(t, states, np.tile(stocks, mdp.n_states))
        eta = bellman_apply(mdp, acts.reshape(mdp.n_states, stocks.size), eta, d, t, grid, stocks, eps, atom_cap)
        out[t] = eta
    return out
