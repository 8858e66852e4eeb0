"""Discount functions approximated by a weighted sum of exponentials.

A :class:`HorizonBasis` holds ``gamma_1 < ... < gamma_m`` and weights
``w_i`` with ``d~_t = sum_i w_i gamma_i**t``.  The solver keeps one return
distribution per ``gamma_i`` (each bootstrapped with its own ``gamma_i``)
while a single stock moves with the one-step factor of ``d~``.  Actions are
scored on the comonotone mixture ``sum_i w_{i,t} G_i``.

Three selection modes:

* ``time_consistent``: weights ``w_{i,t} = w_i gamma_i**t / d~_t`` and the
  time-``t`` table, so every decision optimises the time-0 objective.
* ``time_aware_inconsistent``: the time-``t`` table mixed with the base
  weights, as if the clock restarted at every step.
* ``time_inconsistent``: a stationary table mixed with the base weights.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ._ragged import Ragged, comonotone_combine, group_canonicalize
from .discounting import DEFAULT_MAX_HORIZON, DiscountFunction
from .distributions import MERGE_EPS
from .environments import Kernel, TabularMdp
from .finite_horizon import (
    DEFAULT_ATOM_CAP,
    NonStationaryPolicy,
    StepStats,
    StockGrid,
    TimeSlice,
    _propagate,
    _resolve_horizon,
    candidate_pairs,
    choose_actions,
    terminal_slice,
)
from .risk import OceUtility, argmax_lowest, objective, objective_terms

SELECTION_MODES = ("time_consistent", "time_inconsistent", "time_aware_inconsistent")


@dataclass(frozen=True)
class HorizonBasis:
    gammas: np.ndarray
    base_weights: np.ndarray
    normalizer: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=float).ravel()
        w = np.asarray(self.base_weights, dtype=float).ravel()
        if g.size == 0 or g.shape != w.shape:
            raise ValueError("need matching, non-empty gammas and weights")
        if np.any(g <= 0.0) or np.any(g >= 1.0):
            raise ValueError("basis gammas must lie in (0, 1)")
        if np.any(np.diff(g) <= 0.0):
            raise ValueError("basis gammas must be strictly increasing")
        if np.any(w < 0.0) or not w.sum() > 0.0:
            raise ValueError("basis weights must be non-negative and not all zero")
        total = float(w.sum())
        object.__setattr__(self, "gammas", g)
        object.__setattr__(self, "base_weights", w / total)
        object.__setattr__(self, "normalizer", float(self.normalizer) * total)

    @property
    def m(self) -> int:
        return self.gammas.size

    def discount_values(self, horizon: int) -> np.ndarray:
        """``d~_0, ..., d~_horizon``."""
        t = np.arange(horizon + 1, dtype=float)
        return self.base_weights @ self.gammas[:, None] ** t[None, :]

    def time_weights(self, t: int) -> np.ndarray:
        """``w_i gamma_i**t / d~_t``, computed in log space."""
        if t < 0:
            raise ValueError("time must be non-negative")
        with np.errstate(divide="ignore"):
            logs = np.log(self.base_weights) + t * np.log(self.gammas)
        w = np.exp(logs - logs.max())
        return w / w.sum()

    def as_discount(self, max_horizon: int = DEFAULT_MAX_HORIZON) -> DiscountFunction:
        if self.m == 1:
            return DiscountFunction.exponential(float(self.gammas[0]), max_horizon)
        return DiscountFunction.exponential_mixture(self.gammas, self.base_weights, max_horizon)

    def max_relative_error(self, d: DiscountFunction, horizon: int = 200) -> float:
        approx = self.as_discount(horizon).values(horizon)
        target = d.values(horizon)
        return float(np.max(np.abs(approx - target) / target))

    def rows(self):
        for g, w in zip(self.gammas, self.base_weights):
            yield float(g), float(w)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["gamma", "weight"])
            for g, w in self.rows():
                out.writerow([f"{g:.17g}", f"{w:.17g}"])

    def to_config(self) -> dict:
        return {"gammas": self.gammas.tolist(), "weights": self.base_weights.tolist(), **self.params}


def spacing_base(k: float, m: int, gamma_max: float) -> float:
    """``b`` in ``(0, 1)`` with ``(1 - b**m)**k == gamma_max``."""
    if not k > 0.0:
        raise ValueError("k must be positive")
    if m < 1:
        raise ValueError("m must be at least 1")
    if not 0.0 < gamma_max < 1.0:
        raise ValueError("gamma_max must lie in (0, 1)")
    inner = -math.expm1(math.log(gamma_max) / k)
    b = inner ** (1.0 / m)
    if not 0.0 < b < 1.0:
        raise ValueError(f"no spacing base in (0, 1) for k={k}, m={m}, gamma_max={gamma_max}")
    return b


def build_hyperbolic_basis(k: float, m: int, gamma_max: float) -> HorizonBasis:
    """Power-law spaced basis approximating ``1 / (1 + k t)``.

    With ``x_i = 1 - b**i`` (``i = 1..m``) the Bellman gammas are
    ``x_i**k`` and the weights are the gaps ``x_{i+1} - x_i`` with
    ``x_{m+1} = 1``, i.e. a left Riemann sum of ``1 / (1 + k t) =
    int_0^1 x**(k t) dx`` after the change of variable ``gamma = x**k``.
    """
    b = spacing_base(k, m, gamma_max)
    x = 1.0 - b ** np.arange(1, m + 1, dtype=float)
    gammas = x**k
    gammas[-1] = gamma_max
    weights = np.diff(np.append(x, 1.0))
    return HorizonBasis(gammas, weights, params={"k": k, "m": m, "gamma_max": gamma_max, "b": b})


# ----------------------------------------------------------------------
# tables and solvers


@dataclass
class StationaryMultiTable:
    """Per-gamma quantile arrays ``values[i, s, :]`` and the stationary rule."""

    values: np.ndarray
    policy: np.ndarray
    iterations: int
    residual: float


@dataclass
class MultiValueTable:
    mdp: TabularMdp
    basis: HorizonBasis
    f: OceUtility
    d: DiscountFunction
    grid: StockGrid
    mode: str
    layers: list
    slices: list
    stationary: StationaryMultiTable | None = None
    projection_errors: list = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.slices) - 1

    def component(self, t: int, i: int) -> TimeSlice:
        return self.slices[t][i]

    def aggregate(self, t: int, s: int, c: float, weights=None):
        """Comonotone mixture ``sum_i w_i G_i`` at one cell."""
        node = int(self.grid.locate(self.layers[t], np.array([c]))[0])
        cell = s * self.layers[t].size + node
        w = self.basis.time_weights(t) if weights is None else np.asarray(weights, dtype=float)
        tables = [sl.dist.take([cell]) for sl in self.slices[t]]
        return comonotone_combine(tables, w).cell(0)

    def objective(self, t: int, s: int, c: float) -> float:
        return objective(self.f, self.aggregate(t, s, c), c, self.d.evaluate(t))

    def initial_stock(self, s0: int) -> tuple[float, float]:
        """Outer OCE step on the aggregate return, ties to the smallest ``c0``."""
        c0 = self.grid.initial if self.grid.mode == "invariant" else self.layers[0]
        if self.grid.mode == "invariant":
            nu = self.aggregate(0, s0, float(c0[0]))
            scores = -c0 + self.f(c0[:, None] + nu.values[None, :]) @ nu.probs
        else:
            scores = np.array([-c + self.objective(0, s0, c) for c in c0])
        best = int(argmax_lowest(scores))
        return float(scores[best]), float(c0[best])


def _check_selection_mode(mode: str):
    if mode not in SELECTION_MODES:
        raise ValueError(f"unknown selection mode {mode!r}; expected one of {SELECTION_MODES}")


def _mix_scores(f, tables, weights, c, d_t):
    mix = comonotone_combine(tables, weights)
    terms = objective_terms(f, mix.values, np.repeat(c, mix.counts), d_t)
    return mix.expect(terms)


def _step(mdp, basis, d, f, grid, t, stocks, nxt, mode, eps, atom_cap, stats, fixed=None):
    S, n = mdp.n_states, stocks.size
    if fixed is None:
        states, nodes, acts, valid = candidate_pairs(mdp, t, n)
    else:
        states = np.repeat(np.arange(S), n)
        nodes = np.tile(np.arange(n), S)
        acts = fixed[states]
    c = stocks[nodes]
    hat = d.one_step(t)
    tables = [
        _propagate(mdp, t, states, acts, c, nxt[i], hat, grid, eps, atom_cap, stats, scale=float(g))
        for i, g in enumerate(basis.gammas)
    ]
    if fixed is not None:
        return acts.reshape(S, n), [TimeSlice(t, stocks, tab, S) for tab in tables]
    if mode == "time_consistent":
        scores = _mix_scores(f, tables, basis.time_weights(t), c, d.evaluate(t))
    else:
        scores = _mix_scores(f, tables, basis.base_weights, c, 1.0)
    best, chosen, _ = choose_actions(scores, valid, S, n, mdp.n_actions)
    return best, [TimeSlice(t, stocks, tab.take(chosen), S) for tab in tables]


def stationary_multi_table(mdp: TabularMdp, f: OceUtility, basis: HorizonBasis, n_quantiles: int = 32,
                           tol: float = 1e-9, max_iter: int = 10_000, eps: float = MERGE_EPS) -> StationaryMultiTable:
    """Stationary per-gamma tables for the reset-every-step agent.

    Value iteration on ``mdp.kernel(0)``: each state keeps ``m`` quantile
    arrays, and the action maximising the objective of the base-weight
    mixture is used to refresh all of them.  Only stock-independent
    utilities are supported, since a stationary rule cannot see the stock.
    """
    if f.kind not in ("mean", "entropic"):
        raise ValueError(f"the stationary baseline needs a stock-independent utility, got {f.kind}")
    kernel = mdp.kernel(0)
    S, A, m = mdp.n_states, mdp.n_actions, basis.m
    if f.kind == "mean":
        return _stationary_mean(kernel, basis, tol, max_iter)
    sa_states, _, sa_acts, valid = candidate_pairs(mdp, 0, 1)
    pair, s2, r, p = kernel.expand(sa_states, sa_acts)
    n = n_quantiles
    q = np.zeros((m, S, n))
    policy = np.zeros(S, dtype=np.int64)
    residual = math.inf
    it = 0
    while it < max_iter and residual > tol:
        it += 1
        tables = []
        for i, g in enumerate(basis.gammas):
            vals = (r[:, None] + g * q[i, s2]).ravel()
            probs = np.repeat(p / n, n)
            exact = group_canonicalize(np.repeat(pair, n), vals, probs, sa_states.size, eps)
            tables.append(Ragged.from_quantiles(exact.quantiles(n)))
        scores = _mix_scores(f, tables, basis.base_weights, np.zeros(sa_states.size), 1.0)
        best, chosen, _ = choose_actions(scores, valid, S, 1, A)
        new = np.stack([tab.values.reshape(-1, n)[chosen] for tab in tables])
        residual = float(np.max(np.abs(new - q)))
        q = new
        policy = best[:, 0]
    return StationaryMultiTable(q, policy, it, residual)


def _stationary_mean(kernel: Kernel, basis: HorizonBasis, tol: float, max_iter: int) -> StationaryMultiTable:
    S, A = kernel.n_states, kernel.n_actions
    states = np.repeat(np.arange(S), A)
    acts = np.tile(np.arange(A), S)
    valid = kernel.mask.ravel()
    pair, s2, r, p = kernel.expand(states[valid], acts[valid])
    n_pairs = int(valid.sum())
    r_bar = np.bincount(pair, r * p, minlength=n_pairs)
    v = np.zeros((basis.m, S))
    residual, it = math.inf, 0
    policy = np.zeros(S, dtype=np.int64)
    while it < max_iter and residual > tol:
        it += 1
        cont = np.stack([np.bincount(pair, p * v[i, s2], minlength=n_pairs) for i in range(basis.m)])
        per_gamma = r_bar[None, :] + basis.gammas[:, None] * cont
        best, chosen, _ = choose_actions(basis.base_weights @ per_gamma, valid, S, 1, A)
        new = per_gamma[:, chosen]
        residual = float(np.max(np.abs(new - v)))
        v = new
        policy = best[:, 0]
    return StationaryMultiTable(v[:, :, None], policy, it, residual)


def multi_backward_induction(mdp: TabularMdp, f: OceUtility, basis: HorizonBasis, grid: StockGrid,
                             T: int | None = None, mode: str = "time_consistent", eps: float = MERGE_EPS,
                             atom_cap: int = DEFAULT_ATOM_CAP, n_stationary: int = 32,
                             stationary_tol: float = 1e-9):
    """Per-gamma backward induction with one aggregate stock.

    Returns ``(policy, table)``.  For ``time_inconsistent`` the policy is the
    stationary rule and the table holds its per-gamma evaluation.
    """
    _check_selection_mode(mode)
    T = _resolve_horizon(mdp, T)
    d = basis.as_discount(max(T + 1, 16))
    if grid.mode == "invariant" and f.kind not in ("mean", "entropic"):
        raise ValueError(f"the invariant stock grid needs a stock-independent greedy action; {f.kind} depends on the stock")
    layers = grid.layers(mdp, d, T)
    stationary = None
    fixed = None
    if mode == "time_inconsistent":
        stationary = stationary_multi_table(mdp, f, basis, n_stationary, stationary_tol)
        fixed = stationary.policy
    nxt = [terminal_slice(mdp, grid, layers[T], T) for _ in range(basis.m)]
    slices = [None] * (T + 1)
    slices[T] = nxt
    acts = [None] * T
    errors = [0.0] * T
    for t in range(T - 1, -1, -1):
        stats = StepStats()
        acts[t], nxt = _step(mdp, basis, d, f, grid, t, layers[t], nxt, mode, eps, atom_cap, stats, fixed)
        slices[t] = nxt
        errors[t] = stats.projection_error
    table = MultiValueTable(mdp, basis, f, d, grid, mode, layers, slices, stationary, errors)
    if fixed is not None:
        policy = NonStationaryPolicy(acts, layers[:T], grid, tail=fixed, switch=0)
    else:
        policy = NonStationaryPolicy(acts, layers[:T], grid)
    if T > 0 or grid.mode != "invariant":
        _, policy.initial_stock = table.initial_stock(mdp.initial_state)
    return policy, table


def select_action(mode: str, table: MultiValueTable, basis: HorizonBasis, s: int, c: float, t: int,
                  f: OceUtility) -> int:
    """Greedy action at ``(s, c, t)`` under the given selection mode."""
    _check_selection_mode(mode)
    mdp = table.mdp
    if mode == "time_inconsistent":
        if table.stationary is None:
            table.stationary = stationary_multi_table(mdp, f, basis)
        st = table.stationary
        kernel = mdp.kernel(0)
        acts = np.flatnonzero(kernel.mask[s])
        pair, s2, r, p = kernel.expand(np.full(acts.size, s), acts)
        per_gamma = []
        for i, g in enumerate(basis.gammas):
            n = st.values.shape[2]
            vals = (r[:, None] + g * st.values[i, s2]).ravel()
            per_gamma.append(group_canonicalize(np.repeat(pair, n), vals, np.repeat(p / n, n), acts.size))
        scores = _mix_scores(f, per_gamma, basis.base_weights, np.zeros(acts.size), 1.0)
        return int(acts[argmax_lowest(scores)])
    if not 0 <= t < table.horizon:
        raise ValueError(f"t={t} is outside the table horizon {table.horizon}")
    kernel = mdp.kernel(t)
    acts = np.flatnonzero(kernel.mask[s])
    c_arr = np.full(acts.size, float(c))
    hat = table.d.one_step(t)
    stats = StepStats()
    tables = [
        _propagate(mdp, t, np.full(acts.size, s), acts, c_arr, table.slices[t + 1][i], hat, table.grid,
                   MERGE_EPS, DEFAULT_ATOM_CAP, stats, scale=float(g))
        for i, g in enumerate(basis.gammas)
    ]
    if mode == "time_consistent":
        scores = _mix_scores(f, tables, basis.time_weights(t), c_arr, table.d.evaluate(t))
    else:
        scores = _mix_scores(f, tables, basis.base_weights, c_arr, 1.0)
    return int(acts[argmax_lowest(scores)])


# ----------------------------------------------------------------------
# preference-reversal toy


def preference_reversal_mdp(delay: int, r_small: float, r_large: float) -> TabularMdp:
    """Wait ``delay`` steps, then take ``r_small`` now or ``r_large`` one step later.

    States ``0..delay-1`` wait, ``delay`` decides, ``delay+1`` pays the large
    reward and ``delay+2`` absorbs.  Action 0 is the small-sooner option.
    """
    if delay < 0:
        raise ValueError("delay must be non-negative")
    D = delay
    S = D + 3
    rows = {}
    for s in range(D):
        for a in (0, 1):
            rows[(s, a)] = [(s + 1, 0.0, 1.0)]
    rows[(D, 0)] = [(D + 2, float(r_small), 1.0)]
    rows[(D, 1)] = [(D + 1, 0.0, 1.0)]
    for a in (0, 1):
        rows[(D + 1, a)] = [(D + 2, float(r_large), 1.0)]
        rows[(D + 2, a)] = [(D + 2, 0.0, 1.0)]
    return TabularMdp.stationary(Kernel.from_rows(S, 2, rows), horizon=D + 2,
                                 info={"kind": "preference_reversal", "delay": D})


def reversal_delay(d: DiscountFunction, r_small: float, r_large: float, max_delay: int) -> int | None:
    """Smallest delay at which the large-later option is strictly preferred."""
    v = d.values(max_delay + 1)
    later = v[1:] * r_large > v[:-1] * r_small
    hits = np.flatnonzero(later)
    return int(hits[0]) if hits.size else None


def preference_reversal_sweep(basis: HorizonBasis, r_small: float, r_large: float, max_delay: int,
                              f: OceUtility | None = None) -> dict:
    """Choice at the decision state for every delay, under both agents."""
    f = f or OceUtility.mean()
    grid = StockGrid.invariant()
    consistent, inconsistent = [], []
    for D in range(max_delay + 1):
        mdp = preference_reversal_mdp(D, r_small, r_large)
        policy, table = multi_backward_induction(mdp, f, basis, grid)
        consistent.append(int(policy.actions[D][D, 0]))
        inconsistent.append(select_action("time_inconsistent", table, basis, D, 0.0, D, f))
    return {
        "delays": list(range(max_delay + 1)),
        "consistent": consistent,
        "inconsistent": inconsistent,
        "predicted": reversal_delay(basis.as_discount(max_delay + 2), r_small, r_large, max_delay),
    }
