"""Finite MDPs with finite-support rewards, plus the wealth-management and
option-exercise environments built on top of them.

Transitions live in flat arrays grouped by ``(state, action)``.  An MDP may
switch between several kernels over time (goal dates, forced exercise at
maturity); ``schedule[t]`` names the kernel in force at decision time ``t``
and the last entry repeats for all later times.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from ._ragged import offsets_from_counts, segment_positions

ROW_TOL = 1e-12


class Kernel:
    """Transition model for one decision time."""

    __slots__ = ("n_states", "n_actions", "offsets", "next_state", "reward", "prob", "mask", "_keys")

    def __init__(self, n_states, n_actions, offsets, next_state, reward, prob, mask=None):
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.next_state = np.asarray(next_state, dtype=np.int64)
        self.reward = np.asarray(reward, dtype=float)
        self.prob = np.asarray(prob, dtype=float)
        counts = np.diff(self.offsets).reshape(self.n_states, self.n_actions)
        self.mask = counts > 0 if mask is None else np.asarray(mask, dtype=bool) & (counts > 0)
        self._keys = None
        self._validate()

    def _validate(self):
        if self.offsets.size != self.n_states * self.n_actions + 1:
            raise ValueError("offsets must have one entry per (state, action) plus one")
        if np.any(self.prob < 0):
            raise ValueError("negative transition probability")
        if self.next_state.size and (self.next_state.min() < 0 or self.next_state.max() >= self.n_states):
            raise ValueError("successor state out of range")
        if not np.all(self.mask.any(axis=1)):
            bad = int(np.flatnonzero(~self.mask.any(axis=1))[0])
            raise ValueError(f"state {bad} has no available action")
        sums = np.add.reduceat(self.prob, self.offsets[:-1][np.diff(self.offsets) > 0]) if self.prob.size else np.zeros(0)
        if np.any(np.abs(sums - 1.0) > ROW_TOL):
            raise ValueError(f"transition rows must sum to 1 (worst {np.max(np.abs(sums - 1.0)):.3g})")

    @classmethod
    def from_rows(cls, n_states: int, n_actions: int, rows: Mapping[tuple[int, int], Sequence]) -> "Kernel":
        """Build from ``{(s, a): [(s', reward, prob), ...]}``; absent pairs are unavailable."""
        sa, ns, rw, pr = [], [], [], []
        for (s, a), outs in rows.items():
            for s2, r, p in outs:
                sa.append(s * n_actions + a)
                ns.append(s2)
                rw.append(r)
                pr.append(p)
        return cls.from_arrays(n_states, n_actions, np.array(sa, dtype=np.int64), np.array(ns, dtype=np.int64),
                               np.array(rw, dtype=float), np.array(pr, dtype=float))

    @classmethod
    def from_arrays(cls, n_states, n_actions, sa, next_state, reward, prob) -> "Kernel":
        """Merge duplicate ``(sa, s', r)`` triples, drop zero mass and sort."""
        keep = prob > 0
        sa, next_state, reward, prob = sa[keep], next_state[keep], reward[keep], prob[keep]
        order = np.lexsort((reward, next_state, sa))
        sa, next_state, reward, prob = sa[order], next_state[order], reward[order], prob[order]
        if sa.size:
            new = np.ones(sa.size, dtype=bool)
            new[1:] = (sa[1:] != sa[:-1]) | (next_state[1:] != next_state[:-1]) | (reward[1:] != reward[:-1])
            starts = np.flatnonzero(new)
            sa, next_state, reward = sa[starts], next_state[starts], reward[starts]
            prob = np.add.reduceat(prob, starts)
        counts = np.bincount(sa, minlength=n_states * n_actions)
        return cls(n_states, n_actions, offsets_from_counts(counts), next_state, reward, prob)

    def rows(self, s: int, a: int) -> list[tuple[int, float, float]]:
        lo, hi = self.offsets[s * self.n_actions + a], self.offsets[s * self.n_actions + a + 1]
        return [(int(self.next_state[i]), float(self.reward[i]), float(self.prob[i])) for i in range(lo, hi)]

    def reward_support(self) -> np.ndarray:
        return np.unique(self.reward)

    def expand(self, states: np.ndarray, actions: np.ndarray):
        """Flat transitions of the given pairs: ``(pair_index, s', r, p)``."""
        sa = np.asarray(states, dtype=np.int64) * self.n_actions + np.asarray(actions, dtype=np.int64)
        starts = self.offsets[sa]
        lengths = self.offsets[sa + 1] - starts
        pos = segment_positions(starts, lengths)
        pair = np.repeat(np.arange(sa.size), lengths)
        return pair, self.next_state[pos], self.reward[pos], self.prob[pos]

    def sample(self, states, actions, u):
        """Inverse-CDF draws for vectors of pairs and uniforms ``u`` in [0, 1)."""
        if self._keys is None:
            counts = np.diff(self.offsets)
            seg = np.repeat(np.arange(counts.size), counts)
            cs = np.cumsum(self.prob)
            base = np.concatenate([[0.0], cs])[self.offsets[:-1]]
            within = cs - np.repeat(base, counts)
            self._keys = seg + within
        sa = np.asarray(states, dtype=np.int64) * self.n_actions + np.asarray(actions, dtype=np.int64)
        if np.any(np.diff(self.offsets)[sa] == 0):
            raise ValueError("invalid action for state")
        idx = np.searchsorted(self._keys, sa + np.asarray(u, dtype=float), side="right")
        idx = np.clip(idx, self.offsets[sa], self.offsets[sa + 1] - 1)
        return self.next_state[idx], self.reward[idx]

    def to_dict(self) -> dict:
        return {
            "offsets": self.offsets.tolist(),
            "next_state": self.next_state.tolist(),
            "reward": self.reward.tolist(),
            "prob": self.prob.tolist(),
            "mask": self.mask.astype(int).tolist(),
        }


@dataclass(frozen=True)
class TabularMdp:
    n_states: int
    n_actions: int
    kernels: tuple
    schedule: tuple
    initial_state: int = 0
    horizon: int | None = None
    reward_bounds: tuple[float, float] | None = None
    info: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_actions < 1:
            raise ValueError("an MDP needs at least one action")
        if not self.kernels or not self.schedule:
            raise ValueError("an MDP needs at least one kernel")
        for k in self.kernels:
            if k.n_states != self.n_states or k.n_actions != self.n_actions:
                raise ValueError("kernel shape does not match the MDP")
        if max(self.schedule) >= len(self.kernels) or min(self.schedule) < 0:
            raise ValueError("schedule refers to a missing kernel")
        if not 0 <= self.initial_state < self.n_states:
            raise ValueError("initial state out of range")
        lo = min(float(k.reward.min()) for k in self.kernels if k.reward.size)
        hi = max(float(k.reward.max()) for k in self.kernels if k.reward.size)
        if self.reward_bounds is None:
            object.__setattr__(self, "reward_bounds", (lo, hi))
        elif lo < self.reward_bounds[0] - 1e-12 or hi > self.reward_bounds[1] + 1e-12:
            raise ValueError("rewards fall outside the declared bounds")
        object.__setattr__(self, "schedule", tuple(int(i) for i in self.schedule))

    @classmethod
    def stationary(cls, kernel: Kernel, **kw) -> "TabularMdp":
        return cls(kernel.n_states, kernel.n_actions, (kernel,), (0,), **kw)

    def kernel(self, t: int) -> Kernel:
        return self.kernels[self.schedule[min(int(t), len(self.schedule) - 1)]]

    @property
    def time_homogeneous(self) -> bool:
        return len(set(self.schedule)) == 1

    def transitions(self, s: int, a: int, t: int = 0):
        return self.kernel(t).rows(s, a)

    def valid_actions(self, s: int, t: int = 0) -> np.ndarray:
        return np.flatnonzero(self.kernel(t).mask[s])

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "initial_state": self.initial_state,
            "horizon": self.horizon,
            "reward_bounds": list(self.reward_bounds),
            "schedule": list(self.schedule),
            "kernels": [k.to_dict() for k in self.kernels],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def sample_transition(mdp: TabularMdp, s: int, a: int, rng: np.random.Generator, t: int = 0):
    """One draw ``(s', r)`` from the exact kernel."""
    kernel = mdp.kernel(t)
    if not (0 <= a < mdp.n_actions) or not kernel.mask[s, a]:
        raise ValueError(f"action {a} is not available in state {s} at t={t}")
    ns, r = kernel.sample(np.array([s]), np.array([a]), rng.random(1))
    return int(ns[0]), float(r[0])


def sample_transitions(mdp: TabularMdp, states, actions, rng: np.random.Generator, t: int = 0):
    """Vectorised :func:`sample_transition`."""
    states = np.asarray(states, dtype=np.int64)
    return mdp.kernel(t).sample(states, actions, rng.random(states.size))


# ----------------------------------------------------------------------
# random chains

def build_chain_mdp(
    n_states: int,
    n_actions: int,
    seed: int,
    horizon: int | None = None,
    reward_atoms: int = 2,
    reward_values: Sequence[float] | None = None,
    branching: int | None = None,
    max_states: int = 64,
) -> TabularMdp:
    """Random time-homogeneous MDP, reproducible from ``seed``.

    Each ``(s, a)`` moves to up to ``branching`` successors; each successor
    carries up to ``reward_atoms`` reward values drawn from ``reward_values``
    (default: multiples of 0.5 in [-1, 1]).
    """
    if n_actions < 1:
        raise ValueError("an MDP needs at least one action")
    if not 1 <= n_states <= max_states:
        raise ValueError(f"n_states must lie in [1, {max_states}]")
    rng = np.random.default_rng(seed)
    support = np.asarray(reward_values if reward_values is not None else [-1.0, -0.5, 0.0, 0.5, 1.0])
    branching = n_states if branching is None else min(branching, n_states)
    rows = {}
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=rng.integers(1, branching + 1), replace=False)
            w = rng.dirichlet(np.ones(succ.size))
            outs = []
            for s2, ws in zip(succ, w):
                k = int(rng.integers(1, reward_atoms + 1))
                vals = rng.choice(support, size=min(k, support.size), replace=False)
                pv = rng.dirichlet(np.ones(vals.size))
                outs.extend((int(s2), float(v), float(ws * p)) for v, p in zip(vals, pv))
            total = sum(p for _, _, p in outs)
            rows[(s, a)] = [(s2, r, p / total) for s2, r, p in outs]
    kernel = Kernel.from_rows(n_states, n_actions, rows)
    return TabularMdp.stationary(kernel, horizon=horizon,
                                 reward_bounds=(float(support.min()), float(support.max())))


def build_deterministic_chain(rewards: Sequence[float], horizon: int | None = None) -> TabularMdp:
    """Single state, single action, with reward ``rewards[t]`` at time ``t`` (last repeats)."""
    kernels = tuple(Kernel.from_rows(1, 1, {(0, 0): [(0, float(r), 1.0)]}) for r in rewards)
    return TabularMdp(1, 1, kernels, tuple(range(len(kernels))), horizon=horizon)


# ----------------------------------------------------------------------
# goal-based wealth management

ASSET_MEANS = np.array([0.0493, 0.0770, 0.0886])
ASSET_COV = np.array([
    [0.0017, -0.0017, -0.0021],
    [-0.0017, 0.0396, 0.0309],
    [-0.0021, 0.0309, 0.0392],
])
# columns: US bonds, international stocks, US stocks; rows ordered conservative -> aggressive
PORTFOLIO_WEIGHTS = np.array([
    [0.9098, 0.0225, 0.0677],
    [0.8500, 0.0033, 0.1467],
    [0.7903, -0.0160, 0.2257],
    [0.7305, -0.0352, 0.3047],
    [0.6707, -0.0545, 0.3837],
    [0.6110, -0.0737, 0.4628],
    [0.5512, -0.0930, 0.5418],
    [0.4915, -0.1122, 0.6208],
    [0.4317, -0.1315, 0.6998],
    [0.3719, -0.1507, 0.7788],
    [0.3122, -0.1700, 0.8578],
    [0.2524, -0.1892, 0.9368],
    [0.1927, -0.2085, 1.0158],
    [0.1329, -0.2277, 1.0948],
    [0.0731, -0.2470, 1.1738],
])


def portfolio_moments(weights=PORTFOLIO_WEIGHTS, means=ASSET_MEANS, cov=ASSET_COV, period_fraction: float = 1.0):
    """Per-period mean and standard deviation of each portfolio's return."""
    w = np.asarray(weights, dtype=float)
    mu = w @ means
    sd = np.sqrt(np.einsum("ij,jk,ik->i", w, cov, w))
    return mu * period_fraction, sd * math.sqrt(period_fraction)


@dataclass(frozen=True)
class GbwmConfig:
    """Goal schedule entries are ``(time, cost, utility)``; at most one goal per time."""

    T: int = 10
    y0: float = 100.0
    goals: tuple = ()
    n_wealth: int = 301
    y_max: float | None = None
    y_min_ratio: float = 1e-3
    quadrature_nodes: int = 21
    period_fraction: float | None = None
    terminal_bonus: float = 0.0

    def __post_init__(self):
        if not self.goals:
            object.__setattr__(self, "goals", ((self.T // 2, 100.0, 1000.0), (self.T, 150.0, 1000.0)))
        goals = tuple((int(t), float(c), float(u)) for t, c, u in self.goals)
        object.__setattr__(self, "goals", goals)
        if self.period_fraction is None:
            object.__setattr__(self, "period_fraction", 10.0 / self.T)
        if self.T < 1:
            raise ValueError("T must be positive")
        if self.y0 <= 0:
            raise ValueError("initial wealth must be positive")
        times = [g[0] for g in goals]
        if len(set(times)) != len(times) or any(not 0 <= t <= self.T for t in times):
            raise ValueError("goal times must be distinct and lie in [0, T]")
        if any(c < 0 for _, c, _ in goals):
            raise ValueError("goal costs must be non-negative")

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "GbwmConfig":
        cfg = dict(cfg)
        allowed = set(cls.__dataclass_fields__)
        unknown = set(cfg) - allowed
        if unknown:
            raise ValueError(f"unknown gbwm key(s): {sorted(unknown)}")
        if "goals" in cfg:
            cfg["goals"] = tuple(tuple(g) for g in cfg["goals"])
        return cls(**cfg)


def _wealth_grid(cfg: GbwmConfig, mu: np.ndarray, sd: np.ndarray) -> np.ndarray:
    horizon = cfg.T + 1
    y_max = cfg.y_max
    if y_max is None:
        y_max = cfg.y0 * math.exp(horizon * float(mu.max()) + 5.0 * float(sd.max()) * math.sqrt(horizon))
    grid = np.geomspace(y_max * cfg.y_min_ratio, y_max, cfg.n_wealth)
    if not grid[0] <= cfg.y0 <= grid[-1]:
        raise ValueError("initial wealth lies outside the wealth grid")
    nearest = grid[np.argmin(np.abs(np.log(grid / cfg.y0)))]
    grid = grid * (cfg.y0 / nearest)
    grid[np.argmin(np.abs(grid - cfg.y0))] = cfg.y0
    return grid


def build_gbwm(cfg: GbwmConfig) -> TabularMdp:
    """Wealth-management MDP with decisions at ``t = 0..T``.

    State 0 is the absorbing zero-wealth node; states ``1..n`` are the
    geometric wealth grid.  Action ``psi * L + l`` fulfils goal ``psi``
    (0 = none) and invests the rest in portfolio ``l``.  After paying for a
    goal, wealth grows by ``exp(r)`` with Gaussian ``r`` and is split between
    the two bracketing grid nodes linearly in log-wealth.
    """
    mu, sd = portfolio_moments(period_fraction=cfg.period_fraction)
    n_port = mu.size
    grid = _wealth_grid(cfg, mu, sd)
    wealth = np.concatenate([[0.0], grid])
    n_states = wealth.size
    n_actions = 2 * n_port
    z, wq = np.polynomial.hermite_e.hermegauss(cfg.quadrature_nodes)
    wq = wq / wq.sum()
    log_grid = np.log(grid)

    def snap(y):
        """Split wealth values over neighbouring states: (lower, upper, weight_upper)."""
        y = np.asarray(y, dtype=float)
        lower = np.zeros(y.shape, dtype=np.int64)
        upper = np.zeros(y.shape, dtype=np.int64)
        lam = np.zeros(y.shape)
        below = y < grid[0]
        lower[below] = 0
        upper[below] = 1
        lam[below] = np.maximum(y[below], 0.0) / grid[0]
        top = y >= grid[-1]
        lower[top] = upper[top] = n_states - 1
        mid = ~below & ~top
        ly = np.log(y[mid])
        j = np.clip(np.searchsorted(log_grid, ly, side="right") - 1, 0, grid.size - 2)
        lower[mid] = j + 1
        upper[mid] = j + 2
        lam[mid] = (ly - log_grid[j]) / (log_grid[j + 1] - log_grid[j])
        return lower, upper, lam

    goal_at = {t: (c, u) for t, c, u in cfg.goals}

    def make_kernel(cost: float | None, util: float, final: bool):
        sa_l, ns_l, rw_l, pr_l = [], [], [], []
        for psi in (0, 1):
            if psi == 1 and cost is None:
                continue
            c = cost if psi == 1 else 0.0
            u = util if psi == 1 else 0.0
            feasible = wealth >= c - 1e-9
            feasible[0] = psi == 0
            states = np.flatnonzero(feasible)
            y_plus = np.maximum(wealth[states] - c, 0.0)
            for l in range(n_port):
                a = psi * n_port + l
                growth = np.exp(mu[l] + sd[l] * z)
                y_next = y_plus[:, None] * growth[None, :]
                lo, hi, lam = snap(y_next)
                p = np.broadcast_to(wq, y_next.shape)
                s_rep = np.repeat(states, z.size)
                for dest, mass in ((lo, 1.0 - lam), (hi, lam)):
                    dest = dest.ravel()
                    bonus = cfg.terminal_bonus * wealth[dest] if final else 0.0
                    sa_l.append(s_rep * n_actions + a)
                    ns_l.append(dest)
                    rw_l.append(np.full(dest.size, u) + bonus)
                    pr_l.append((p * mass).ravel())
        return Kernel.from_arrays(n_states, n_actions, np.concatenate(sa_l), np.concatenate(ns_l),
                                  np.concatenate(rw_l), np.concatenate(pr_l))

    kernels, schedule, index = [], [], {}
    for t in range(cfg.T + 1):
        cost, util = goal_at.get(t, (None, 0.0))
        key = (cost, util, t == cfg.T)
        if key not in index:
            index[key] = len(kernels)
            kernels.append(make_kernel(cost, util, t == cfg.T))
        schedule.append(index[key])
    y0_state = int(np.argmin(np.abs(wealth - cfg.y0)))
    max_reward = max([u for _, _, u in cfg.goals] + [0.0]) + cfg.terminal_bonus * wealth[-1]
    info = {
        "kind": "gbwm",
        "wealth": wealth,
        "goals": cfg.goals,
        "action_goal": np.repeat([0, 1], n_port),
        "action_portfolio": np.tile(np.arange(n_port), 2),
        "portfolio_means": mu,
        "portfolio_sds": sd,
        "config": cfg,
    }
    return TabularMdp(n_states, n_actions, tuple(kernels), tuple(schedule), initial_state=y0_state,
                      horizon=cfg.T + 1, reward_bounds=(0.0, float(max_reward)), info=info)


# ----------------------------------------------------------------------
# American put on an Ornstein-Uhlenbeck price

@dataclass(frozen=True)
class OuOptionConfig:
    zeta: float = 100.0
    kappa: float = 2.0
    sigma: float = 20.0
    p0: float = 100.0
    strike: float = 100.0
    T: int = 20
    dt: float = 0.05
    band_sd: float = 4.5
    spacing: float | None = None

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "OuOptionConfig":
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ou_put key(s): {sorted(unknown)}")
        return cls(**cfg)

    @property
    def step_variance(self) -> float:
        return self.sigma**2 * self.dt

    @property
    def stationary_variance(self) -> float:
        """Stationary variance of the Euler chain ``P' = P + kappa (zeta - P) dt + sigma sqrt(dt) Z``."""
        rho = 1.0 - self.kappa * self.dt
        return self.step_variance / (1.0 - rho * rho)


def ou_lattice(cfg: OuOptionConfig):
    """Price levels and the trinomial transition matrix of the Euler step."""
    if cfg.kappa * cfg.dt >= 1.0 or cfg.kappa <= 0 or cfg.dt <= 0:
        raise ValueError("need 0 < kappa * dt < 1 for a mean-reverting Euler step")
    h = cfg.spacing if cfg.spacing is not None else (cfg.sigma * math.sqrt(3.0 * cfg.dt) or 1.0)
    band = cfg.band_sd * math.sqrt(cfg.stationary_variance) + abs(cfg.p0 - cfg.zeta)
    n_side = max(int(math.ceil(band / h)), 1)
    levels = cfg.p0 + h * np.arange(-n_side, n_side + 1)
    n = levels.size
    mean = levels + cfg.kappa * (cfg.zeta - levels) * cfg.dt
    q = cfg.step_variance / (h * h)
    if q > 1.0:
        raise ValueError("lattice spacing too fine for a trinomial step; increase spacing")
    centre = np.clip(np.rint((mean - levels[0]) / h).astype(np.int64), 1, n - 2)
    e = (mean - levels[centre]) / h
    up = 0.5 * (q + e * e + e)
    down = 0.5 * (q + e * e - e)
    mid = 1.0 - q - e * e
    probs = np.maximum(np.stack([down, mid, up], axis=1), 0.0)
    probs /= probs.sum(axis=1, keepdims=True)
    matrix = np.zeros((n, n))
    rows = np.arange(n)
    for k, off in enumerate((-1, 0, 1)):
        np.add.at(matrix, (rows, centre + off), probs[:, k])
    return levels, matrix


def lattice_moment_errors(cfg: OuOptionConfig, levels: np.ndarray, matrix: np.ndarray, within_sd: float = 3.0):
    """Relative errors of the one-step mean and variance against the Euler moments,
    at nodes within ``within_sd`` stationary deviations of the long-run mean."""
    m = matrix @ levels
    v = matrix @ levels**2 - m * m
    target_m = levels + cfg.kappa * (cfg.zeta - levels) * cfg.dt
    inside = np.abs(levels - cfg.zeta) <= within_sd * math.sqrt(cfg.stationary_variance)
    err_m = np.abs(m - target_m)[inside] / np.maximum(np.abs(target_m[inside]), 1e-12)
    err_v = np.abs(v - cfg.step_variance)[inside] / max(cfg.step_variance, 1e-12) if cfg.step_variance > 0 \
        else np.abs(v[inside])
    return float(err_m.max()), float(err_v.max())


def build_ou_put(cfg: OuOptionConfig) -> TabularMdp:
    """American put: states are lattice levels plus one absorbing exercised state.

    Action 0 holds, action 1 exercises.  Decisions happen at ``t = 0..T``;
    at ``t = T`` both actions exercise automatically.
    """
    levels, matrix = ou_lattice(cfg)
    n = levels.size
    if cfg.sigma > 0:
        pi = np.full(n, 1.0 / n)
        for _ in range(20000):
            nxt = pi @ matrix
            if np.max(np.abs(nxt - pi)) < 1e-13:
                break
            pi = nxt
        mean = pi @ levels
        var = pi @ levels**2 - mean * mean
        if abs(var - cfg.stationary_variance) > 0.05 * cfg.stationary_variance:
            raise ValueError(
                f"lattice too coarse: stationary variance {var:.4g} vs {cfg.stationary_variance:.4g}"
            )
    done = n
    payoff = np.maximum(cfg.strike - levels, 0.0)

    def kernel(final: bool) -> Kernel:
        rows = {}
        for i in range(n):
            exercise = [(done, float(payoff[i]), 1.0)]
            if final:
                rows[(i, 0)] = exercise
            else:
                succ = np.flatnonzero(matrix[i] > 0)
                rows[(i, 0)] = [(int(j), 0.0, float(matrix[i, j])) for j in succ]
            rows[(i, 1)] = exercise
        rows[(done, 0)] = [(done, 0.0, 1.0)]
        rows[(done, 1)] = [(done, 0.0, 1.0)]
        return Kernel.from_rows(n + 1, 2, rows)

    p0_state = int(np.argmin(np.abs(levels - cfg.p0)))
    info = {"kind": "ou_put", "levels": levels, "payoff": payoff, "done_state": done, "config": cfg}
    return TabularMdp(n + 1, 2, (kernel(False), kernel(True)), (0,) * cfg.T + (1,),
                      initial_state=p0_state, horizon=cfg.T + 1,
                      reward_bounds=(0.0, float(payoff.max())), info=info)
