"""Exact and Monte-Carlo policy evaluation.

Monte-Carlo rollouts track the stock alongside the state, so stock-dependent
policies are followed exactly as the solver intended.  Reports carry both
the undiscounted total utility (the wealth-management score) and the
discounted objective ``-c0 + E f(c0 + G)``.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .discounting import DiscountFunction
from .environments import TabularMdp
from .finite_horizon import NonStationaryPolicy, StockGrid, _resolve_horizon, policy_evaluation
from .infinite_horizon import entropic_ce, entropic_recursion
from .risk import OceUtility, objective
from .rng import stream


def mdp_fingerprint(mdp: TabularMdp) -> str:
    """Stable hash of the transition model, used to match evaluation configs."""
    h = hashlib.sha256()
    h.update(np.array([mdp.n_states, mdp.n_actions, mdp.initial_state, mdp.horizon or -1]).tobytes())
    h.update(np.asarray(mdp.schedule, dtype=np.int64).tobytes())
    for k in mdp.kernels:
        for arr in (k.offsets, k.next_state, k.reward, k.prob):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


# ----------------------------------------------------------------------
# exact evaluation


def _default_c0(policy, grid: StockGrid | None = None) -> float:
    if getattr(policy, "initial_stock", None) is not None:
        return float(policy.initial_stock)
    return 0.0


def exact_evaluate(mdp: TabularMdp, policy: NonStationaryPolicy, f: OceUtility, d: DiscountFunction,
                   grid: StockGrid, T: int | None = None, s0: int | None = None, c0: float | None = None,
                   **kw) -> float:
    """``E f(c0 + G^pi)`` at ``(s0, c0)`` from chained fixed-policy Bellman steps."""
    s0 = mdp.initial_state if s0 is None else s0
    c0 = _default_c0(policy) if c0 is None else float(c0)
    slices = policy_evaluation(mdp, policy, d, grid, T, **kw)
    first = slices[0]
    node = int(grid.locate(first.stocks, np.array([c0]))[0])
    return objective(f, first.distribution(s0, node), c0, 1.0)


def exact_oce(mdp, policy, f, d, grid, T=None, s0=None, c0=None, **kw) -> float:
    """``-c0 + E f(c0 + G^pi)``: the policy's OCE score at its initial stock."""
    c0 = _default_c0(policy) if c0 is None else float(c0)
    return -c0 + exact_evaluate(mdp, policy, f, d, grid, T, s0, c0, **kw)


def mean_evaluate(mdp: TabularMdp, policy: NonStationaryPolicy, d: DiscountFunction, T: int | None = None,
                  c0: float = 0.0) -> np.ndarray:
    """Expected discounted return of a stock-independent policy, per initial state."""
    T = _resolve_horizon(mdp, T)
    S = mdp.n_states
    v = np.zeros(S)
    states = np.arange(S)
    for t in range(T - 1, -1, -1):
        acts = policy.actions_for(t, states, np.full(S, c0))
        pair, s2, r, p = mdp.kernel(t).expand(states, acts)
        v = np.bincount(pair, p * (d.evaluate(t) * r + v[s2]), minlength=S)
    return v


def entropic_evaluate(mdp: TabularMdp, policy: NonStationaryPolicy, d: DiscountFunction, beta: float,
                      T: int | None = None, c0: float = 0.0) -> np.ndarray:
    """Entropic certainty equivalent of a stock-independent policy, per initial state."""
    T = _resolve_horizon(mdp, T)
    S = mdp.n_states
    _, z = entropic_recursion(mdp, d, beta, T,
                              policy=lambda t: policy.actions_for(t, np.arange(S), np.full(S, c0)))
    return entropic_ce(z[0], beta)


# ----------------------------------------------------------------------
# Monte Carlo


@dataclass
class GoalStats:
    time: int
    cost: float
    afford: float
    take: float
    afford_se: float
    take_se: float


@dataclass
class EvalReport:
    expected_utility: float
    utility_se: float
    objective: float
    objective_se: float
    discounted_mean: float
    episodes: int
    seeds: list
    initial_stock: float
    goals: list = field(default_factory=list)
    env_key: str = ""
    paths: dict | None = None

    def goal(self, time: int) -> GoalStats:
        for g in self.goals:
            if g.time == time:
                return g
        raise KeyError(f"no goal at t={time}")

    def row(self) -> dict:
        out = {
            "episodes": self.episodes,
            "seeds": " ".join(str(s) for s in self.seeds),
            "initial_stock": self.initial_stock,
            "expected_utility": self.expected_utility,
            "utility_se": self.utility_se,
            "objective": self.objective,
            "objective_se": self.objective_se,
            "discounted_mean": self.discounted_mean,
        }
        for g in self.goals:
            out[f"p_afford_t{g.time}"] = g.afford
            out[f"p_take_t{g.time}"] = g.take
        return out


def _se(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def _binomial_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def monte_carlo_evaluate(mdp: TabularMdp, policy: NonStationaryPolicy, f: OceUtility, d: DiscountFunction,
                         episodes: int, seed: int, T: int | None = None, c0: float | None = None,
                         record: bool = False, stream_path=()) -> EvalReport:
    """Simulate ``episodes`` trajectories with stock tracking; deterministic per seed."""
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    T = _resolve_horizon(mdp, T)
    rng = stream(seed, *stream_path)
    c0 = _default_c0(policy) if c0 is None else float(c0)
    n = int(episodes)
    s = np.full(n, mdp.initial_state, dtype=np.int64)
    c = np.full(n, c0)
    disc = np.zeros(n)
    total = np.zeros(n)
    is_gbwm = mdp.info.get("kind") == "gbwm"
    goal_rows = []
    if record:
        paths = {"states": np.empty((n, T + 1), dtype=np.int64), "stocks": np.empty((n, T + 1)),
                 "actions": np.empty((n, T), dtype=np.int64), "rewards": np.empty((n, T))}
    for t in range(T):
        a = policy.actions_for(t, s, c)
        if record:
            paths["states"][:, t], paths["stocks"][:, t], paths["actions"][:, t] = s, c, a
        if is_gbwm:
            for gt, cost, _ in mdp.info["goals"]:
                if gt == t:
                    wealth = mdp.info["wealth"][s]
                    afford = float(np.mean(wealth >= cost - 1e-9))
                    take = float(np.mean(mdp.info["action_goal"][a] == 1))
                    goal_rows.append(GoalStats(t, cost, afford, take, _binomial_se(afford, n), _binomial_se(take, n)))
        s2, r = mdp.kernel(t).sample(s, a, rng.random(n))
        disc += d.evaluate(t) * r
        total += r
        c = (c + r) / d.one_step(t)
        s = s2
        if record:
            paths["rewards"][:, t] = r
    if record:
        paths["states"][:, T], paths["stocks"][:, T] = s, c
    util = f(c0 + disc)
    return EvalReport(
        expected_utility=float(total.mean()),
        utility_se=_se(total),
        objective=float(-c0 + util.mean()),
        objective_se=_se(util),
        discounted_mean=float(disc.mean()),
        episodes=n,
        seeds=[seed],
        initial_stock=c0,
        goals=goal_rows,
        env_key=mdp_fingerprint(mdp),
        paths=paths if record else None,
    )


def aggregate_reports(reports: list[EvalReport]) -> EvalReport:
    """Pool independent reports, weighting by episode count."""
    if not reports:
        raise ValueError("nothing to aggregate")
    keys = {r.env_key for r in reports}
    if len(keys) > 1:
        raise ValueError("cannot pool reports from different environments")
    n = np.array([r.episodes for r in reports], dtype=float)
    w = n / n.sum()

    def pooled(vals, ses):
        return float(w @ np.asarray(vals)), float(math.sqrt(np.sum((w * np.asarray(ses)) ** 2)))

    eu, eu_se = pooled([r.expected_utility for r in reports], [r.utility_se for r in reports])
    ob, ob_se = pooled([r.objective for r in reports], [r.objective_se for r in reports])
    goals = []
    for i, g in enumerate(reports[0].goals):
        afford, afford_se = pooled([r.goals[i].afford for r in reports], [r.goals[i].afford_se for r in reports])
        take, take_se = pooled([r.goals[i].take for r in reports], [r.goals[i].take_se for r in reports])
        goals.append(GoalStats(g.time, g.cost, afford, take, afford_se, take_se))
    return EvalReport(eu, eu_se, ob, ob_se, float(w @ [r.discounted_mean for r in reports]), int(n.sum()),
                      [s for r in reports for s in r.seeds], reports[0].initial_stock, goals, reports[0].env_key)


def multi_seed_evaluate(mdp, policy, f, d, episodes: int, seeds, **kw) -> EvalReport:
    return aggregate_reports([monte_carlo_evaluate(mdp, policy, f, d, episodes, s, **kw) for s in seeds])


def preference_reversal_metric(report_exp: EvalReport, report_hyp: EvalReport, goal_time: int | None = None) -> float:
    """``P_hyp[take first goal] - P_exp[take first goal]``."""
    if report_exp.env_key != report_hyp.env_key:
        raise ValueError("reports come from different environment configurations")
    if not report_exp.goals or not report_hyp.goals:
        raise ValueError("reports carry no goal statistics")
    t = report_exp.goals[0].time if goal_time is None else goal_time
    return report_hyp.goal(t).take - report_exp.goal(t).take


# ----------------------------------------------------------------------
# anytime-proxy checks on recorded paths


def anytime_residual(paths: dict, d: DiscountFunction) -> float:
    """Largest ``|d_t (C_t + G_t) - (C_0 + G_0)|`` over recorded paths and times."""
    r = paths["rewards"]
    T = r.shape[1]
    dv = d.values(T)
    weighted = r * dv[:T]
    tail = np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1]
    tail = np.concatenate([tail, np.zeros((r.shape[0], 1))], axis=1)
    proxy = dv[None, :] * paths["stocks"] + tail
    return float(np.max(np.abs(proxy - proxy[:, :1])))


def multi_anytime_residual(paths: dict, basis) -> float:
    """Same check for a multi-horizon basis with per-gamma realised tails."""
    r = paths["rewards"]
    T = r.shape[1]
    d = basis.as_discount(T + 1)
    dv = d.values(T)
    times = np.arange(T + 1)
    proxy = dv[None, :] * paths["stocks"]
    for g, w in zip(basis.gammas, basis.base_weights):
        # w_i gamma_i^t G_{i,t} = w_i sum_{k >= t} gamma_i^k r_k
        weighted = r * (g ** times[:T])
        tail = np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1]
        proxy = proxy + w * np.concatenate([tail, np.zeros((r.shape[0], 1))], axis=1)
    return float(np.max(np.abs(proxy - proxy[:, :1])))


def write_reports_csv(path, reports, labels=None):
    rows = [r.row() for r in reports]
    keys = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow((["label"] if labels else []) + keys)
        for i, row in enumerate(rows):
            vals = [f"{row[k]:.17g}" if isinstance(row.get(k), float) else row.get(k, "") for k in keys]
            out.writerow(([labels[i]] if labels else []) + vals)
