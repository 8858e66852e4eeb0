"""Infinite-horizon control with a risk-neutral geometric tail.

The horizon is split at ``T'``: from ``T'`` on, one-step factors are capped
at ``gamma_tail = d_hat_{T'}`` and a stationary risk-neutral policy is used;
before ``T'`` the stock-augmented backward induction optimises the risk
objective against the tail's return distributions.

:func:`bound_check` measures the loss of that composite policy against a
long-horizon reference and compares it with the tail error bounds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from ._ragged import Ragged
from .discounting import DiscountFunction
from .environments import Kernel, TabularMdp
from .finite_horizon import (
    DEFAULT_ATOM_CAP,
    NonStationaryPolicy,
    StockGrid,
    backward_induction,
    policy_evaluation,
)
from .risk import OceUtility, argmax_lowest, entropic_tail_bound, mean_cvar_tail_bound

MAX_VI_SWEEPS = 100_000
MAX_EVAL_SWEEPS = 10_000


class ConvergenceError(RuntimeError):
    pass


@dataclass
class TailSolution:
    gamma: float
    policy: np.ndarray
    values: np.ndarray
    table: Ragged
    support: np.ndarray
    sweeps: int
    eval_sweeps: int

    def distribution(self, s: int):
        return self.table.cell(s)


class CompositePolicy(NonStationaryPolicy):
    """Risk-sensitive head for ``t < switch``, stationary risk-neutral tail afterwards."""

    @property
    def head(self) -> NonStationaryPolicy:
        return NonStationaryPolicy(self.actions, self.stocks, self.grid)


def _tail_kernel(mdp: TabularMdp) -> Kernel:
    return mdp.kernels[mdp.schedule[-1]]


def _pairs(kernel: Kernel):
    S, A = kernel.n_states, kernel.n_actions
    valid = kernel.mask.ravel()
    states = np.repeat(np.arange(S), A)[valid]
    acts = np.tile(np.arange(A), S)[valid]
    return states, acts, valid


def _choose(scores, valid, S, A):
    q = np.full(S * A, -np.inf)
    q[valid] = scores
    q = q.reshape(S, A)
    return argmax_lowest(q, axis=1), q


def risk_neutral_tail(mdp: TabularMdp, gamma_tail: float, tol: float = 1e-8, n_atoms: int = 401,
                      max_sweeps: int = MAX_VI_SWEEPS, max_eval_sweeps: int = MAX_EVAL_SWEEPS) -> TailSolution:
    """Stationary risk-neutral policy at ``gamma_tail`` and its return distributions.

    Scalar value iteration runs to sup-change ``tol * (1 - gamma_tail)``.
    The distributional evaluation keeps a fixed evenly spaced support on
    ``[R_min, R_max] / (1 - gamma_tail)`` and splits each atom linearly
    between its two neighbours, which preserves means exactly.
    """
    if not 0.0 < gamma_tail < 1.0:
        raise ValueError("gamma_tail must lie in (0, 1)")
    if not tol > 0:
        raise ValueError("tol must be positive")
    kernel = _tail_kernel(mdp)
    S, A = mdp.n_states, mdp.n_actions
    states, acts, valid = _pairs(kernel)
    pair, s2, r, p = kernel.expand(states, acts)
    n_pairs = states.size
    r_bar = np.bincount(pair, r * p, minlength=n_pairs)
    v = np.zeros(S)
    sweeps = 0
    while True:
        sweeps += 1
        scores = r_bar + gamma_tail * np.bincount(pair, p * v[s2], minlength=n_pairs)
        best, q = _choose(scores, valid, S, A)
        new = q[np.arange(S), best]
        change = float(np.max(np.abs(new - v)))
        v = new
        if change <= tol * (1.0 - gamma_tail):
            break
        if sweeps >= max_sweeps:
            raise ConvergenceError(f"tail value iteration did not converge in {max_sweeps} sweeps")
    policy = best.astype(np.int64)

    lo, hi = mdp.reward_bounds
    lo, hi = lo / (1.0 - gamma_tail), hi / (1.0 - gamma_tail)
    if hi - lo <= 0.0:
        support = np.array([lo])
        probs = np.ones((S, 1))
        eval_sweeps = 0
    else:
        support = np.linspace(lo, hi, n_atoms)
        dz = support[1] - support[0]
        pp, ps2, pr, pprob = kernel.expand(np.arange(S), policy)
        target = pr[:, None] + gamma_tail * support[None, :]
        pos = np.clip((target - lo) / dz, 0.0, n_atoms - 1.0)
        left = np.minimum(np.floor(pos).astype(np.int64), n_atoms - 2)
        frac = pos - left
        probs = np.zeros((S, n_atoms))
        probs[:, n_atoms // 2] = 1.0
        eval_sweeps = 0
        cum_dz = dz
        while True:
            eval_sweeps += 1
            mass = pprob[:, None] * probs[ps2]
            new = np.zeros((S, n_atoms))
            rows = np.broadcast_to(pp[:, None], left.shape)
            np.add.at(new, (rows, left), mass * (1.0 - frac))
            np.add.at(new, (rows, left + 1), mass * frac)
            w1 = float(np.max(np.abs(np.cumsum(new - probs, axis=1)).sum(axis=1) * cum_dz))
            probs = new
            if w1 < tol:
                break
            if eval_sweeps >= max_eval_sweeps:
                raise ConvergenceError(f"tail distributional evaluation did not converge in {max_eval_sweeps} sweeps")
    # policy value (not the max over actions) for the returned policy
    values = probs @ support
    keep = probs > 0.0
    counts = keep.sum(axis=1)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    table = Ragged(np.broadcast_to(support, probs.shape)[keep], probs[keep] / np.repeat(probs.sum(axis=1), counts),
                   offsets)
    return TailSolution(float(gamma_tail), policy, values, table, support, sweeps, eval_sweeps)


def _check_utility(f: OceUtility):
    if f.kind == "cvar" or (f.kind == "mean_cvar" and f.params["kappa1"] == 0.0):
        raise ValueError(
            "pure CVaR is not supported for infinite horizons: its greedy action "
            "saturates once the stock is large, so the tail has no effect"
        )


def truncated_discount(d: DiscountFunction, t_prime: int) -> DiscountFunction:
    if t_prime == 0:
        return DiscountFunction.exponential(d.one_step(0), d.max_horizon)
    return d.truncate_at_horizon(t_prime)


def solve_infinite(mdp: TabularMdp, f: OceUtility, d: DiscountFunction, t_prime: int, grid: StockGrid,
                   tol: float = 1e-8, n_atoms: int = 401, atom_cap: int = DEFAULT_ATOM_CAP):
    """Composite policy: risk-sensitive head on ``[0, T')``, risk-neutral tail from ``T'``.

    Returns ``(policy, head_table, tail)``.
    """
    _check_utility(f)
    if t_prime < 0:
        raise ValueError("T' must be non-negative")
    gamma_tail = d.one_step(t_prime)
    if not gamma_tail < 1.0:
        raise ValueError("the truncated discount is not summable: d_hat at T' equals 1")
    tail = risk_neutral_tail(mdp, gamma_tail, tol, n_atoms)
    d_trunc = truncated_discount(d, t_prime)
    head, table = backward_induction(mdp, f, d_trunc, grid, T=t_prime, terminal=tail.table, atom_cap=atom_cap)
    policy = CompositePolicy(head.actions, head.stocks, grid, tail=tail.policy, switch=t_prime,
                             initial_stock=head.initial_stock)
    return policy, table, tail


# ----------------------------------------------------------------------
# exact entropic recursions


def _log_z_step(kernel: Kernel, b: float, d_t: float, log_z_next: np.ndarray, actions=None):
    """Per-pair ``log sum p exp(-b d_t r) Z'(s')``, with the chosen actions."""
    S, A = kernel.n_states, kernel.n_actions
    if actions is None:
        states, acts, valid = _pairs(kernel)
    else:
        states, acts = np.arange(S), np.asarray(actions, dtype=np.int64)
        valid = None
    pair, s2, r, p = kernel.expand(states, acts)
    expo = -b * d_t * r + log_z_next[s2]
    top = np.full(states.size, -np.inf)
    np.maximum.at(top, pair, expo)
    log_z = top + np.log(np.bincount(pair, p * np.exp(expo - top[pair]), minlength=states.size))
    if actions is not None:
        return acts, log_z
    best, q = _choose(-log_z, valid, S, A)
    return best, -q[np.arange(S), best]


def entropic_recursion(mdp: TabularMdp, d: DiscountFunction, beta: float, horizon: int, policy=None,
                       start: int = 0, terminal=None):
    """``log E exp(-|beta| sum_{k=t}^{horizon-1} d_k r_k)`` for ``t = start..horizon``.

    With ``policy=None`` the minimising (CE-maximising) actions are used;
    otherwise ``policy(t)`` supplies one action per state.  Returns
    ``(actions per t, log Z per t)``, both indexed from ``start``.
    """
    b = abs(beta)
    log_z = np.zeros(mdp.n_states) if terminal is None else np.asarray(terminal, dtype=float)
    zs = [log_z]
    acts = []
    for t in range(horizon - 1, start - 1, -1):
        fixed = None if policy is None else policy(t)
        a, log_z = _log_z_step(mdp.kernel(t), b, d.evaluate(t), log_z, fixed)
        acts.append(a)
        zs.append(log_z)
    return acts[::-1], zs[::-1]


def entropic_ce(log_z: np.ndarray, beta: float) -> np.ndarray:
    return -np.asarray(log_z) / abs(beta)


# ----------------------------------------------------------------------
# bound checks


@dataclass
class BoundRow:
    seed: int
    t_prime: int
    d_t_prime: float
    measured: float
    bound: float
    measured_sup: float = math.nan
    bound_sup: float = math.nan

    @property
    def ratio(self) -> float:
        return self.measured / self.bound if self.bound > 0 else math.nan

    @property
    def holds(self) -> bool:
        return self.measured <= self.bound + 1e-9


def reference_slack(d: DiscountFunction, reward_range: float, t_ref: int, lipschitz: float = 1.0) -> float:
    """Largest objective change from ignoring rewards at ``t >= t_ref``."""
    return lipschitz * reward_range * (d.partial_sum(None) - d.partial_sum(t_ref))


def entropic_bound_check(mdp: TabularMdp, beta: float, d: DiscountFunction, t_primes, t_ref: int = 400,
                         seed: int = 0, tol: float = 1e-10) -> list[BoundRow]:
    """Entropic suboptimality of the composite policy for each ``T'``.

    The entropic greedy action does not depend on the stock, so both the
    reference optimum and the composite policy are evaluated exactly by
    exponential-moment recursions over ``[0, t_ref)``.
    """
    lo, hi = mdp.reward_bounds
    delta_g = (hi - lo) * d.partial_sum(None)
    slack = 2.0 * reference_slack(d, hi - lo, t_ref)
    _, z_opt = entropic_recursion(mdp, d, beta, t_ref)
    s0 = mdp.initial_state
    ce_opt = float(entropic_ce(z_opt[0], beta)[s0])
    rows = []
    for tp in t_primes:
        if tp >= t_ref:
            raise ValueError("T' must be smaller than the reference horizon")
        tail = risk_neutral_tail(mdp, d.one_step(tp), tol)
        _, z_tail = entropic_recursion(mdp, d, beta, t_ref, policy=lambda t: tail.policy, start=tp)
        head, _ = entropic_recursion(mdp, d, beta, tp, terminal=z_tail[0])

        def composite(t, head=head, tail=tail, tp=tp):
            return head[t] if t < tp else tail.policy

        _, z_pi = entropic_recursion(mdp, d, beta, t_ref, policy=composite)
        ce_pi = float(entropic_ce(z_pi[0], beta)[s0])
        d_tp = d.evaluate(tp)
        bound = entropic_tail_bound(d_tp, abs(beta), delta_g) + slack
        rows.append(BoundRow(seed, int(tp), d_tp, max(ce_opt - ce_pi, 0.0), bound))
    return rows


def mean_cvar_bound_check(mdp: TabularMdp, f: OceUtility, d: DiscountFunction, t_primes, grid: StockGrid,
                          t_ref: int = 10, seed: int = 0, tol: float = 1e-10) -> list[BoundRow]:
    """Mean-CVaR suboptimality of the composite policy against exact references.

    Everything is truncated at ``t_ref`` and evaluated on the exact stock
    grid.  ``measured`` is taken at the composite policy's own initial
    stock; ``measured_sup`` is the largest loss over all candidate stocks.
    """
    if f.kind != "mean_cvar":
        raise ValueError("mean_cvar_bound_check needs a mean-CVaR utility")
    _check_utility(f)
    if grid.mode != "exact":
        raise ValueError("the mean-CVaR check runs on the exact stock grid")
    lo, hi = mdp.reward_bounds
    slack = 2.0 * reference_slack(d, hi - lo, t_ref, f.lipschitz)
    s0 = mdp.initial_state
    opt_policy, opt_table = backward_induction(mdp, f, d, grid, T=t_ref)
    opt_value, _ = opt_table.initial_stock(s0)
    opt_by_c = opt_table.objectives[0][s0]
    layers = grid.layers(mdp, d, t_ref)
    c0 = layers[0]
    rows = []
    for tp in t_primes:
        if not 0 < tp < t_ref:
            raise ValueError("T' must lie strictly between 0 and the reference horizon")
        tail = risk_neutral_tail(mdp, d.one_step(tp), tol)
        tail_rule = NonStationaryPolicy([], [], StockGrid.invariant(), tail=tail.policy, switch=0)
        tail_slices = policy_evaluation(mdp, tail_rule, d, StockGrid.invariant(), T=t_ref)
        terminal = tail_slices[tp].dist
        head, head_table = backward_induction(mdp, f, d, grid, T=tp, terminal=terminal, layers=layers[: tp + 1])
        composite = CompositePolicy(head.actions, head.stocks, grid, tail=tail.policy, switch=tp,
                                    initial_stock=head.initial_stock)
        slices = policy_evaluation(mdp, composite, d, grid, T=t_ref, layers=layers)
        by_c = slices[0].objective(f, 1.0)[s0]
        chosen = int(np.searchsorted(c0, composite.initial_stock))
        measured = float(opt_value - (-c0[chosen] + by_c[chosen]))
        measured_sup = float(np.max(opt_by_c - by_c))
        # largest expected shortfall of (c + G) at T', from the chosen stock and from any stock
        g = tail_slices[tp]
        reach = StockGrid.exact([c0[chosen]], tol=grid.tol).layers(mdp, d, tp)[tp]
        d_tp = d.evaluate(tp)
        lam = f.loss_aversion
        bound = mean_cvar_tail_bound(d_tp, lam, _max_shortfall(g, reach, mdp.n_states)) + slack
        bound_sup = mean_cvar_tail_bound(d_tp, lam, _max_shortfall(g, layers[tp], mdp.n_states)) + slack
        rows.append(BoundRow(seed, int(tp), d_tp, max(measured, 0.0), bound, max(measured_sup, 0.0), bound_sup))
    return rows


def _max_shortfall(slice_, stocks, n_states) -> float:
    out = 0.0
    for s in range(n_states):
        nu = slice_.distribution(s, 0)
        short = np.maximum(-(stocks[:, None] + nu.values[None, :]), 0.0) @ nu.probs
        out = max(out, float(short.max()))
    return out


def bound_check(mdp: TabularMdp, f: OceUtility, d: DiscountFunction, t_primes, grid: StockGrid | None = None,
                t_ref: int | None = None, seed: int = 0) -> list[BoundRow]:
    if f.kind == "entropic":
        return entropic_bound_check(mdp, f.params["beta"], d, t_primes, t_ref or 400, seed)
    if f.kind == "mean_cvar":
        if grid is None:
            raise ValueError("the mean-CVaR check needs an exact stock grid")
        return mean_cvar_bound_check(mdp, f, d, t_primes, grid, t_ref or 10, seed)
    raise ValueError(f"no tail bound for {f.kind} utilities")


def fit_decay_slope(d_values, measured) -> float:
    """Least-squares slope of ``log measured`` on ``log d``, over strictly positive points.

    Returns ``inf`` when fewer than two points are positive and the positive
    ones (if any) sit at the largest ``d``: the loss vanishes faster than
    any power.
    """
    x = np.log(np.asarray(d_values, dtype=float))
    y = np.asarray(measured, dtype=float)
    pos = y > 0
    if pos.sum() < 2:
        if pos.sum() == 0 or x[pos][0] >= x.max():
            return math.inf
        return math.nan
    slope, _ = np.polyfit(x[pos], np.log(y[pos]), 1)
    return float(slope)


def write_bound_csv(path, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["seed", "t_prime", "d_t_prime", "measured", "bound", "ratio"])
        for r in rows:
            out.writerow([r.seed, r.t_prime, f"{r.d_t_prime:.17g}", f"{r.measured:.17g}", f"{r.bound:.17g}",
                          f"{r.ratio:.17g}"])
