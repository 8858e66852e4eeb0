"""Shared oracles and the acceptance summary hook."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from stockdp.distributions import ReturnDistribution

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


# ----------------------------------------------------------------------
# oracles written without the package's solvers


def expectimax(mdp, f, d, T, c0, s0=None, t=0, acc=0.0):
    """``max E f(c0 + sum_t d_t r_t)`` by recursion over full histories.

    At each node the maximisation is over actions given the whole history,
    i.e. over every deterministic history-dependent policy; the discounted
    partial sum is a sufficient statistic for the remaining choice.
    ``c0`` may be an array; the maximisation then runs separately per entry.
    """
    s = mdp.initial_state if s0 is None else s0
    c0 = np.asarray(c0, dtype=float)
    if t == T:
        v = f(c0 + acc)
    else:
        v = np.full(c0.shape, -np.inf)
        for a in range(mdp.n_actions):
            rows = mdp.transitions(s, a, t)
            if rows:
                q = sum(p * expectimax(mdp, f, d, T, c0, s2, t + 1, acc + d.evaluate(t) * r) for s2, r, p in rows)
                v = np.maximum(v, q)
    return float(v) if v.ndim == 0 else v


def path_law(mdp, d, T, choose, s0=None):
    """Exact law of ``sum_t d_t r_t`` when the action is ``choose(t, s, acc)``."""
    values, probs = [], []

    def walk(t, s, acc, p):
        if t == T:
            values.append(acc)
            probs.append(p)
            return
        a = choose(t, s, acc)
        for s2, r, q in mdp.transitions(s, a, t):
            walk(t + 1, s2, acc + d.evaluate(t) * r, p * q)

    walk(0, mdp.initial_state if s0 is None else s0, 0.0, 1.0)
    return ReturnDistribution(values, probs)


def enumerate_policies(mdp, d, T, s0=None):
    """Every deterministic policy on reachable ``(t, s, partial sum)`` nodes, as its return law."""
    s0 = mdp.initial_state if s0 is None else s0
    nodes = []
    frontier = {(s0, 0.0)}
    for t in range(T):
        layer = sorted(frontier)
        nodes.extend((t, s, acc) for s, acc in layer)
        nxt = set()
        for s, acc in layer:
            for a in range(mdp.n_actions):
                for s2, r, _ in mdp.transitions(s, a, t):
                    nxt.add((s2, round(acc + d.evaluate(t) * r, 12)))
        frontier = nxt
    options = []
    for t, s, _ in nodes:
        acts = [a for a in range(mdp.n_actions) if mdp.transitions(s, a, t)]
        options.append(acts)
    index = {key: i for i, key in enumerate(nodes)}
    for choice in itertools.product(*options):
        yield path_law(mdp, d, T, lambda t, s, acc, c=choice: c[index[(t, s, round(acc, 12))]], s0)


def cvar_tail_average(nu: ReturnDistribution, tau: float) -> float:
    """Mean of the worst ``tau`` probability mass."""
    remaining, total = tau, 0.0
    for v, p in zip(nu.values, nu.probs):
        take = min(p, remaining)
        total += take * v
        remaining -= take
        if remaining <= 1e-15:
            break
    return total / tau


def w1_dual(nu: ReturnDistribution, mu: ReturnDistribution) -> float:
    """W1 as ``max_phi sum phi (p - q)`` over 1-Lipschitz ``phi`` on the merged support.

    On a line the maximiser moves with slope +-1 between neighbouring
    support points, so enumerating slope signs is exhaustive.
    """
    xs = np.union1d(nu.values, mu.values)
    p = np.zeros(xs.size)
    q = np.zeros(xs.size)
    p[np.searchsorted(xs, nu.values)] = nu.probs
    q[np.searchsorted(xs, mu.values)] = mu.probs
    gaps = np.diff(xs)
    best = 0.0
    for signs in itertools.product((-1.0, 1.0), repeat=gaps.size):
        phi = np.concatenate([[0.0], np.cumsum(np.asarray(signs) * gaps)])
        best = max(best, float(phi @ (p - q)))
    return best


def scalar_vi(mdp, gamma, T):
    """Classical finite-horizon value iteration for the expected discounted sum."""
    v = np.zeros(mdp.n_states)
    for t in range(T - 1, -1, -1):
        new = np.full(mdp.n_states, -np.inf)
        for s in range(mdp.n_states):
            for a in range(mdp.n_actions):
                rows = mdp.transitions(s, a, t)
                if rows:
                    new[s] = max(new[s], sum(p * (r + gamma * v[s2]) for s2, r, p in rows))
        v = new
    return v


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
