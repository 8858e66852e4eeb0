"""Flat storage for many small distributions at once.

A :class:`Ragged` holds one finite distribution per cell in three flat
arrays (``values``, ``probs``, ``offsets``), so a whole Bellman sweep over
all (state, stock, action) groups is a handful of numpy calls.
"""

from __future__ import annotations

import numpy as np

from .distributions import MERGE_EPS, ReturnDistribution, quantile_levels


def segment_positions(starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Concatenation of ``arange(s, s + n)`` for every ``(s, n)`` pair."""
    lengths = np.asarray(lengths, dtype=np.int64)
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    ends = np.cumsum(lengths)
    shift = np.repeat(np.asarray(starts, dtype=np.int64) - (ends - lengths), lengths)
    return np.arange(total, dtype=np.int64) + shift


def offsets_from_counts(counts: np.ndarray) -> np.ndarray:
    out = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=out[1:])
    return out


class Ragged:
    __slots__ = ("values", "probs", "offsets")

    def __init__(self, values, probs, offsets):
        self.values = np.asarray(values, dtype=float)
        self.probs = np.asarray(probs, dtype=float)
        self.offsets = np.asarray(offsets, dtype=np.int64)

    @classmethod
    def point(cls, n_cells: int, value: float = 0.0) -> "Ragged":
        return cls(np.full(n_cells, float(value)), np.ones(n_cells), np.arange(n_cells + 1))

    @classmethod
    def from_distributions(cls, dists) -> "Ragged":
        dists = list(dists)
        counts = np.array([len(d) for d in dists], dtype=np.int64)
        if not dists:
            return cls(np.zeros(0), np.zeros(0), np.zeros(1, dtype=np.int64))
        return cls(
            np.concatenate([d.values for d in dists]),
            np.concatenate([d.probs for d in dists]),
            offsets_from_counts(counts),
        )

    @classmethod
    def from_quantiles(cls, q: np.ndarray) -> "Ragged":
        q = np.asarray(q, dtype=float)
        cells, n = q.shape
        return cls(q.ravel().copy(), np.full(cells * n, 1.0 / n), np.arange(cells + 1) * n)

    @property
    def n_cells(self) -> int:
        return len(self.offsets) - 1

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def cell_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_cells), self.counts)

    def cell(self, i: int) -> ReturnDistribution:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        if hi == lo:
            raise KeyError(f"cell {i} is empty")
        return ReturnDistribution(self.values[lo:hi].copy(), self.probs[lo:hi].copy(), canonical=True)

    def take(self, idx) -> "Ragged":
        idx = np.asarray(idx, dtype=np.int64)
        counts = self.counts[idx]
        pos = segment_positions(self.offsets[idx], counts)
        return Ragged(self.values[pos], self.probs[pos], offsets_from_counts(counts))

    def tile(self, reps: int) -> "Ragged":
        """Each cell repeated ``reps`` times consecutively."""
        return self.take(np.repeat(np.arange(self.n_cells), reps))

    def means(self) -> np.ndarray:
        return np.bincount(self.cell_ids(), self.values * self.probs, minlength=self.n_cells)

    def expect(self, terms: np.ndarray) -> np.ndarray:
        """Per-cell ``sum p * terms`` for per-atom ``terms``."""
        return np.bincount(self.cell_ids(), terms * self.probs, minlength=self.n_cells)

    def _within_cum(self) -> np.ndarray:
        counts = self.counts
        cs = np.cumsum(self.probs)
        base = np.concatenate([[0.0], cs])[self.offsets[:-1]]
        within = cs - np.repeat(base, counts)
        totals = within[np.maximum(self.offsets[1:] - 1, 0)]
        return within / np.repeat(np.where(totals > 0, totals, 1.0), counts)

    def quantiles_at(self, cells: np.ndarray, taus: np.ndarray) -> np.ndarray:
        """Left-continuous inverse CDF of ``cells[i]`` at ``taus[i]``."""
        key = self.cell_ids() + self._within_cum()
        cells = np.asarray(cells, dtype=np.int64)
        idx = np.searchsorted(key, cells + np.asarray(taus) - 1e-12, side="left")
        idx = np.clip(idx, self.offsets[cells], self.offsets[cells + 1] - 1)
        return self.values[idx]

    def quantiles(self, n: int) -> np.ndarray:
        """Quantile projection of every cell, shape ``(n_cells, n)``."""
        levels = quantile_levels(n)
        cells = np.repeat(np.arange(self.n_cells), n)
        return self.quantiles_at(cells, np.tile(levels, self.n_cells)).reshape(self.n_cells, n)

    def distributions(self) -> list[ReturnDistribution]:
        return [self.cell(i) for i in range(self.n_cells)]


def group_canonicalize(group, values, probs, n_groups: int, eps: float = MERGE_EPS) -> Ragged:
    """Sort atoms per group, merge values within ``eps`` and sum their mass."""
    keep = probs > 0.0
    group, values, probs = group[keep], values[keep], probs[keep]
    order = np.lexsort((values, group))
    g, v, p = group[order], values[order], probs[order]
    if g.size == 0:
        return Ragged(v, p, np.zeros(n_groups + 1, dtype=np.int64))
    new = np.empty(g.size, dtype=bool)
    new[0] = True
    new[1:] = (g[1:] != g[:-1]) | (np.diff(v) > eps)
    starts = np.flatnonzero(new)
    counts = np.bincount(g[starts], minlength=n_groups)
    return Ragged(v[starts], np.add.reduceat(p, starts), offsets_from_counts(counts))


def ragged_w1(a: Ragged, b: Ragged) -> np.ndarray:
    """Per-cell exact Wasserstein-1 distance between two ragged tables."""
    n = a.n_cells
    group = np.concatenate([a.cell_ids(), b.cell_ids()])
    values = np.concatenate([a.values, b.values])
    signed = np.concatenate([a.probs, -b.probs])
    order = np.lexsort((values, group))
    g, v, s = group[order], values[order], signed[order]
    running = np.cumsum(s)
    same = g[1:] == g[:-1]
    gaps = np.where(same, np.diff(v), 0.0)
    return np.bincount(g[:-1], np.abs(running[:-1]) * gaps, minlength=n)


def project_large(table: Ragged, cap: int, n: int) -> tuple[Ragged, float]:
    """Re-project cells holding more than ``cap`` atoms onto ``n`` quantiles.

    Returns the new table and the largest Wasserstein-1 error introduced.
    """
    counts = table.counts
    big = np.flatnonzero(counts > cap)
    if big.size == 0:
        return table, 0.0
    sub = table.take(big)
    proj = Ragged.from_quantiles(sub.quantiles(n))
    proj = group_canonicalize(proj.cell_ids(), proj.values, proj.probs, big.size)
    err = float(np.max(ragged_w1(sub, proj)))
    new_counts = counts.copy()
    new_counts[big] = proj.counts
    out_offsets = offsets_from_counts(new_counts)
    values = np.empty(out_offsets[-1])
    probs = np.empty(out_offsets[-1])
    small = np.flatnonzero(counts <= cap)
    src = segment_positions(table.offsets[small], counts[small])
    dst = segment_positions(out_offsets[small], counts[small])
    values[dst], probs[dst] = table.values[src], table.probs[src]
    dst = segment_positions(out_offsets[big], proj.counts)
    values[dst], probs[dst] = proj.values, proj.probs
    return Ragged(values, probs, out_offsets), err


def comonotone_combine(tables: list[Ragged], weights: np.ndarray, eps: float = MERGE_EPS) -> Ragged:
    """Per-cell law of ``sum_i w_i Q_i(U)`` with one uniform ``U`` shared across tables.

    ``weights`` has shape ``(n_cells, m)`` or ``(m,)``.
    """
    m = len(tables)
    n = tables[0].n_cells
    weights = np.broadcast_to(np.asarray(weights, dtype=float), (n, m))
    if m == 1:
        t = tables[0]
        scale = np.repeat(weights[:, 0], t.counts)
        return Ragged(t.values * scale, t.probs.copy(), t.offsets.copy())
    cums = [t._within_cum() for t in tables]
    cells = np.concatenate([np.arange(n)] * 2 + [t.cell_ids() for t in tables])
    cuts = np.concatenate([np.zeros(n), np.ones(n)] + cums)
    cuts = np.clip(cuts, 0.0, 1.0)
    order = np.lexsort((cuts, cells))
    cells, cuts = cells[order], cuts[order]
    same = cells[1:] == cells[:-1]
    width = np.where(same, np.diff(cuts), 0.0)
    keep = same & (width > 1e-13)
    lo, hi, owner = cuts[:-1][keep], cuts[1:][keep], cells[:-1][keep]
    mid = 0.5 * (lo + hi)
    total = np.zeros(mid.size)
    for i, t in enumerate(tables):
        total += weights[owner, i] * t.quantiles_at(owner, mid)
    mass = hi - lo
    norm = np.bincount(owner, mass, minlength=n)
    return group_canonicalize(owner, total, mass / norm[owner], n, eps)
