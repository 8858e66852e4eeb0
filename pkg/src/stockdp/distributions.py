"""Finite-support return distributions.

A :class:`ReturnDistribution` is a sorted list of atoms ``(value, prob)``
with equal values merged.  Everything here is value-semantic: operations
return new objects and never mutate their inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

MERGE_EPS = 1e-9
PROB_TOL = 1e-9


def canonicalize(values, probs, eps: float = MERGE_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Sort atoms, drop zero mass and merge values closer than ``eps``.

    A merged group keeps its smallest value.
    """
    values = np.asarray(values, dtype=float).ravel()
    probs = np.asarray(probs, dtype=float).ravel()
    if values.shape != probs.shape:
        raise ValueError("values and probs must have the same length")
    keep = probs > 0.0
    values, probs = values[keep], probs[keep]
    if values.size == 0:
        raise ValueError("distribution has no mass")
    order = np.argsort(values, kind="stable")
    values, probs = values[order], probs[order]
    new = np.empty(values.size, dtype=bool)
    new[0] = True
    new[1:] = np.diff(values) > eps
    starts = np.flatnonzero(new)
    return values[starts], np.add.reduceat(probs, starts)


class ReturnDistribution:
    """Immutable finite-support distribution over returns."""

    __slots__ = ("values", "probs")

    def __init__(self, values, probs, *, canonical: bool = False, eps: float = MERGE_EPS):
        if canonical:
            v = np.asarray(values, dtype=float)
            p = np.asarray(probs, dtype=float)
        else:
            v, p = canonicalize(values, probs, eps)
        total = float(p.sum())
        if abs(total - 1.0) > PROB_TOL:
            raise ValueError(f"probabilities sum to {total!r}, expected 1")
        if not np.all(np.isfinite(v)):
            raise ValueError("atom values must be finite")
        v.setflags(write=False)
        p.setflags(write=False)
        self.values = v
        self.probs = p

    # construction helpers

    @classmethod
    def point(cls, value: float = 0.0) -> "ReturnDistribution":
        return cls(np.array([float(value)]), np.array([1.0]), canonical=True)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence[float]]) -> "ReturnDistribution":
        arr = np.asarray(list(pairs), dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])

    @classmethod
    def uniform(cls, values) -> "ReturnDistribution":
        values = np.asarray(values, dtype=float).ravel()
        return cls(values, np.full(values.size, 1.0 / values.size))

    def to_pairs(self) -> list[list[float]]:
        return [[float(v), float(p)] for v, p in zip(self.values, self.probs)]

    def to_json(self) -> str:
        return json.dumps(self.to_pairs())

    @classmethod
    def from_json(cls, text: str) -> "ReturnDistribution":
        return cls.from_pairs(json.loads(text))

    # statistics

    def __len__(self) -> int:
        return self.values.size

    def mean(self) -> float:
        return float(np.dot(self.values, self.probs))

    def variance(self) -> float:
        m = self.mean()
        return float(np.dot((self.values - m) ** 2, self.probs))

    @property
    def support(self) -> tuple[float, float]:
        return float(self.values[0]), float(self.values[-1])

    def cdf(self, x) -> np.ndarray:
        cum = np.cumsum(self.probs)
        idx = np.searchsorted(self.values, x, side="right")
        return np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)

    def quantile(self, tau) -> np.ndarray:
        """Left-continuous generalized inverse ``inf {v : F(v) >= tau}``."""
        cum = np.cumsum(self.probs)
        idx = np.searchsorted(cum, np.asarray(tau, dtype=float) - 1e-12, side="left")
        return self.values[np.minimum(idx, self.values.size - 1)]

    # algebra

    def affine(self, scale: float, shift: float) -> "ReturnDistribution":
        if not scale > 0:
            raise ValueError("scale must be positive")
        return ReturnDistribution(self.values * scale + shift, self.probs.copy(), canonical=True)

    def shift(self, amount: float) -> "ReturnDistribution":
        return ReturnDistribution(self.values + amount, self.probs.copy(), canonical=True)

    def expectation(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.dot(fn(self.values), self.probs))

    def expectation_of_utility(self, f, pre_shift: float = 0.0, pre_scale: float = 1.0) -> float:
        """``E[f(pre_scale * G + pre_shift)] / pre_scale``."""
        if not pre_scale > 0:
            raise ValueError("pre_scale must be positive")
        return float(np.dot(f(pre_scale * self.values + pre_shift), self.probs)) / pre_scale

    def wasserstein1(self, other: "ReturnDistribution") -> float:
        return wasserstein1(self, other)

    def project_to_quantiles(self, n: int) -> "QuantileRepresentation":
        return project_to_quantiles(self, n)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReturnDistribution):
            return NotImplemented
        return np.array_equal(self.values, other.values) and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash((self.values.tobytes(), self.probs.tobytes()))

    def __repr__(self) -> str:
        if len(self) <= 6:
            atoms = ", ".join(f"({v:.6g}, {p:.6g})" for v, p in zip(self.values, self.probs))
        else:
            atoms = f"{len(self)} atoms on [{self.values[0]:.6g}, {self.values[-1]:.6g}]"
        return f"ReturnDistribution({atoms})"


@dataclass(frozen=True)
class QuantileRepresentation:
    """``n`` quantile values at the midpoint levels ``(2j - 1) / (2n)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("need a non-empty 1-d array of quantile values")
        if np.any(np.diff(v) < 0):
            raise ValueError("quantile values must be non-decreasing")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def levels(self) -> np.ndarray:
        return quantile_levels(self.n)

    def to_distribution(self) -> ReturnDistribution:
        return ReturnDistribution(self.values, np.full(self.n, 1.0 / self.n))


def quantile_levels(n: int) -> np.ndarray:
    return (2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n)


def point_mass(value: float = 0.0) -> ReturnDistribution:
    return ReturnDistribution.point(value)


def affine(nu: ReturnDistribution, scale: float, shift: float) -> ReturnDistribution:
    return nu.affine(scale, shift)


def mixture(components: Sequence[tuple[float, ReturnDistribution]]) -> ReturnDistribution:
    """Probabilistic mixture of ``(weight, distribution)`` pairs."""
    if not components:
        raise ValueError("mixture needs at least one component")
    weights = np.array([w for w, _ in components], dtype=float)
    if np.any(weights < 0):
        raise ValueError("mixture weights must be non-negative")
    if abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError(f"mixture weights sum to {weights.sum()!r}, expected 1")
    values = np.concatenate([nu.values for _, nu in components])
    probs = np.concatenate([w * nu.probs for w, (_, nu) in zip(weights, components)])
    return ReturnDistribution(values, probs)


def wasserstein1(nu: ReturnDistribution, other: ReturnDistribution) -> float:
    """Exact ``integral |F - F'| dx`` between two step CDFs."""
    grid = np.union1d(nu.values, other.values)
    if grid.size == 1:
        return 0.0
    gap = np.abs(nu.cdf(grid[:-1]) - other.cdf(grid[:-1]))
    return float(np.dot(gap, np.diff(grid)))


def project_to_quantiles(nu: ReturnDistribution, n: int) -> QuantileRepresentation:
    """W1-optimal projection onto ``n`` equally weighted atoms."""
    if n < 1:
        raise ValueError("need at least one quantile")
    return QuantileRepresentation(nu.quantile(quantile_levels(n)))


def comonotone_sum(dists: Sequence[ReturnDistribution], weights) -> ReturnDistribution:
    """Law of ``sum_i w_i Q_i(U)`` for a single uniform ``U`` (quantile coupling).

    The quantile function of the result is the weighted sum of the input
    quantile functions, which is piecewise constant between the union of the
    inputs' cumulative-probability breakpoints.
    """
    weights = np.asarray(weights, dtype=float)
    if len(dists) != weights.size:
        raise ValueError("one weight per distribution")
    cuts = np.unique(np.concatenate([np.cumsum(d.probs)[:-1] for d in dists] + [[0.0, 1.0]]))
    cuts = cuts[(cuts >= 0.0) & (cuts <= 1.0)]
    lo, hi = cuts[:-1], cuts[1:]
    width = hi - lo
    keep = width > 1e-15
    lo, hi, width = lo[keep], hi[keep], width[keep]
    mid = 0.5 * (lo + hi)
    total = np.zeros(mid.size)
    for w, d in zip(weights, dists):
        total += w * d.quantile(mid)
    return ReturnDistribution(total, width / width.sum())
