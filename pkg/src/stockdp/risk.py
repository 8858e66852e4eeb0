"""OCE utilities, the stock-augmented objective, grid OCE and error bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .distributions import ReturnDistribution

_PARAMS = {
    "mean": (),
    "cvar": ("tau",),
    "mean_cvar": ("kappa1", "tau"),
    "entropic": ("beta",),
    "mean_variance": ("kappa",),
}


@dataclass(frozen=True)
class OceUtility:
    """Concave utility ``f`` with ``f(0) = 0`` from the OCE family.

    Entropic utilities keep the sign of ``beta`` as given, but both signs
    describe the same risk-averse function ``(1 - exp(-|beta| x)) / |beta|``:
    a negative ``beta`` is read in the ``beta^{-1}(exp(beta x) - 1)`` form and
    a positive one in the ``beta^{-1}(1 - exp(-beta x))`` form.
    """

    kind: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _PARAMS:
            raise ValueError(f"unknown utility {self.kind!r}; expected one of {sorted(_PARAMS)}")
        p = dict(self.params)
        missing = set(_PARAMS[self.kind]) - set(p)
        extra = set(p) - set(_PARAMS[self.kind])
        if missing or extra:
            raise ValueError(f"{self.kind} utility takes {_PARAMS[self.kind]}, got {sorted(p)}")
        p = {k: float(v) for k, v in p.items()}
        if "tau" in p and not 0.0 < p["tau"] <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if "kappa1" in p and not 0.0 <= p["kappa1"] <= 1.0:
            raise ValueError("kappa1 must lie in [0, 1]")
        if self.kind == "entropic" and p["beta"] == 0.0:
            raise ValueError("entropic beta must be non-zero; use the mean utility instead")
        if self.kind == "mean_variance" and not p["kappa"] > 0.0:
            raise ValueError("mean-variance kappa must be positive")
        object.__setattr__(self, "params", p)

    # constructors

    @classmethod
    def mean(cls) -> "OceUtility":
        return cls("mean")

    @classmethod
    def cvar(cls, tau: float) -> "OceUtility":
        return cls("cvar", {"tau": tau})

    @classmethod
    def mean_cvar(cls, kappa1: float, tau: float) -> "OceUtility":
        return cls("mean_cvar", {"kappa1": kappa1, "tau": tau})

    @classmethod
    def entropic(cls, beta: float) -> "OceUtility":
        return cls("entropic", {"beta": beta})

    @classmethod
    def mean_variance(cls, kappa: float) -> "OceUtility":
        return cls("mean_variance", {"kappa": kappa})

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "OceUtility":
        cfg = dict(cfg)
        kind = cfg.pop("type", None)
        if kind not in _PARAMS:
            raise ValueError(f"unknown utility type {kind!r}; expected one of {sorted(_PARAMS)}")
        return cls(kind, cfg)

    def to_config(self) -> dict:
        return {"type": self.kind, **self.params}

    # derived constants

    @property
    def kappa2(self) -> float:
        p = self.params
        if self.kind == "mean_cvar":
            return (1.0 - p["kappa1"]) / p["tau"] + p["kappa1"]
        if self.kind == "cvar":
            return 1.0 / p["tau"]
        raise AttributeError(f"{self.kind} utility has no kappa2")

    @property
    def loss_aversion(self) -> float:
        """``(kappa2 - kappa1) / kappa1`` for mean-CVaR."""
        if self.kind != "mean_cvar":
            raise AttributeError("loss aversion is defined for mean_cvar only")
        k1 = self.params["kappa1"]
        if k1 == 0.0:
            return math.inf
        return (self.kappa2 - k1) / k1

    @property
    def scale_indifferent(self) -> bool:
        return self.kind in ("mean", "cvar", "mean_cvar")

    @property
    def risk_neutral(self) -> bool:
        if self.kind == "mean":
            return True
        return self.kind == "mean_cvar" and self.params["kappa1"] == 1.0

    @property
    def _b(self) -> float:
        return abs(self.params["beta"])

    @property
    def lipschitz(self) -> float:
        """Global Lipschitz constant; ``inf`` when only bounded ranges have one."""
        if self.kind == "mean":
            return 1.0
        if self.kind in ("cvar", "mean_cvar"):
            return self.kappa2
        return math.inf

    def lipschitz_on(self, lo: float, hi: float) -> float:
        """Lipschitz constant of ``f`` restricted to ``[lo, hi]``."""
        if lo > hi:
            raise ValueError("empty interval")
        if self.kind == "entropic":
            return math.exp(-self._b * lo)
        if self.kind == "mean_variance":
            return max(1.0 - 2.0 * self.params["kappa"] * lo, 0.0)
        return self.lipschitz

    # function values

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "mean":
            return x.copy() if x.ndim else x + 0.0
        if self.kind == "cvar":
            return np.minimum(x, 0.0) / p["tau"]
        if self.kind == "mean_cvar":
            return p["kappa1"] * np.maximum(x, 0.0) + self.kappa2 * np.minimum(x, 0.0)
        if self.kind == "entropic":
            b = self._b
            return -np.expm1(-b * x) / b
        kappa = p["kappa"]
        peak = 0.5 / kappa
        return np.where(x <= peak, x - kappa * x * x, 0.25 / kappa)

    utility = __call__

    def derivative(self, x):
        """Right derivative ``f'(x+)``."""
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "mean":
            return np.ones_like(x)
        if self.kind == "cvar":
            return np.where(x < 0.0, 1.0 / p["tau"], 0.0)
        if self.kind == "mean_cvar":
            return np.where(x < 0.0, self.kappa2, p["kappa1"])
        if self.kind == "entropic":
            return np.exp(-self._b * x)
        kappa = p["kappa"]
        return np.where(x < 0.5 / kappa, 1.0 - 2.0 * kappa * x, 0.0)

    def second_derivative(self, x):
        """Second derivative away from kinks (zero on piecewise-linear parts)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "entropic":
            b = self._b
            return -b * np.exp(-b * x)
        if self.kind == "mean_variance":
            kappa = self.params["kappa"]
            return np.where(x < 0.5 / kappa, -2.0 * kappa, 0.0)
        return np.zeros_like(x)

    def inverse(self, y):
        """``f^{-1}`` where ``f`` is strictly increasing."""
        y = np.asarray(y, dtype=float)
        p = self.params
        if self.kind == "mean":
            return y + 0.0
        if self.kind == "entropic":
            b = self._b
            return -np.log1p(-b * y) / b
        if self.kind == "mean_cvar" and p["kappa1"] > 0.0:
            return np.where(y >= 0.0, y / p["kappa1"], y / self.kappa2)
        raise ValueError(f"{self.kind} utility is not invertible on the whole line")

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v:g}" for k, v in self.params.items())
        return f"OceUtility.{self.kind}({args})"


def objective(f: OceUtility, nu: ReturnDistribution, c: float, d_t: float) -> float:
    """``E[f(d_t c + d_t G)] / d_t`` for ``G ~ nu``."""
    if not d_t > 0:
        raise ValueError("d_t must be positive")
    if f.scale_indifferent:
        return float(np.dot(f(c + nu.values), nu.probs))
    return float(np.dot(f(d_t * c + d_t * nu.values), nu.probs)) / d_t


def objective_terms(f: OceUtility, values: np.ndarray, c, d_t: float) -> np.ndarray:
    """Per-atom ``f(d_t (c + v)) / d_t``; ``c`` broadcasts against ``values``."""
    if f.scale_indifferent:
        return f(c + values)
    return f(d_t * c + d_t * values) / d_t


def _grid_nodes(grid) -> np.ndarray:
    nodes = getattr(grid, "initial", grid)
    nodes = np.unique(np.asarray(nodes, dtype=float).ravel())
    if nodes.size == 0:
        raise ValueError("stock grid is empty")
    return nodes


def oce(f: OceUtility, nu: ReturnDistribution, grid) -> tuple[float, float]:
    """Grid-search OCE ``max_c0 {-c0 + E f(c0 + G)}``; ties go to the smallest ``c0``."""
    nodes = _grid_nodes(grid)
    scores = -nodes + f(nodes[:, None] + nu.values[None, :]) @ nu.probs
    best = int(argmax_lowest(scores))
    return float(scores[best]), float(nodes[best])


def argmax_lowest(scores, rtol: float = 1e-12, axis: int = -1):
    """Index of the maximum, preferring the lowest index among near-ties."""
    scores = np.asarray(scores, dtype=float)
    top = np.max(scores, axis=axis, keepdims=True)
    finite = np.isfinite(top)
    slack = np.where(finite, rtol * (1.0 + np.abs(np.where(finite, top, 0.0))), 0.0)
    hit = scores >= top - slack
    return np.argmax(hit, axis=axis)


def certainty_equivalent(f: OceUtility, nu: ReturnDistribution) -> float:
    """``f^{-1}(E f(G))``."""
    return float(f.inverse(np.dot(f(nu.values), nu.probs)))


def oce_suboptimality_bound(lipschitz: float, d, eps, delta: float) -> float:
    """``2 L sum_t d_t eps_t + (1 + L) delta / 2``."""
    eps = np.asarray(eps, dtype=float)
    if np.any(eps < 0) or not delta > 0:
        raise ValueError("errors must be non-negative and the grid spacing positive")
    weights = d.values(eps.size)[: eps.size] if hasattr(d, "values") else np.asarray(d, float)[: eps.size]
    return float(2.0 * lipschitz * np.dot(weights, eps) + (1.0 + lipschitz) * delta / 2.0)


def entropic_tail_bound(d_tprime: float, beta_eff: float, delta_g: float) -> float:
    """``d_{T'}^2 beta Delta_G^2 / 8``."""
    if d_tprime < 0 or beta_eff < 0 or delta_g < 0:
        raise ValueError("inputs must be non-negative")
    return d_tprime * d_tprime * beta_eff * delta_g * delta_g / 8.0


def mean_cvar_tail_bound(d_tprime: float, loss_aversion: float, expected_shortfall: float) -> float:
    """``d_{T'} Lambda E|(c + G)_-|``."""
    if d_tprime < 0 or loss_aversion < 0 or expected_shortfall < 0:
        raise ValueError("inputs must be non-negative")
    return d_tprime * loss_aversion * expected_shortfall


def effective_risk_aversion(f: OceUtility, lo: float, hi: float, samples: int = 2001) -> float:
    """Largest absolute risk aversion ``-f''/f'`` over ``[lo, hi]``.

    Constant ``|beta|`` for the entropic utility and zero for the piecewise
    linear ones.
    """
    if lo > hi:
        raise ValueError("empty interval")
    if f.kind == "entropic":
        return f._b
    if f.kind != "mean_variance":
        return 0.0
    z = np.linspace(lo, hi, samples)
    slope = f.derivative(z)
    curv = -f.second_derivative(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(slope > 0, curv / slope, np.inf)
    return float(np.max(ratio))


def curvature_ratio(f: OceUtility, lo: float, hi: float, samples: int = 2001) -> float:
    """``|inf f''| / inf f'`` over ``[lo, hi]`` (separate infima)."""
    z = np.linspace(lo, hi, samples)
    m2 = float(np.min(f.second_derivative(z)))
    m1 = float(np.min(f.derivative(z)))
    if m1 <= 0:
        return math.inf
    return abs(m2) / m1
