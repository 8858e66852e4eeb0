"""General discount functions ``d_t`` and their one-step factors.

Every variant is tabulated up to ``max_horizon`` on construction, so sweeps
read ``d_t`` and ``d_hat_t = d_{t+1} / d_t`` from arrays instead of
re-evaluating transcendental functions.  Requests past the tabulated range
raise rather than silently extrapolate.
"""

from __future__ import annotations

import math
from typing import Any, Mapping, Sequence

import numpy as np

DEFAULT_MAX_HORIZON = 4096

_KINDS = (
    "exponential",
    "hyperbolic",
    "generalized_hyperbolic",
    "quasi_hyperbolic",
    "cir",
    "truncated_hyperbolic",
    "modified_integral_hyperbolic",
    "tabulated",
    "truncated",
    "exponential_mixture",
)


def cir_bond_price(a: float, b: float, sigma: float, r0: float, tau):
    """Zero-coupon bond price ``A(tau) exp(-B(tau) r0)`` under CIR dynamics."""
    tau = np.asarray(tau, dtype=float)
    h = math.sqrt(a * a + 2.0 * sigma * sigma)
    growth = np.expm1(h * tau)
    denom = (a + h) * growth + 2.0 * h
    log_a = (2.0 * a * b / sigma**2) * (
        math.log(2.0 * h) + (a + h) * tau / 2.0 - np.log(denom)
    )
    big_b = 2.0 * growth / denom
    return np.exp(log_a - big_b * r0)


class DiscountFunction:
    """A tabulated discount function.

    Use the classmethod constructors (``exponential``, ``hyperbolic``, ...)
    rather than calling ``__init__`` directly.  Instances are immutable.
    """

    __slots__ = ("kind", "params", "max_horizon", "_d", "_hat")

    def __init__(self, kind: str, params: Mapping[str, Any], d: np.ndarray, hat: np.ndarray):
        self.kind = kind
        self.params = dict(params)
        self.max_horizon = len(hat)
        self._d = d
        self._hat = hat
        self._d.setflags(write=False)
        self._hat.setflags(write=False)

    # ------------------------------------------------------------------
    # constructors

    @classmethod
    def exponential(cls, gamma: float, max_horizon: int = DEFAULT_MAX_HORIZON) -> "DiscountFunction":
        if not 0.0 < gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
        t = np.arange(max_horizon + 1, dtype=float)
        return cls("exponential", {"gamma": gamma}, gamma**t, np.full(max_horizon, float(gamma)))

    @classmethod
    def hyperbolic(cls, k: float, max_horizon: int = DEFAULT_MAX_HORIZON) -> "DiscountFunction":
        if not k > 0.0:
            raise ValueError(f"k must be positive, got {k}")
        t = np.arange(max_horizon + 1, dtype=float)
        d = 1.0 / (1.0 + k * t)
        hat = (1.0 + k * t[:-1]) / (1.0 + k * t[1:])
        return cls("hyperbolic", {"k": k}, d, hat)

    @classmethod
    def generalized_hyperbolic(
        cls, k: float, b: float, max_horizon: int = DEFAULT_MAX_HORIZON
    ) -> "DiscountFunction":
        if not k > 0.0 or not b > 0.0:
            raise ValueError(f"k and b must be positive, got k={k}, b={b}")
        t = np.arange(max_horizon + 1, dtype=float)
        d = (1.0 + k * t) ** (-b)
        hat = ((1.0 + k * t[:-1]) / (1.0 + k * t[1:])) ** b
        return cls("generalized_hyperbolic", {"k": k, "b": b}, d, hat)

    @classmethod
    def quasi_hyperbolic(
        cls, beta: float, gamma: float, max_horizon: int = DEFAULT_MAX_HORIZON
    ) -> "DiscountFunction":
        # beta-delta form: d_0 = 1, d_t = beta * gamma**t for t >= 1
        if not 0.0 < beta <= 1.0 or not 0.0 < gamma <= 1.0:
            raise ValueError(f"beta and gamma must lie in (0, 1], got beta={beta}, gamma={gamma}")
        t = np.arange(max_horizon + 1, dtype=float)
        d = beta * gamma**t
        d[0] = 1.0
        hat = np.full(max_horizon, float(gamma))
        hat[0] = beta * gamma
        return cls("quasi_hyperbolic", {"beta": beta, "gamma": gamma}, d, hat)

    @classmethod
    def cir(
        cls,
        a: float,
        b: float,
        sigma: float,
        r0: float,
        max_horizon: int = DEFAULT_MAX_HORIZON,
        enforce_feller: bool = True,
    ) -> "DiscountFunction":
        """Time-0 zero-coupon curve of a CIR short rate, one period = one time unit.

        ``enforce_feller`` rejects parameters with ``2ab < sigma**2``.  The
        bond-price formula itself stays valid without the condition (the rate
        can touch zero but never goes negative), so callers reproducing curves
        outside the Feller region may switch the check off explicitly.
        """
        if a <= 0 or b <= 0 or sigma <= 0 or r0 < 0:
            raise ValueError("CIR requires a, b, sigma > 0 and r0 >= 0")
        if enforce_feller and 2.0 * a * b < sigma**2:
            raise ValueError(
                f"CIR parameters violate the Feller condition 2ab >= sigma^2 "
                f"({2 * a * b:.6g} < {sigma**2:.6g})"
            )
        t = np.arange(max_horizon + 1, dtype=float)
        d = cir_bond_price(a, b, sigma, r0, t)
        d[0] = 1.0
        hat = np.minimum(d[1:] / d[:-1], 1.0)
        params = {"a": a, "b": b, "sigma": sigma, "r0": r0, "enforce_feller": enforce_feller}
        return cls("cir", params, d, hat)

    @classmethod
    def truncated_hyperbolic(
        cls, k: float, gamma_tail: float, max_horizon: int = DEFAULT_MAX_HORIZON
    ) -> "DiscountFunction":
        if not 0.0 < gamma_tail < 1.0:
            raise ValueError(f"gamma_tail must lie in (0, 1), got {gamma_tail}")
        base = cls.hyperbolic(k, max_horizon)
        hat = np.minimum(base._hat, gamma_tail)
        return cls._from_factors("truncated_hyperbolic", {"k": k, "gamma_tail": gamma_tail}, hat)

    @classmethod
    def modified_integral_hyperbolic(
        cls, k: float, gamma_tail: float, max_horizon: int = DEFAULT_MAX_HORIZON
    ) -> "DiscountFunction":
        """``gamma_tail**t / (1 + k t)``: hyperbolic weights integrated only up to ``gamma_tail``."""
        if not k > 0.0:
            raise ValueError(f"k must be positive, got {k}")
        if not 0.0 < gamma_tail < 1.0:
            raise ValueError(f"gamma_tail must lie in (0, 1), got {gamma_tail}")
        t = np.arange(max_horizon + 1, dtype=float)
        d = gamma_tail**t / (1.0 + k * t)
        hat = gamma_tail * (1.0 + k * t[:-1]) / (1.0 + k * t[1:])
        return cls("modified_integral_hyperbolic", {"k": k, "gamma_tail": gamma_tail}, d, hat)

    @classmethod
    def tabulated(
        cls, factors: Sequence[float], max_horizon: int = DEFAULT_MAX_HORIZON
    ) -> "DiscountFunction":
        """Product of explicit one-step factors; the last factor repeats forever."""
        factors = np.asarray(factors, dtype=float)
        if factors.ndim != 1 or factors.size == 0:
            raise ValueError("need at least one one-step factor")
        if np.any(factors <= 0.0) or np.any(factors > 1.0):
            raise ValueError("one-step factors must lie in (0, 1]")
        hat = np.empty(max_horizon)
        n = min(factors.size, max_horizon)
        hat[:n] = factors[:n]
        hat[n:] = factors[-1]
        return cls._from_factors("tabulated", {"factors": factors.tolist()}, hat)

    @classmethod
    def exponential_mixture(
        cls, gammas: Sequence[float], weights: Sequence[float], max_horizon: int = DEFAULT_MAX_HORIZON
    ) -> "DiscountFunction":
        """``sum_i w_i gamma_i**t`` with weights normalised to sum to one."""
        g = np.asarray(gammas, dtype=float)
        w = np.asarray(weights, dtype=float)
        if g.ndim != 1 or g.size == 0 or g.shape != w.shape:
            raise ValueError("gammas and weights must be non-empty vectors of equal length")
        if np.any(g <= 0.0) or np.any(g > 1.0):
            raise ValueError("mixture gammas must lie in (0, 1]")
        if np.any(w < 0.0) or not w.sum() > 0.0:
            raise ValueError("mixture weights must be non-negative and not all zero")
        w = w / w.sum()
        t = np.arange(max_horizon + 1, dtype=float)
        with np.errstate(divide="ignore"):
            logs = np.log(w)[:, None] + t[None, :] * np.log(g)[:, None]
        top = logs.max(axis=0)
        log_d = top + np.log(np.exp(logs - top).sum(axis=0))
        d = np.exp(log_d)
        d[0] = 1.0
        hat = np.minimum(np.exp(np.diff(log_d)), 1.0)
        return cls("exponential_mixture", {"gammas": g.tolist(), "weights": w.tolist()}, d, hat)

    @classmethod
    def _from_factors(cls, kind: str, params: Mapping[str, Any], hat: np.ndarray,
                      head: np.ndarray | None = None) -> "DiscountFunction":
        """Values from one-step factors; an optional ``head`` fixes ``d_0..d_k`` verbatim."""
        d = np.empty(hat.size + 1)
        start = 0
        if head is not None:
            start = head.size - 1
            d[: head.size] = head
        else:
            d[0] = 1.0
        # sequential product so that d[t+1] == d[t] * hat[t] holds bit-for-bit
        acc = d[start]
        for i in range(start, hat.size):
            acc = acc * hat[i]
            d[i + 1] = acc
        return cls(kind, params, d, np.array(hat, dtype=float))

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any], max_horizon: int = DEFAULT_MAX_HORIZON) -> "DiscountFunction":
        """Build from a tagged record such as ``{"type": "hyperbolic", "k": 0.05}``."""
        cfg = dict(cfg)
        kind = cfg.pop("type", None)
        max_horizon = int(cfg.pop("max_horizon", max_horizon))
        builders = {
            "exponential": (cls.exponential, {"gamma"}),
            "hyperbolic": (cls.hyperbolic, {"k"}),
            "generalized_hyperbolic": (cls.generalized_hyperbolic, {"k", "b"}),
            "quasi_hyperbolic": (cls.quasi_hyperbolic, {"beta", "gamma"}),
            "cir": (cls.cir, {"a", "b", "sigma", "r0", "enforce_feller"}),
            "truncated_hyperbolic": (cls.truncated_hyperbolic, {"k", "gamma_tail"}),
            "modified_integral_hyperbolic": (cls.modified_integral_hyperbolic, {"k", "gamma_tail"}),
            "tabulated": (cls.tabulated, {"factors"}),
            "exponential_mixture": (cls.exponential_mixture, {"gammas", "weights"}),
            "truncated": (cls._truncated_from_config, {"base", "t_prime"}),
        }
        if kind not in builders:
            raise ValueError(f"unknown discount type {kind!r}; expected one of {_KINDS}")
        builder, allowed = builders[kind]
        unknown = set(cfg) - allowed
        if unknown:
            raise ValueError(f"unknown key(s) for {kind} discount: {sorted(unknown)}")
        return builder(**cfg, max_horizon=max_horizon)

    @classmethod
    def _truncated_from_config(cls, base, t_prime, max_horizon=DEFAULT_MAX_HORIZON):
        return cls.from_config(base, max_horizon).truncate_at_horizon(t_prime)

    @property
    def tail_factor(self) -> float:
        """One-step factor at the end of the tabulated range."""
        return float(self._hat[-1])

    def to_config(self) -> dict:
        return {"type": self.kind, **self.params}

    # ------------------------------------------------------------------
    # evaluation

    def _check(self, t: int, limit: int) -> int:
        t = int(t)
        if t < 0:
            raise ValueError(f"time must be non-negative, got {t}")
        if t > limit:
            raise ValueError(
                f"t={t} is beyond the tabulated horizon {self.max_horizon}; "
                "rebuild the discount function with a larger max_horizon"
            )
        return t

    def evaluate(self, t: int) -> float:
        return float(self._d[self._check(t, self.max_horizon)])

    __call__ = evaluate

    def one_step(self, t: int) -> float:
        return float(self._hat[self._check(t, self.max_horizon - 1)])

    def values(self, horizon: int) -> np.ndarray:
        """``d_0, ..., d_horizon`` as a read-only array."""
        self._check(horizon, self.max_horizon)
        return self._d[: horizon + 1]

    def factors(self, horizon: int) -> np.ndarray:
        """``d_hat_0, ..., d_hat_{horizon-1}``."""
        self._check(horizon, self.max_horizon)
        return self._hat[:horizon]

    def partial_sum(self, horizon: int | None = None) -> float:
        """``sum_{t < horizon} d_t``; with ``horizon=None`` the full tabulated sum plus a geometric tail."""
        if horizon is not None:
            return float(self.values(horizon)[:-1].sum())
        tail_ratio = float(self._hat[-1])
        head = float(self._d[:-1].sum())
        if tail_ratio >= 1.0:
            return math.inf
        return head + float(self._d[-1]) / (1.0 - tail_ratio)

    def is_summable(self) -> bool:
        if self.kind == "hyperbolic":
            return False
        if self.kind == "generalized_hyperbolic":
            return self.params["b"] > 1.0
        if self.kind in ("exponential", "quasi_hyperbolic"):
            return self.params["gamma"] < 1.0
        return bool(self._hat[-1] < 1.0)

    def truncate_at_horizon(self, t_prime: int) -> "DiscountFunction":
        """Cap every one-step factor at ``d_hat_{t_prime}``.

        The result matches ``self`` on ``t <= t_prime`` whenever the one-step
        factor is non-decreasing, and decays geometrically afterwards.
        """
        t_prime = int(t_prime)
        if t_prime < 1:
            raise ValueError("truncation horizon must be at least 1")
        cap = self.one_step(t_prime)
        hat = np.minimum(self._hat, cap)
        params = {"base": self.to_config(), "t_prime": t_prime}
        capped = np.flatnonzero(self._hat > cap)
        first = int(capped[0]) if capped.size else hat.size
        return DiscountFunction._from_factors("truncated", params, hat, head=self._d[: first + 1].copy())

    def __repr__(self) -> str:
        params = ", ".join(f"{k}={v!r}" for k, v in self.params.items() if k != "factors")
        return f"DiscountFunction.{self.kind}({params})"
