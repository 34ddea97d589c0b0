"""Linear benchmark analytics: lag filters, gains and variance bounds.

Filters are rational functions of the lag operator ``L``:
``num[0] + num[1] L + ...`` over ``den[0] + den[1] L + ...`` with
``den[0] == 1``.  The replenishment filter of one tier is

    H(L) = ((1 + theta*lam) L - (theta*lam + 1 - lam) L^2) / (1 - (1 - lam) L)

and a tier's own decision shock enters through the difference filter
``1 - L``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import signal

TAIL_TOL = 1e-12
QUAD_NODES = 2 ** 14


@dataclass(frozen=True)
class LagFilter:
    num: tuple[float, ...]
    den: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if not self.den or self.den[0] != 1.0:
            raise ValueError("denominator constant term must be 1")
        object.__setattr__(self, "num", tuple(float(c) for c in self.num))
        object.__setattr__(self, "den", tuple(float(c) for c in self.den))

    @cached_property
    def pole_radius(self) -> float:
        """Largest pole modulus in the ``z = 1/L`` plane (0 for FIR filters)."""
        den = np.trim_zeros(np.asarray(self.den), "b")
        if len(den) <= 1:
            return 0.0
        return float(np.max(np.abs(np.roots(den))))

    def impulse(self, n: int) -> np.ndarray:
        """First ``n`` impulse-response coefficients ``h_0..h_{n-1}``."""
        x = np.zeros(n)
        if n:
            x[0] = 1.0
        return signal.lfilter(self.num, self.den, x)

    def depth(self, tol: float = TAIL_TOL) -> int:
        """Truncation depth whose discarded tail energy is below ``tol``.

        FIR filters are returned whole.  Otherwise the depth is doubled until
        the energy in the last half of the kept window is below ``tol`` and
        the pole envelope has decayed by at least half over that window.
        """
        rho = self.pole_radius
        if rho == 0.0:
            return max(len(self.num), 1)
        if rho >= 1.0:
            raise ValueError("filter is not square summable")
        n = 64
        while True:
            h = self.impulse(n)
            half = np.sum(h[n // 2:] ** 2)
            if half < tol and rho ** (n // 2) <= 0.5:
                return n
            n *= 2

    def energy(self, tol: float = TAIL_TOL) -> float:
        """``sum_j h_j^2`` truncated per :meth:`depth`."""
        h = self.impulse(self.depth(tol))
        return math.fsum(h * h)

    def response(self, omega) -> np.ndarray:
        """Complex response at ``L = exp(-i omega)``."""
        z = np.exp(-1j * np.asarray(omega, float))
        num = np.polynomial.polynomial.polyval(z, self.num)
        den = np.polynomial.polynomial.polyval(z, self.den)
        return num / den

    def apply(self, x: np.ndarray, axis: int = -1) -> np.ndarray:
        """Filter a series with zero pre-history."""
        return signal.lfilter(self.num, self.den, x, axis=axis)


def tier_filter(theta: float, lam: float) -> LagFilter:
    _check(theta, lam, allow_zero_theta=True)
    a = theta * lam
    return LagFilter((0.0, 1.0 + a, -(a + 1.0 - lam)), (1.0, -(1.0 - lam)))


def shock_filter() -> LagFilter:
    return LagFilter((1.0, -1.0))


def identity_filter() -> LagFilter:
    return LagFilter((1.0,))


def _check(theta, lam, allow_zero_theta=False):
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"smoothing must lie in (0, 1], got {lam!r}")
    if theta < 0 or (theta == 0 and not allow_zero_theta):
        raise ValueError(f"theta must be > 0, got {theta!r}")


def tier_impulse(theta: float, lam: float, n: int) -> np.ndarray:
    """Closed-form impulse coefficients of :func:`tier_filter`."""
    h = np.zeros(n)
    if n > 1:
        h[1] = 1.0 + theta * lam
    if n > 2:
        j = np.arange(2, n)
        h[2:] = -theta * lam ** 2 * (1.0 - lam) ** (j - 2)
    return h


def frequency_gain(filt: LagFilter, omega) -> np.ndarray:
    return np.abs(filt.response(omega)) ** 2


def tier_gain(theta: float, lam: float, omega) -> np.ndarray:
    """Closed-form squared modulus of the tier filter."""
    u = 1.0 - np.cos(np.asarray(omega, float))
    return 1.0 + 2 * theta * lam * (2 - lam + theta * lam) * u / (lam ** 2 + 2 * (1 - lam) * u)


def average_gain(theta: float, lam: float) -> float:
    _check(theta, lam, allow_zero_theta=True)
    a = theta * lam
    return 1.0 + 2.0 * a + 2.0 * a * a / (2.0 - lam)


def mean_gain_quadrature(gain, nodes: int = QUAD_NODES) -> float:
    """``(1/2pi) * integral of gain(omega)`` over one period (periodic trapezoid)."""
    omega = -np.pi + 2 * np.pi * np.arange(nodes) / nodes
    return float(np.mean(gain(omega)))


def cascade(filters: Sequence[LagFilter]) -> LagFilter:
    if not filters:
        raise ValueError("cascade needs at least one filter")
    num, den = np.array([1.0]), np.array([1.0])
    for f in filters:
        num = np.convolve(num, f.num)
        den = np.convolve(den, f.den)
    return LagFilter(tuple(num), tuple(den))


@dataclass(frozen=True)
class GainProfile:
    """Per-tier replenishment parameters, tier 1 (most downstream) first."""
    thetas: tuple[float, ...]
    lams: tuple[float, ...]

    def __post_init__(self):
        if len(self.thetas) != len(self.lams):
            raise ValueError("thetas and lams must have equal length")
        for th, la in zip(self.thetas, self.lams):
            _check(th, la, allow_zero_theta=True)

    @classmethod
    def uniform(cls, theta: float, lam: float, n: int) -> "GainProfile":
        return cls((float(theta),) * n, (float(lam),) * n)

    @property
    def n(self) -> int:
        return len(self.thetas)

    @property
    def gammas(self) -> np.ndarray:
        return np.array([average_gain(t, l) for t, l in zip(self.thetas, self.lams)])

    @property
    def theta_floor(self) -> float:
        return min(self.thetas)

    @property
    def lam_floor(self) -> float:
        return min(self.lams)

    @property
    def gamma_floor(self) -> float:
        return average_gain(self.theta_floor, self.lam_floor)

    def filters(self) -> list[LagFilter]:
        return [tier_filter(t, l) for t, l in zip(self.thetas, self.lams)]


def _require_tiers(k, gains):
    if k < 0 or k > gains.n:
        raise ValueError(f"tier index {k} outside 0..{gains.n}")


def demand_bound(k: int, demand_var: float, gains: GainProfile) -> float:
    """``demand_var * prod_{r<=k} Gamma_r``; tier 0 is raw demand."""
    _require_tiers(k, gains)
    return float(demand_var * np.prod(gains.gammas[:k]))


def demand_bound_uniform(k: int, demand_var: float, gains: GainProfile) -> float:
    return float(demand_var * gains.gamma_floor ** k)


def decision_bound(k: int, shock_vars: Sequence[float], gains: GainProfile) -> float:
    """``2 * sum_j shock_vars[j] * prod_{j<r<=k} Gamma_r``."""
    _require_tiers(k, gains)
    if k == 0:
        return 0.0
    s2 = np.asarray(shock_vars, float)[:k]
    if len(s2) < k:
        raise ValueError(f"need {k} shock variances, got {len(s2)}")
    if np.any(s2 < 0):
        raise ValueError("shock variances must be >= 0")
    g = gains.gammas
    return float(2.0 * sum(s2[j] * np.prod(g[j + 1:k]) for j in range(k)))


def decision_bound_uniform(k: int, shock_vars: Sequence[float], gains: GainProfile) -> float:
    s2 = np.asarray(shock_vars, float)[:k]
    g = gains.gamma_floor
    return float(2.0 * sum(s2[j] * g ** (k - 1 - j) for j in range(k)))


def demand_filter(k: int, gains: GainProfile) -> LagFilter:
    """Composite filter from customer demand to tier ``k`` orders."""
    _require_tiers(k, gains)
    return cascade(gains.filters()[:k]) if k else identity_filter()


def shock_path_filter(k: int, j: int, gains: GainProfile) -> LagFilter:
    """Filter from tier ``j`` decision shocks to tier ``k`` orders (``1 <= j <= k``)."""
    _require_tiers(k, gains)
    if not 1 <= j <= k:
        raise ValueError(f"need 1 <= j <= k, got j={j}, k={k}")
    return cascade(gains.filters()[j:k] + [shock_filter()])


def stationary_demand_variance(k: int, demand_var: float, gains: GainProfile) -> float:
    """Exact stationary demand-driven variance of tier ``k`` orders."""
    return demand_var * demand_filter(k, gains).energy()


def stationary_decision_variance(k: int, shock_vars: Sequence[float], gains: GainProfile) -> float:
    """Exact stationary decision-driven variance of tier ``k`` orders."""
    return float(sum(shock_vars[j - 1] * shock_path_filter(k, j, gains).energy()
                     for j in range(1, k + 1)))


def intertemporal_variance(k: int, horizon: int, shock_vars: Sequence[float],
                           gains: GainProfile) -> np.ndarray:
    """``W[k, t]`` for ``t = 1..horizon`` under a fixed demand path.

    Entry ``t-1`` is the run-to-run variance of the tier-``k`` order in the
    ``t``-th simulated period, starting from zero shock pre-history.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    w = np.zeros(horizon)
    for j in range(1, k + 1):
        if shock_vars[j - 1] == 0:
            continue
        b = shock_path_filter(k, j, gains).impulse(horizon)
        w += shock_vars[j - 1] * np.cumsum(b * b)
    return w


def simulate_linear(thetas: Sequence[float], lams: Sequence[float], demand: np.ndarray,
                    shocks: np.ndarray | None = None) -> np.ndarray:
    """Iterate the reduced one-tier recursion up the chain.

    ``demand`` has shape ``(..., T)``; ``shocks`` shape ``(..., n, T)``.
    Returns orders of shape ``(..., n, T)`` for tiers 1..n, starting from
    zero pre-history.
    """
    demand = np.asarray(demand, float)
    n = len(thetas)
    T = demand.shape[-1]
    if shocks is None:
        shocks = np.zeros(demand.shape[:-1] + (n, T))
    shocks = np.asarray(shocks, float)
    q = np.zeros(demand.shape[:-1] + (n, T))
    down = demand
    for k in range(n):
        th, lam = float(thetas[k]), float(lams[k])
        _check(th, lam, allow_zero_theta=True)
        a, c1, c2 = 1.0 - lam, 1.0 + th * lam, th * lam + 1.0 - lam
        e = shocks[..., k, :]
        y = q[..., k, :]
        y[..., 0] = e[..., 0]
        if T > 1:
            y[..., 1] = c1 * down[..., 0] + a * y[..., 0] + e[..., 1] - (1 + a) * e[..., 0]
        for t in range(1, T - 1):
            y[..., t + 1] = (c1 * down[..., t] - c2 * down[..., t - 1] + a * y[..., t]
                             + e[..., t + 1] - (1 + a) * e[..., t] + a * e[..., t - 1])
        down = y
    return q


def simulate_linear_filtered(gains: GainProfile, demand: np.ndarray,
                             shocks: np.ndarray | None = None) -> np.ndarray:
    """Same output as :func:`simulate_linear`, via cascaded filters."""
    demand = np.asarray(demand, float)
    n = gains.n
    out = np.zeros(demand.shape[:-1] + (n, demand.shape[-1]))
    for k in range(1, n + 1):
        y = demand_filter(k, gains).apply(demand)
        if shocks is not None:
            for j in range(1, k + 1):
                y = y + shock_path_filter(k, j, gains).apply(np.asarray(shocks)[..., j - 1, :])
        out[..., k - 1, :] = y
    return out


@dataclass(frozen=True)
class BoundRow:
    k: int
    gamma: float
    demand_bound: float
    decision_bound: float
    demand_bound_uniform: float
    decision_bound_uniform: float


def bound_table(gains: GainProfile, demand_var: float, shock_vars: Sequence[float]) -> list[BoundRow]:
    g = gains.gammas
    return [BoundRow(k, float(g[k - 1]), demand_bound(k, demand_var, gains),
                     decision_bound(k, shock_vars, gains),
                     demand_bound_uniform(k, demand_var, gains),
                     decision_bound_uniform(k, shock_vars, gains))
            for k in range(1, gains.n + 1)]


BOUND_COLUMNS = ("k", "gamma_k", "demand_bound", "decision_bound",
                 "demand_bound_uniform", "decision_bound_uniform")


def bound_table_csv(rows: Sequence[BoundRow], extra: dict | None = None) -> str:
    buf = io.StringIO()
    extra = extra or {}
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(extra) + list(BOUND_COLUMNS))
    for r in rows:
        w.writerow(list(extra.values()) + [r.k, repr(r.gamma), repr(r.demand_bound), repr(r.decision_bound),
                                           repr(r.demand_bound_uniform), repr(r.decision_bound_uniform)])
    return buf.getvalue()
