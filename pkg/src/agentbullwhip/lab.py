"""Repeated-run ensembles, nested variance decomposition and bullwhip metrics.

Order arrays are indexed ``(run, tier, period)`` with tier 0 holding the
customer demand, so tier ``k`` of the chain sits at index ``k``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import stats

from .chain import TierParams, advance, initial_chain
from .linear import GainProfile, decision_bound, demand_bound, simulate_linear
from .policies import DecisionShockSpec, ProtocolViolation, fallback_order, observe

log = logging.getLogger(__name__)

DEFAULT_TAU = 1e-9

# SeedSequence spawn-key streams
_DEMAND, _POLICY, _SHOCK = 0, 1, 2


class InsufficientSamples(ValueError):
    pass


class RunFailed(RuntimeError):
    """A run exceeded its remote-agent protocol failure budget."""


class FailureBudgetExceeded(RuntimeError):
    """Too few runs survived to form an ensemble."""


@dataclass(frozen=True)
class DemandSpec:
    """Customer demand regime.

    kinds: ``constant`` (``level``), ``pattern`` (``values`` then ``level``
    forever), ``path`` (``values`` verbatim), ``normal`` (iid N(mean, std^2)),
    ``poisson`` (``rate``), ``trunc_normal`` (N(mean, std^2) clipped to
    ``[low, high]``).  ``mode='fixed'`` shares one sampled path across runs.
    """
    kind: str = "constant"
    level: float = 4.0
    values: tuple[float, ...] = ()
    mean: float = 0.0
    std: float = 1.0
    rate: float = 10.0
    low: float = 0.0
    high: float = 50.0
    mode: str = "fixed"

    def __post_init__(self):
        if self.kind not in ("constant", "pattern", "path", "normal", "poisson", "trunc_normal"):
            raise ValueError(f"unknown demand kind {self.kind!r}")
        if self.mode not in ("fixed", "stochastic"):
            raise ValueError(f"unknown demand mode {self.mode!r}")

    @property
    def variance(self) -> float:
        if self.kind == "normal":
            return self.std ** 2
        if self.kind == "poisson":
            return self.rate
        if self.kind == "trunc_normal":
            return float(_clipped_normal_var(self.mean, self.std, self.low, self.high))
        return 0.0

    def sample(self, rng: np.random.Generator, horizon: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(horizon, float(self.level))
        if self.kind == "pattern":
            head = np.asarray(self.values[:horizon], float)
            return np.concatenate([head, np.full(horizon - len(head), float(self.level))])
        if self.kind == "path":
            if len(self.values) < horizon:
                raise ValueError(f"demand path has {len(self.values)} periods, need {horizon}")
            return np.asarray(self.values[:horizon], float)
        if self.kind == "normal":
            return rng.normal(self.mean, self.std, horizon)
        if self.kind == "poisson":
            return rng.poisson(self.rate, horizon).astype(float)
        return np.clip(rng.normal(self.mean, self.std, horizon), self.low, self.high)


def _clipped_normal_var(mu, sd, lo, hi):
    # variance of clip(N(mu, sd^2), lo, hi)
    a, b = (lo - mu) / sd, (hi - mu) / sd
    pa, pb = stats.norm.cdf(a), stats.norm.cdf(b)
    phia, phib = stats.norm.pdf(a), stats.norm.pdf(b)
    m1 = lo * pa + hi * (1 - pb) + mu * (pb - pa) + sd * (phia - phib)
    m2 = (lo ** 2 * pa + hi ** 2 * (1 - pb) + (mu ** 2 + sd ** 2) * (pb - pa)
          + 2 * mu * sd * (phia - phib) + sd ** 2 * (a * phia - b * phib))
    return m2 - m1 ** 2


@dataclass(frozen=True)
class Scenario:
    """One supply-chain environment.

    ``engine='chain'`` runs the nonlinear physics with ``policies`` (one
    per tier).  ``engine='linear'`` runs the untruncated benchmark driven by
    ``shocks`` (one per tier) with each tier's smoothing and target
    multiplier.
    """
    tiers: tuple[TierParams, ...]
    demand: DemandSpec
    horizon: int
    policies: tuple[Any, ...] = ()
    shocks: tuple[DecisionShockSpec, ...] = ()
    engine: str = "chain"
    initial_on_hand: float = 12.0
    initial_flow: float = 4.0
    burn_in: int | None = None
    max_protocol_failures: int = 0
    name: str = "scenario"

    def __post_init__(self):
        if self.engine not in ("chain", "linear"):
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        n = len(self.tiers)
        if self.engine == "chain" and len(self.policies) != n:
            raise ValueError(f"chain engine needs {n} policies, got {len(self.policies)}")
        if self.engine == "linear" and self.shocks and len(self.shocks) != n:
            raise ValueError(f"linear engine needs {n} shock specs, got {len(self.shocks)}")

    @property
    def n_tiers(self) -> int:
        return len(self.tiers)

    @property
    def gains(self) -> GainProfile:
        return GainProfile(tuple(p.target_multiplier for p in self.tiers),
                           tuple(p.smoothing for p in self.tiers))

    @property
    def shock_variances(self) -> list[float]:
        if self.engine == "linear":
            return [s.variance for s in self.shocks] if self.shocks else [0.0] * self.n_tiers
        out = []
        for p in self.policies:
            shock = getattr(p, "shock", None)
            out.append(shock.variance if shock is not None else float("nan"))
        return out

    @property
    def default_burn_in(self) -> int:
        if self.burn_in is not None:
            return self.burn_in
        return 5 * max(p.lead_time for p in self.tiers)


def _seq(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=tuple(key))


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(_seq(seed, *key))


@dataclass
class EnsembleRecord:
    orders: np.ndarray      # (R, n+1, T); tier 0 = demand
    costs: np.ndarray       # (R, n, T); zeros for the linear engine
    on_hand: np.ndarray     # (R, n, T) end of period
    backlog: np.ndarray     # (R, n, T) end of period
    run_ids: tuple[int, ...]
    seed: int
    excluded: tuple[int, ...] = ()
    protocol_failures: dict = field(default_factory=dict)

    @property
    def R(self) -> int:
        return self.orders.shape[0]

    @property
    def n_tiers(self) -> int:
        return self.orders.shape[1] - 1

    @property
    def horizon(self) -> int:
        return self.orders.shape[2]

    @property
    def demand(self) -> np.ndarray:
        return self.orders[:, 0, :]

    @property
    def total_costs(self) -> np.ndarray:
        return self.costs.sum(axis=(1, 2))

    @property
    def tier_costs(self) -> np.ndarray:
        return self.costs.sum(axis=2)


def _simulate_chain_run(scenario: Scenario, demand: np.ndarray, seed: int, key: tuple[int, ...]):
    n, T = scenario.n_tiers, scenario.horizon
    state = initial_chain(scenario.tiers, scenario.initial_on_hand, scenario.initial_flow)
    rngs = [_rng(seed, _POLICY, *key, k) for k in range(n)]
    orders = np.zeros((n + 1, T))
    costs, oh, bl = np.zeros((n, T)), np.zeros((n, T)), np.zeros((n, T))
    orders[0] = demand
    failures = 0
    for t in range(T):
        q = []
        for k, pol in enumerate(scenario.policies):
            obs = observe(state, k)
            try:
                order = pol.decide(obs, rngs[k])[0]
            except ProtocolViolation as err:
                failures += 1
                if failures > scenario.max_protocol_failures:
                    raise RunFailed(f"run {key}: {failures} protocol failures") from err
                order = fallback_order(pol, obs)
            q.append(float(order))
        state, out = advance(state, float(demand[t]), q)
        orders[1:, t] = out.orders
        costs[:, t] = out.costs
        oh[:, t] = [s.on_hand for s in state.tiers]
        bl[:, t] = [s.backlog for s in state.tiers]
    return orders, costs, oh, bl, failures


def _chain_job(args):
    scenario, demand, seed, key = args
    try:
        return _simulate_chain_run(scenario, demand, seed, key)
    except RunFailed as err:
        return err


def _run_many(scenario: Scenario, demands: np.ndarray, seed: int, keys: Sequence[tuple[int, ...]],
              workers: int = 1) -> EnsembleRecord:
    R, T = demands.shape
    n = scenario.n_tiers
    if scenario.engine == "linear":
        shocks = np.zeros((R, n, T))
        for i, key in enumerate(keys):
            for k, spec in enumerate(scenario.shocks):
                shocks[i, k] = spec.sample(_rng(seed, _SHOCK, *key, k), T)
        g = scenario.gains
        q = simulate_linear(g.thetas, g.lams, demands, shocks)
        orders = np.concatenate([demands[:, None, :], q], axis=1)
        zeros = np.zeros((R, n, T))
        return EnsembleRecord(orders, zeros, zeros.copy(), zeros.copy(),
                              tuple(k[-1] for k in keys), seed)

    jobs = [(scenario, demands[i], seed, key) for i, key in enumerate(keys)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]
    kept, excluded, fails = [], [], {}
    for key, res in zip(keys, results):
        if isinstance(res, RunFailed):
            log.warning("excluding run %s: %s", key[-1], res)
            excluded.append(key[-1])
            continue
        kept.append((key[-1], res))
        if res[4]:
            fails[key[-1]] = res[4]
    if excluded:
        log.warning("%d of %d runs excluded for protocol failures", len(excluded), len(keys))
    if not kept:
        raise FailureBudgetExceeded("every run exceeded the protocol failure budget")
    stack = lambda i: np.stack([r[1][i] for r in kept])  # noqa: E731
    return EnsembleRecord(stack(0), stack(1), stack(2), stack(3), tuple(r[0] for r in kept), seed,
                          tuple(excluded), fails)


def run_ensemble(scenario: Scenario, R: int, seed: int, workers: int = 1) -> EnsembleRecord:
    """Run ``R`` repetitions; fixed-demand mode shares one demand path."""
    if R < 2:
        raise InsufficientSamples(f"an ensemble needs R >= 2 runs, got {R}")
    T = scenario.horizon
    if scenario.demand.mode == "fixed":
        path = scenario.demand.sample(_rng(seed, _DEMAND), T)
        demands = np.tile(path, (R, 1))
    else:
        demands = np.stack([scenario.demand.sample(_rng(seed, _DEMAND, r), T) for r in range(R)])
    rec = _run_many(scenario, demands, seed, [(r,) for r in range(R)], workers)
    if rec.R < 2:
        raise FailureBudgetExceeded(f"only {rec.R} of {R} runs survived the protocol failure budget")
    return rec


def simulate(scenario: Scenario, seed: int) -> EnsembleRecord:
    """A single run, seeded exactly as run 0 of :func:`run_ensemble`."""
    T = scenario.horizon
    key = (_DEMAND,) if scenario.demand.mode == "fixed" else (_DEMAND, 0)
    demand = scenario.demand.sample(_rng(seed, *key), T)
    rec = _run_many(scenario, demand[None, :], seed, [(0,)])
    return rec


# --- run-to-run statistics --------------------------------------------------

def run_to_run_variance(rec_or_orders) -> np.ndarray:
    """Bessel-corrected variance across runs, shape ``(n+1, T)``."""
    q = rec_or_orders.orders if isinstance(rec_or_orders, EnsembleRecord) else np.asarray(rec_or_orders, float)
    if q.shape[0] < 2:
        raise InsufficientSamples("run-to-run variance needs at least 2 runs")
    return q.var(axis=0, ddof=1)


def variance_se(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Standard error of the Bessel sample variance from the fourth moment."""
    x = np.asarray(x, float)
    n = x.shape[axis]
    s2 = x.var(axis=axis, ddof=1)
    m4 = np.mean((x - x.mean(axis=axis, keepdims=True)) ** 4, axis=axis)
    v = (m4 - (n - 3) / (n - 1) * s2 ** 2) / n
    return np.sqrt(np.maximum(v, 0.0))


def _loo_var(x: np.ndarray) -> np.ndarray:
    """Leave-one-out Bessel variances along axis 0."""
    n = x.shape[0]
    s1, s2 = x.sum(0), (x * x).sum(0)
    return (s2 - x * x - (s1 - x) ** 2 / (n - 1)) / (n - 2)


def _jackknife_se(loo: np.ndarray) -> np.ndarray:
    m = loo.shape[0]
    return np.sqrt((m - 1) / m * np.sum((loo - loo.mean(0)) ** 2, axis=0))


@dataclass(frozen=True)
class WindowEstimate:
    """Per-tier estimates averaged over a measurement window."""
    estimate: np.ndarray
    se: np.ndarray
    start: int
    stop: int


def stationary_run_variance(rec: EnsembleRecord, burn_in: int = 0, stop: int | None = None) -> WindowEstimate:
    """Run-to-run variance averaged over periods ``burn_in..stop``, with jackknife s.e. over runs."""
    q = rec.orders[:, :, burn_in:stop]
    if q.shape[0] < 3:
        raise InsufficientSamples("window variance s.e. needs at least 3 runs")
    est = q.var(axis=0, ddof=1).mean(-1)
    loo = _loo_var(q).mean(-1)
    return WindowEstimate(est, _jackknife_se(loo), burn_in, stop if stop is not None else rec.horizon)


@dataclass(frozen=True)
class BullwhipMetrics:
    sigma2: np.ndarray      # (n+1, T)
    psi: np.ndarray         # (n, T): index k-1 holds Psi_k
    phi: np.ndarray         # (n+1, T-1)
    cumulative: np.ndarray  # (n, T): index j-1 holds C_j
    classical: np.ndarray | None  # (R, n): per-run Var_t(q_k)/Var_t(q_{k-1})
    tau: float

    @property
    def psi_defined(self) -> np.ndarray:
        return ~np.isnan(self.psi)


def _ratio(num, den, tau):
    out = np.full(np.broadcast(num, den).shape, np.nan)
    ok = den >= tau
    np.divide(num, den, out=out, where=ok)
    return out


def bullwhip_metrics(sigma2: np.ndarray, tau: float = DEFAULT_TAU, orders: np.ndarray | None = None) -> BullwhipMetrics:
    """Adjacent-tier, cumulative and within-tier amplification ratios.

    Cells whose denominator falls below ``tau`` are NaN.  ``orders`` of
    shape ``(R, n+1, T)`` additionally yields per-run classical ratios.
    """
    if not tau > 0:
        raise ValueError("tau must be > 0")
    s = np.asarray(sigma2, float)
    psi = _ratio(s[1:], s[:-1], tau)
    phi = _ratio(s[:, 1:], s[:, :-1], tau)
    # NaN propagates through the product, leaving C undefined past any undefined factor
    cum = np.cumprod(psi, axis=0)
    classical = None
    if orders is not None:
        vt = np.asarray(orders, float).var(axis=2, ddof=1)
        classical = _ratio(vt[:, 1:], vt[:, :-1], tau)
    return BullwhipMetrics(s, psi, phi, cum, classical, tau)


# --- nested decomposition ---------------------------------------------------

@dataclass
class DecompositionResult:
    """Nested Monte Carlo samples ``orders[m, r, k, t]`` and their variance split."""
    orders: np.ndarray
    seed: int

    @property
    def M(self) -> int:
        return self.orders.shape[0]

    @property
    def R(self) -> int:
        return self.orders.shape[1]

    def _stats(self):
        mu = self.orders.mean(axis=1)
        v = self.orders.var(axis=1, ddof=1)
        return mu, v

    def _components(self, mu, v, axis_sums=None):
        M, R = self.M, self.R
        dec = v.mean(0)
        if M < 2:
            nan = np.full_like(dec, np.nan)
            return dec.copy(), nan, dec
        between = mu.var(axis=0, ddof=1)
        dem = between - dec / R
        N = M * R
        sx = R * mu.sum(0)
        sxx = ((R - 1) * v + R * mu * mu).sum(0)
        total = (sxx - sx * sx / N) / (N - 1)
        return total, dem, dec

    def _loo_components(self, mu, v):
        """Leave-one-path-out replicates of (total, demand, decision)."""
        M, R = self.M, self.R
        dec = (v.sum(0) - v) / (M - 1)
        between = _loo_var(mu)
        dem = between - dec / R
        N = (M - 1) * R
        sx = R * (mu.sum(0) - mu)
        sxx_each = (R - 1) * v + R * mu * mu
        sxx = sxx_each.sum(0) - sxx_each
        total = (sxx - sx * sx / N) / (N - 1)
        return total, dem, dec

    @property
    def total(self):
        return self._components(*self._stats())[0]

    @property
    def demand(self):
        return self._components(*self._stats())[1]

    @property
    def decision(self):
        return self._components(*self._stats())[2]

    def window(self, burn_in: int = 0, stop: int | None = None) -> "DecompositionWindow":
        """Per-tier components averaged over periods ``burn_in..stop``.

        Standard errors are jackknife over demand paths; with a single
        path they are jackknife over runs and the demand part is NaN.
        """
        sl = slice(burn_in, stop)
        mu, v = self._stats()
        total, dem, dec = (c[:, sl].mean(-1) for c in self._components(mu, v))
        if self.M >= 3:
            reps = [c[..., sl].mean(-1) for c in self._loo_components(mu, v)]
            se = [_jackknife_se(r) for r in reps]
            gap = _jackknife_se(reps[0] - reps[1] - reps[2])
        elif self.M == 1 and self.R >= 3:
            loo = _loo_var(self.orders[0][:, :, sl]).mean(-1)
            s = _jackknife_se(loo)
            se, gap = [s, np.full_like(s, np.nan), s], np.zeros_like(s)
        else:
            nan = np.full_like(total, np.nan)
            se, gap = [nan, nan, nan], nan
        return DecompositionWindow(total, dem, dec, se[0], se[1], se[2], gap,
                                   burn_in, stop if stop is not None else self.orders.shape[-1], self.M, self.R)


@dataclass(frozen=True)
class DecompositionWindow:
    total: np.ndarray
    demand: np.ndarray
    decision: np.ndarray
    total_se: np.ndarray
    demand_se: np.ndarray
    decision_se: np.ndarray
    gap_se: np.ndarray      # jackknife s.e. of total - demand - decision
    start: int
    stop: int
    M: int
    R: int

    @property
    def combined_se(self) -> np.ndarray:
        return np.sqrt(self.total_se ** 2 + np.nan_to_num(self.demand_se) ** 2 + self.decision_se ** 2)

    @property
    def gap(self) -> np.ndarray:
        return self.total - np.nan_to_num(self.demand) - self.decision


def decompose_variance(scenario: Scenario, M: int, R: int, seed: int, workers: int = 1) -> DecompositionResult:
    """Sample ``M`` demand paths and ``R`` shock-randomised runs per path.

    ``M == 1`` conditions on a single path (the scenario's fixed path if
    it has one), so only the decision component is available.
    """
    if R < 2:
        raise InsufficientSamples(f"inner sample count R must be >= 2, got {R}")
    if M < 1:
        raise InsufficientSamples(f"outer sample count M must be >= 1, got {M}")
    T = scenario.horizon
    blocks = []
    for m in range(M):
        path = scenario.demand.sample(_rng(seed, _DEMAND, m), T)
        rec = _run_many(scenario, np.tile(path, (R, 1)), seed, [(m, r) for r in range(R)], workers)
        if rec.R != R:
            raise FailureBudgetExceeded(f"path {m}: {R - rec.R} runs excluded; decomposition needs balanced cells")
        blocks.append(rec.orders)
    return DecompositionResult(np.stack(blocks), seed)


@dataclass(frozen=True)
class BoundCheck:
    k: int
    component: str
    estimate: float
    se: float
    bound: float
    passed: bool
    stationary: bool


def trend_flags(res: DecompositionResult, burn_in: int, stop: int | None = None, z: float = 3.0) -> np.ndarray:
    """True where the window's first and second halves differ by more than ``z`` s.e. (total variance)."""
    stop = stop if stop is not None else res.orders.shape[-1]
    mid = (burn_in + stop) // 2
    a, b = res.window(burn_in, mid), res.window(mid, stop)
    se = np.sqrt(a.total_se ** 2 + b.total_se ** 2)
    return np.abs(a.total - b.total) > z * se


def check_bounds(res: DecompositionResult, gains: GainProfile, demand_var: float,
                 shock_vars: Sequence[float], burn_in: int, stop: int | None = None,
                 z: float = 3.0) -> list[BoundCheck]:
    """Compare windowed estimates with the analytic lower bounds, tier by tier."""
    win = res.window(burn_in, stop)
    unstable = trend_flags(res, burn_in, stop)
    out = []
    for k in range(1, gains.n + 1):
        stationary = not bool(unstable[k])
        if not stationary:
            log.warning("tier %d: variance trend inside the measurement window; burn-in may be too short", k)
        if res.M >= 2:
            b = demand_bound(k, demand_var, gains)
            est, se = float(win.demand[k]), float(win.demand_se[k])
            out.append(BoundCheck(k, "demand", est, se, b, bool(est >= b - z * se), stationary))
        b = decision_bound(k, shock_vars, gains)
        est, se = float(win.decision[k]), float(win.decision_se[k])
        out.append(BoundCheck(k, "decision", est, se, b, bool(est >= b - z * se) or b == 0.0, stationary))
    return out


# --- persistence --------------------------------------------------------------

TRAJECTORY_COLUMNS = ("run", "tier", "period", "order", "cost", "on_hand", "backlog")


def write_trajectories(rec: EnsembleRecord, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for i, run in enumerate(rec.run_ids):
            for k in range(rec.n_tiers):
                for t in range(rec.horizon):
                    w.writerow((run, k + 1, t + 1, repr(float(rec.orders[i, k + 1, t])),
                                repr(float(rec.costs[i, k, t])), repr(float(rec.on_hand[i, k, t])),
                                repr(float(rec.backlog[i, k, t]))))


def write_demand(rec: EnsembleRecord, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run", "period", "demand"))
        for i, run in enumerate(rec.run_ids):
            for t in range(rec.horizon):
                w.writerow((run, t + 1, repr(float(rec.orders[i, 0, t]))))


def read_trajectories(path: Path, demand_path: Path | None = None) -> EnsembleRecord:
    """Rebuild an :class:`EnsembleRecord` from the trajectory CSV (and demand CSV)."""
    rows = list(csv.DictReader(open(path)))
    runs = sorted({int(r["run"]) for r in rows})
    n = max(int(r["tier"]) for r in rows)
    T = max(int(r["period"]) for r in rows)
    idx = {r: i for i, r in enumerate(runs)}
    orders = np.zeros((len(runs), n + 1, T))
    costs, oh, bl = (np.zeros((len(runs), n, T)) for _ in range(3))
    for r in rows:
        i, k, t = idx[int(r["run"])], int(r["tier"]), int(r["period"]) - 1
        orders[i, k, t] = float(r["order"])
        costs[i, k - 1, t] = float(r["cost"])
        oh[i, k - 1, t] = float(r["on_hand"])
        bl[i, k - 1, t] = float(r["backlog"])
    if demand_path is not None:
        for r in csv.DictReader(open(demand_path)):
            orders[idx[int(r["run"])], 0, int(r["period"]) - 1] = float(r["demand"])
    return EnsembleRecord(orders, costs, oh, bl, tuple(runs), seed=-1)


def _fmt(x) -> str:
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def write_metrics(m: BullwhipMetrics, path: Path) -> None:
    """Columns: tier, period, sigma2, psi, cumulative, phi (blank = undefined)."""
    n1, T = m.sigma2.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("tier", "period", "sigma2", "psi", "cumulative", "phi"))
        for k in range(n1):
            for t in range(T):
                psi = m.psi[k - 1, t] if k else np.nan
                cum = m.cumulative[k - 1, t] if k else np.nan
                phi = m.phi[k, t] if t < T - 1 else np.nan
                w.writerow((k, t + 1, _fmt(m.sigma2[k, t]), _fmt(psi), _fmt(cum), _fmt(phi)))


def write_classical(m: BullwhipMetrics, run_ids: Sequence[int], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run", "tier", "classical_ratio"))
        for i, run in enumerate(run_ids):
            for k in range(m.classical.shape[1]):
                w.writerow((run, k + 1, _fmt(m.classical[i, k])))


def boxplot_rows(orders: np.ndarray) -> list[dict]:
    """Five-number summary and 1.5-IQR outliers per (tier, period)."""
    _, n1, T = orders.shape
    rows = []
    for k in range(n1):
        for t in range(T):
            x = np.sort(orders[:, k, t])
            q1, med, q3 = np.percentile(x, [25, 50, 75])
            iqr = q3 - q1
            lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
            inside = x[(x >= lo) & (x <= hi)]
            rows.append(dict(tier=k, period=t + 1, min=x[0], q1=q1, median=med, q3=q3, max=x[-1],
                             whisker_low=inside.min(), whisker_high=inside.max(),
                             outliers=[float(v) for v in x[(x < lo) | (x > hi)]]))
    return rows


BOXPLOT_COLUMNS = ("tier", "period", "min", "q1", "median", "q3", "max",
                   "whisker_low", "whisker_high", "outliers")


def write_boxplot(orders: np.ndarray, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOXPLOT_COLUMNS)
        for r in boxplot_rows(orders):
            w.writerow([r["tier"], r["period"]] + [repr(float(r[c])) for c in BOXPLOT_COLUMNS[2:-1]]
                       + [";".join(repr(v) for v in r["outliers"])])


def write_decomposition(res: DecompositionResult, path: Path) -> None:
    """Per-(tier, period) components; blank demand cells when ``M == 1``."""
    total, dem, dec = res.total, res.demand, res.decision
    n1, T = total.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("tier", "period", "total", "demand", "decision", "M", "R"))
        for k in range(n1):
            for t in range(T):
                w.writerow((k, t + 1, _fmt(total[k, t]), _fmt(dem[k, t]), _fmt(dec[k, t]), res.M, res.R))


def write_window(win: DecompositionWindow, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("tier", "start", "stop", "total", "total_se", "demand", "demand_se",
                    "decision", "decision_se", "gap_se"))
        for k in range(len(win.total)):
            w.writerow((k, win.start + 1, win.stop, _fmt(win.total[k]), _fmt(win.total_se[k]),
                        _fmt(win.demand[k]), _fmt(win.demand_se[k]), _fmt(win.decision[k]),
                        _fmt(win.decision_se[k]), _fmt(win.gap_se[k])))


def write_bound_checks(checks: Sequence[BoundCheck], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("tier", "component", "estimate", "se", "bound", "passed", "stationary"))
        for c in checks:
            w.writerow((c.k, c.component, _fmt(c.estimate), _fmt(c.se), _fmt(c.bound),
                        int(c.passed), int(c.stationary)))


def write_manifest(path: Path, **fields) -> None:
    with open(path, "w") as fh:
        json.dump(fields, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")
