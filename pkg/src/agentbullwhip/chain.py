"""Serial multi-echelon inventory physics.

Tier ``k = 1..n`` ships to tier ``k-1``; tier 0 is the external customer.
Each tier's replenishment lead time is split into an order delay (time for
its order to reach the upstream tier) and a ship delay (time for the
upstream shipment to come back).  The most upstream tier orders from an
uncapacitated outside supplier.

All state objects are frozen and :func:`advance` is a pure function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

SNAPSHOT_SCHEMA = "agentbullwhip.chain/1"

Pipeline = tuple[tuple[int, float], ...]


class ChainConsistencyError(RuntimeError):
    """Raised when a pipeline holds an arrival scheduled in the past."""


@dataclass(frozen=True)
class TierParams:
    order_delay: int = 1
    ship_delay: int = 2
    smoothing: float = 0.5
    target_multiplier: float = 4.0
    holding_cost: float = 0.5
    backlog_cost: float = 1.0

    def __post_init__(self):
        if int(self.order_delay) != self.order_delay or self.order_delay < 0:
            raise ValueError(f"order_delay must be an integer >= 0, got {self.order_delay!r}")
        if int(self.ship_delay) != self.ship_delay or self.ship_delay < 0:
            raise ValueError(f"ship_delay must be an integer >= 0, got {self.ship_delay!r}")
        if not 0.0 < self.smoothing <= 1.0:
            raise ValueError(f"smoothing must lie in (0, 1], got {self.smoothing!r}")
        if not self.target_multiplier > 0.0:
            raise ValueError(f"target_multiplier must be > 0, got {self.target_multiplier!r}")
        if self.holding_cost < 0 or self.backlog_cost < 0:
            raise ValueError("cost rates must be >= 0")

    @property
    def lead_time(self) -> int:
        return self.order_delay + self.ship_delay


@dataclass(frozen=True)
class TierState:
    on_hand: float
    backlog: float
    outstanding: float
    forecast: float
    order_pipeline: Pipeline = ()
    ship_pipeline: Pipeline = ()
    last_incoming: float = 0.0
    last_received: float = 0.0


@dataclass(frozen=True)
class ChainState:
    period: int
    params: tuple[TierParams, ...]
    tiers: tuple[TierState, ...]
    last_orders: tuple[float, ...]
    demand_history: tuple[float, ...] = ()

    @property
    def n_tiers(self) -> int:
        return len(self.tiers)


@dataclass(frozen=True)
class StepOutcome:
    period: int
    orders: tuple[float, ...]
    incoming: tuple[float, ...]
    shipments: tuple[float, ...]
    receipts: tuple[float, ...]
    costs: tuple[float, ...]
    system_cost: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "system_cost", math.fsum(self.costs))


def inventory_position(tier: TierState) -> float:
    return tier.on_hand + tier.outstanding - tier.backlog


def effective_demand(tier: TierState, downstream_order: float) -> float:
    if downstream_order < 0:
        raise ValueError(f"downstream order must be >= 0, got {downstream_order!r}")
    return downstream_order + tier.backlog


def ship(tier: TierState, receipt: float, demand: float) -> float:
    """Units shipped downstream: limited by available stock and by demand."""
    return max(0.0, min(tier.on_hand + receipt, demand))


def initial_chain(
    params: Sequence[TierParams],
    on_hand: float | Sequence[float] = 12.0,
    flow: float = 4.0,
    backlog: float | Sequence[float] = 0.0,
) -> ChainState:
    """Deterministic start with pipelines pre-filled at a steady ``flow`` per period.

    The outstanding quantity of tier k counts its orders in transit to the
    upstream tier, the upstream backlog owed to it and shipments in transit
    to it.
    """
    params = tuple(params)
    n = len(params)
    if n < 1:
        raise ValueError("a chain needs at least one tier")
    oh = _per_tier(on_hand, n)
    bl = _per_tier(backlog, n)
    tiers = []
    for k, p in enumerate(params):
        opipe = tuple((i, float(flow)) for i in range(p.order_delay))
        spipe = tuple((i, float(flow)) for i in range(p.ship_delay))
        upstream_backlog = bl[k + 1] if k + 1 < n else 0.0
        outstanding = flow * (p.order_delay + p.ship_delay) + upstream_backlog
        tiers.append(TierState(
            on_hand=oh[k], backlog=bl[k], outstanding=outstanding, forecast=float(flow),
            order_pipeline=opipe, ship_pipeline=spipe,
            last_incoming=float(flow), last_received=float(flow),
        ))
    return ChainState(0, params, tuple(tiers), tuple(float(flow) for _ in range(n)))


def _per_tier(value, n):
    if isinstance(value, (int, float)):
        return [float(value)] * n
    value = [float(v) for v in value]
    if len(value) != n:
        raise ValueError(f"expected {n} per-tier values, got {len(value)}")
    return value


def _pop_arrivals(pipe: Pipeline, t: int) -> tuple[float, Pipeline]:
    arrived = 0.0
    rest = []
    for when, qty in pipe:
        if when < t:
            raise ChainConsistencyError(f"pipeline entry due at period {when} found at period {t}")
        if when == t:
            arrived += qty
        else:
            rest.append((when, qty))
    return arrived, tuple(rest)


def advance(chain: ChainState, demand: float, orders: Sequence[float]) -> tuple[ChainState, StepOutcome]:
    """Run one period and return the next state plus the period's flows.

    ``orders[k]`` is the order placed by tier k+1 this period, decided from
    ``chain`` (beginning-of-period state).  Within the period, orders enter
    the order pipelines first, then tiers are processed from the top of the
    chain down: receive, observe the downstream order, ship, update stocks.
    This keeps zero-length delays well defined.
    """
    n = chain.n_tiers
    t = chain.period
    if demand < 0:
        raise ValueError(f"demand must be >= 0, got {demand!r}")
    orders = tuple(float(q) for q in orders)
    if len(orders) != n:
        raise ValueError(f"expected {n} orders, got {len(orders)}")
    if any(q < 0 or not math.isfinite(q) for q in orders):
        raise ValueError(f"orders must be finite and >= 0, got {orders}")

    params = chain.params
    opipes = [tier.order_pipeline + ((t + p.order_delay, q),)
              for tier, p, q in zip(chain.tiers, params, orders)]
    spipes = [tier.ship_pipeline for tier in chain.tiers]

    # outside supplier fills whatever reaches it immediately
    top = n - 1
    arrived, opipes[top] = _pop_arrivals(opipes[top], t)
    if arrived:
        spipes[top] = spipes[top] + ((t + params[top].ship_delay, arrived),)

    incoming = [0.0] * n
    shipments = [0.0] * n
    receipts = [0.0] * n
    new_tiers: list[TierState | None] = [None] * n
    for k in range(top, -1, -1):
        tier = chain.tiers[k]
        receipts[k], spipes[k] = _pop_arrivals(spipes[k], t)
        if k == 0:
            incoming[k] = float(demand)
        else:
            incoming[k], opipes[k - 1] = _pop_arrivals(opipes[k - 1], t)
        delta = effective_demand(tier, incoming[k])
        s = ship(tier, receipts[k], delta)
        shipments[k] = s
        if k > 0:
            spipes[k - 1] = spipes[k - 1] + ((t + params[k - 1].ship_delay, s),)
        lam = params[k].smoothing
        new_tiers[k] = replace(
            tier,
            on_hand=tier.on_hand + receipts[k] - s,
            backlog=tier.backlog + incoming[k] - s,
            outstanding=tier.outstanding + orders[k] - receipts[k],
            forecast=lam * incoming[k] + (1.0 - lam) * tier.forecast,
            last_incoming=incoming[k],
            last_received=receipts[k],
        )

    for k in range(n):
        new_tiers[k] = replace(new_tiers[k], order_pipeline=opipes[k], ship_pipeline=spipes[k])

    costs = tuple(p.holding_cost * s.on_hand + p.backlog_cost * s.backlog
                  for p, s in zip(params, new_tiers))
    nxt = ChainState(t + 1, params, tuple(new_tiers), orders, chain.demand_history + (float(demand),))
    return nxt, StepOutcome(t, orders, tuple(incoming), tuple(shipments), tuple(receipts), costs)


def audit_ip_recursion(before: ChainState, after: ChainState, outcome: StepOutcome,
                       tol: float = 1e-9) -> bool:
    """Check ``IP[t+1] == IP[t] + q[k,t] - q[k-1,t]`` for every tier.

    ``q[k-1,t]`` is the downstream order that reached tier k this period
    (customer demand for the first tier).
    """
    if before.n_tiers != after.n_tiers or after.period != before.period + 1:
        return False
    for k in range(before.n_tiers):
        lhs = inventory_position(after.tiers[k])
        rhs = inventory_position(before.tiers[k]) + outcome.orders[k] - outcome.incoming[k]
        if abs(lhs - rhs) > tol * max(1.0, abs(lhs), abs(rhs)):
            return False
    return True


def pipeline_outstanding(chain: ChainState, k: int, include_upstream_backlog: bool = True) -> float:
    """Outstanding quantity of tier ``k`` (0-based) rebuilt from the pipelines.

    With ``include_upstream_backlog=False`` only units physically in the
    order and ship pipelines are counted; the upstream tier's unfilled
    backlog owed to tier k is then left out.
    """
    tier = chain.tiers[k]
    total = sum(q for _, q in tier.order_pipeline) + sum(q for _, q in tier.ship_pipeline)
    if include_upstream_backlog and k + 1 < chain.n_tiers:
        total += chain.tiers[k + 1].backlog
    return total


def audit_outstanding(chain: ChainState, tol: float = 1e-9) -> bool:
    """True when each tier's tracked outstanding matches its pipelines plus upstream backlog."""
    return all(abs(chain.tiers[k].outstanding - pipeline_outstanding(chain, k)) <= tol * max(1.0, chain.tiers[k].outstanding)
               for k in range(chain.n_tiers))


def to_snapshot(chain: ChainState) -> dict:
    """JSON-ready dict; see README for the schema."""
    return {
        "schema": SNAPSHOT_SCHEMA,
        "period": chain.period,
        "params": [
            {"order_delay": p.order_delay, "ship_delay": p.ship_delay, "smoothing": p.smoothing,
             "target_multiplier": p.target_multiplier, "holding_cost": p.holding_cost,
             "backlog_cost": p.backlog_cost}
            for p in chain.params
        ],
        "tiers": [
            {"on_hand": s.on_hand, "backlog": s.backlog, "outstanding": s.outstanding,
             "forecast": s.forecast, "last_incoming": s.last_incoming, "last_received": s.last_received,
             "order_pipeline": [[w, q] for w, q in s.order_pipeline],
             "ship_pipeline": [[w, q] for w, q in s.ship_pipeline]}
            for s in chain.tiers
        ],
        "last_orders": list(chain.last_orders),
        "demand_history": list(chain.demand_history),
    }


def from_snapshot(data: dict) -> ChainState:
    if data.get("schema") != SNAPSHOT_SCHEMA:
        raise ValueError(f"unsupported snapshot schema {data.get('schema')!r}")
    params = tuple(TierParams(**p) for p in data["params"])
    tiers = tuple(
        TierState(
            on_hand=float(s["on_hand"]), backlog=float(s["backlog"]),
            outstanding=float(s["outstanding"]), forecast=float(s["forecast"]),
            order_pipeline=tuple((int(w), float(q)) for w, q in s["order_pipeline"]),
            ship_pipeline=tuple((int(w), float(q)) for w, q in s["ship_pipeline"]),
            last_incoming=float(s.get("last_incoming", 0.0)),
            last_received=float(s.get("last_received", 0.0)),
        )
        for s in data["tiers"]
    )
    if len(tiers) != len(params):
        raise ValueError("snapshot has mismatched params and tiers")
    return ChainState(int(data["period"]), params, tiers,
                      tuple(float(q) for q in data["last_orders"]),
                      tuple(float(d) for d in data["demand_history"]))
