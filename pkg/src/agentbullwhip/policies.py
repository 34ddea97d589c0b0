"""Ordering policies and the remote-agent text protocol.

A policy is any object with ``decide(obs, rng) -> (order, log_prob)``;
``log_prob`` is ``None`` for policies without a tractable likelihood.
"""
from __future__ import annotations

import json
import logging
import math
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .chain import ChainState

log = logging.getLogger(__name__)

ROLES = ("Retailer", "Wholesaler", "Distributor", "Factory")


class ProtocolViolation(ValueError):
    """A remote agent answered with something that is not a valid order."""


@dataclass(frozen=True)
class Observation:
    """Local view of one tier at the start of a period."""
    week: int
    tier: int
    on_hand: float
    backlog: float
    outstanding: float
    forecast: float
    incoming_order: float
    last_order: float
    last_delivery: float
    holding_cost: float = 0.5
    backlog_cost: float = 1.0
    target_multiplier: float = 4.0
    n_tiers: int = 4

    @property
    def inventory_position(self) -> float:
        return self.on_hand + self.outstanding - self.backlog


def observe(chain: ChainState, k: int) -> Observation:
    """Observation for tier ``k`` (0-based) at the start of ``chain.period``."""
    tier, p = chain.tiers[k], chain.params[k]
    return Observation(
        week=chain.period + 1, tier=k, on_hand=tier.on_hand, backlog=tier.backlog,
        outstanding=tier.outstanding, forecast=tier.forecast,
        incoming_order=tier.last_incoming, last_order=chain.last_orders[k],
        last_delivery=tier.last_received, holding_cost=p.holding_cost,
        backlog_cost=p.backlog_cost, target_multiplier=p.target_multiplier,
        n_tiers=chain.n_tiers,
    )


class AgentPolicy(Protocol):
    def decide(self, obs: Observation, rng: np.random.Generator) -> tuple[float, float | None]: ...


@dataclass(frozen=True)
class ForecastState:
    value: float
    smoothing: float

    def __post_init__(self):
        if not 0.0 < self.smoothing <= 1.0:
            raise ValueError(f"smoothing must lie in (0, 1], got {self.smoothing!r}")


def forecast_update(f: ForecastState, observed_order: float) -> ForecastState:
    lam = f.smoothing
    return ForecastState(lam * observed_order + (1.0 - lam) * f.value, lam)


def linear_order(forecast: float | ForecastState, theta: float, shock: float, ip: float) -> float:
    """Untruncated order-up-to rule; may return negative orders."""
    if not theta > 0:
        raise ValueError(f"theta must be > 0, got {theta!r}")
    if isinstance(forecast, ForecastState):
        forecast = forecast.value
    return theta * forecast + shock - ip


def order_up_to(forecast: float | ForecastState, theta: float, shock: float, ip: float) -> float:
    return max(linear_order(forecast, theta, shock, ip), 0.0)


@dataclass(frozen=True)
class DecisionShockSpec:
    """Centered decision shock.

    ``gaussian``: N(0, scale^2).  ``uniform``: U(-scale, scale).
    ``discrete``: ``values`` with ``probs`` (must have mean zero).
    ``zero``: no shock.
    """
    family: str = "gaussian"
    scale: float = 1.0
    values: tuple[float, ...] = ()
    probs: tuple[float, ...] = ()
    stream: str = "shock"

    def __post_init__(self):
        if self.family not in ("gaussian", "uniform", "discrete", "zero"):
            raise ValueError(f"unknown shock family {self.family!r}")
        if self.scale < 0:
            raise ValueError("shock scale must be >= 0")
        if self.family == "discrete":
            if len(self.values) == 0 or len(self.values) != len(self.probs):
                raise ValueError("discrete shocks need matching values and probs")
            if abs(sum(self.probs) - 1.0) > 1e-9 or min(self.probs) < 0:
                raise ValueError("discrete shock probs must be a distribution")
            if abs(sum(v * p for v, p in zip(self.values, self.probs))) > 1e-9:
                raise ValueError("discrete shock must have mean zero")

    @property
    def variance(self) -> float:
        if self.family == "gaussian":
            return self.scale ** 2
        if self.family == "uniform":
            return self.scale ** 2 / 3.0
        if self.family == "discrete":
            return sum(p * v * v for v, p in zip(self.values, self.probs))
        return 0.0

    def sample(self, rng: np.random.Generator, size=None):
        if self.family == "gaussian":
            return rng.normal(0.0, self.scale, size)
        if self.family == "uniform":
            return rng.uniform(-self.scale, self.scale, size)
        if self.family == "discrete":
            return rng.choice(np.asarray(self.values, float), size=size, p=np.asarray(self.probs, float))
        return 0.0 if size is None else np.zeros(size)


@dataclass(frozen=True)
class OrderUpToPolicy:
    """``[theta * forecast + eps - IP]^+`` with a sampled decision shock.

    ``theta`` defaults to the tier's own target multiplier from the
    observation.  ``integer`` rounds orders to whole cases.
    """
    shock: DecisionShockSpec = DecisionShockSpec("zero", 0.0)
    theta: float | None = None
    integer: bool = False

    def decide(self, obs: Observation, rng: np.random.Generator):
        theta = self.theta if self.theta is not None else obs.target_multiplier
        eps = float(self.shock.sample(rng))
        q = order_up_to(obs.forecast, theta, eps, obs.inventory_position)
        if self.integer:
            q = float(round(q))
        return q, None


@dataclass(frozen=True)
class BaseStockPolicy:
    """Deterministic ``[level - IP]^+``."""
    level: float

    def decide(self, obs: Observation, rng: np.random.Generator):
        return max(self.level - obs.inventory_position, 0.0), None


@dataclass(frozen=True)
class ScriptedPolicy:
    """Draws ``values`` with ``probs`` regardless of the observation; a test fixture."""
    values: tuple[float, ...]
    probs: tuple[float, ...]

    def decide(self, obs, rng):
        return float(rng.choice(np.asarray(self.values, float), p=np.asarray(self.probs, float))), None


def vote(orders: Sequence[float]) -> float:
    """Mode of the rounded orders; ties go to the smallest order."""
    counts = Counter(int(round(q)) for q in orders)
    top = max(counts.values())
    return float(min(q for q, c in counts.items() if c == top))


@dataclass(frozen=True)
class MajorityVote:
    base: AgentPolicy
    n: int = 10

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("majority vote needs n >= 1")

    def decide(self, obs: Observation, rng: np.random.Generator):
        children = rng.spawn(self.n)
        return vote([self.base.decide(obs, child)[0] for child in children]), None


def majority_vote(base: AgentPolicy, n: int) -> MajorityVote:
    return MajorityVote(base, n)


# --- remote agent protocol -------------------------------------------------

PROMPT_TEMPLATE = """\
You are the {role} in the Beer Distribution Game.
Goal: keep your total cost as low as possible by deciding how many cases of beer to order from your upstream partner this week.

Costs and delays:
- Holding Cost: {holding_cost:.2f} per case per week.
- Backorder Cost: {backlog_cost:.2f} per case per week.
- Order Lead Time: {order_lead_time} week(s).
- Shipping Lead Time: {shipping_lead_time} week(s).

**Your Current Situation (Week {week}):**
- Current Inventory: {current_inventory} cases
- Current Backlog: {current_backlog} cases
- Incoming Order from Downstream: {incoming_order_this_week} cases
- Last Order You Placed: {last_order_placed} cases
- Last Delivery You Received: {last_delivery_received} cases
{pipeline_info}{budget_info}{fixed_cost_info}{order_forecast_info}{feedback_info}
---------------------------
Your Task:
Start your response with a JSON object **on its own line** in the following exact format:
{{"order_quantity": <number_of_cases>}}

For instance, a final line of
{{"order_quantity": 5}}
orders five cases.
"""


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:.2f}"


def render_prompt(obs: Observation, template: str = PROMPT_TEMPLATE,
                  order_lead_time: int = 1, shipping_lead_time: int = 2, **extra: str) -> str:
    role = ROLES[obs.tier] if obs.tier < len(ROLES) else f"Tier {obs.tier + 1}"
    fields = dict(
        role=role, week=obs.week, holding_cost=obs.holding_cost, backlog_cost=obs.backlog_cost,
        order_lead_time=order_lead_time, shipping_lead_time=shipping_lead_time,
        current_inventory=_fmt(obs.on_hand), current_backlog=_fmt(obs.backlog),
        incoming_order_this_week=_fmt(obs.incoming_order),
        last_order_placed=_fmt(obs.last_order), last_delivery_received=_fmt(obs.last_delivery),
        pipeline_info="", budget_info="", fixed_cost_info="", order_forecast_info="", feedback_info="",
    )
    fields.update(extra)
    return template.format(**fields)


def parse_order(text: str) -> float:
    """Order quantity from the first line holding a JSON object."""
    for line in text.splitlines():
        line = line.strip()
        if not line.startswith("{"):
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            continue
        if not isinstance(obj, dict):
            continue
        if "order_quantity" not in obj:
            raise ProtocolViolation(f"JSON line without order_quantity: {line!r}")
        q = obj["order_quantity"]
        if isinstance(q, bool) or not isinstance(q, (int, float)) or not math.isfinite(q):
            raise ProtocolViolation(f"order_quantity is not a number: {q!r}")
        if q < 0:
            raise ProtocolViolation(f"negative order_quantity: {q!r}")
        return float(q)
    raise ProtocolViolation("no JSON object line in response")


@dataclass(frozen=True)
class RemoteAgentPolicy:
    """POSTs the rendered prompt as text and parses the response body.

    After ``retries`` extra attempts a :class:`ProtocolViolation` propagates;
    the simulation harness then substitutes :meth:`fallback_order`.
    """
    endpoint: str
    timeout: float = 30.0
    retries: int = 2
    fallback: str = "repeat_last"
    template: str = field(default=PROMPT_TEMPLATE, repr=False)

    def __post_init__(self):
        if self.fallback not in ("repeat_last", "zero", "forecast"):
            raise ValueError(f"unknown fallback {self.fallback!r}")

    def _post(self, prompt: str) -> str:
        req = urllib.request.Request(self.endpoint, data=prompt.encode(), method="POST",
                                     headers={"Content-Type": "text/plain; charset=utf-8"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read().decode("utf-8", errors="replace")

    def decide(self, obs: Observation, rng: np.random.Generator):
        prompt = render_prompt(obs, self.template)
        last_err: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                return parse_order(self._post(prompt)), None
            except (ProtocolViolation, urllib.error.URLError, TimeoutError, OSError) as err:
                log.warning("remote agent attempt %d failed at week %d tier %d: %s",
                            attempt + 1, obs.week, obs.tier, err)
                last_err = err
        raise ProtocolViolation(f"remote agent failed after {self.retries + 1} attempts: {last_err}")

    def fallback_order(self, obs: Observation) -> float:
        if self.fallback == "repeat_last":
            return obs.last_order
        if self.fallback == "forecast":
            return obs.forecast
        return 0.0


def fallback_order(policy, obs: Observation) -> float:
    fb = getattr(policy, "fallback_order", None)
    return fb(obs) if fb is not None else obs.last_order
