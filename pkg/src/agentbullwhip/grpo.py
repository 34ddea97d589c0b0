"""Group-relative policy optimisation for a shared ordering policy.

The trainable policy is a categorical distribution over the integer orders
``0..max_order`` whose logits are a discretised Gaussian bump,
``-(a - mu)^2 / (2 sigma^2)``, centred on a feature-linear mean.  Log-probs,
their gradients and categorical KL are exact.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .chain import TierParams, advance, initial_chain
from .lab import (BullwhipMetrics, DemandSpec, EnsembleRecord, InsufficientSamples, Scenario,
                  bullwhip_metrics, run_ensemble, run_to_run_variance)
from .policies import Observation, observe

log = logging.getLogger(__name__)

FEATURES = ("inventory_position", "backlog", "incoming_order", "forecast", "pipeline", "bias")
EVAL_PATTERN = (4.0, 4.0, 4.0, 4.0)
EVAL_LEVEL = 8.0


# --- policy -----------------------------------------------------------------

def features(obs: Observation, scale: float) -> np.ndarray:
    return np.array([obs.inventory_position / scale, obs.backlog / scale, obs.incoming_order / scale,
                     obs.forecast / scale, obs.outstanding / scale, 1.0])


@dataclass(frozen=True)
class CategoricalOrderPolicy:
    """Shared stochastic ordering policy.

    ``params`` holds one weight per entry of :data:`FEATURES` followed by
    ``log sigma``.  The bump centre is ``mu = scale * (w . x)`` where ``x``
    are the features divided by ``scale``, so weights act in order units.
    """
    params: np.ndarray
    max_order: int = 64
    scale: float = 16.0

    def __post_init__(self):
        p = np.asarray(self.params, float)
        if p.shape != (len(FEATURES) + 1,):
            raise ValueError(f"expected {len(FEATURES) + 1} parameters, got shape {p.shape}")
        if self.max_order < 1:
            raise ValueError("max_order must be >= 1")
        object.__setattr__(self, "params", p)

    @classmethod
    def order_up_to(cls, theta: float = 4.0, sigma: float = 5.0, max_order: int = 64,
                    scale: float = 16.0) -> "CategoricalOrderPolicy":
        """Noisy ``theta * forecast - IP`` rule, the default initialisation."""
        p = np.zeros(len(FEATURES) + 1)
        p[FEATURES.index("inventory_position")] = -1.0
        p[FEATURES.index("forecast")] = theta
        p[-1] = math.log(sigma)
        return cls(p, max_order, scale)

    @classmethod
    def uniform(cls, max_order: int = 64, scale: float = 16.0) -> "CategoricalOrderPolicy":
        p = np.zeros(len(FEATURES) + 1)
        p[-1] = 30.0  # sigma so wide the bump is flat to rounding
        return cls(p, max_order, scale)

    def with_params(self, params: np.ndarray) -> "CategoricalOrderPolicy":
        return replace(self, params=np.asarray(params, float).copy())

    @property
    def actions(self) -> np.ndarray:
        return np.arange(self.max_order + 1, dtype=float)

    @property
    def n_params(self) -> int:
        return self.params.size

    def features(self, obs: Observation) -> np.ndarray:
        return features(obs, self.scale)

    # batched internals: X is (N, n_features)
    def _mu_sigma(self, X):
        return self.scale * (X @ self.params[:-1]), math.exp(self.params[-1])

    def log_probs_batch(self, X: np.ndarray) -> np.ndarray:
        mu, sigma = self._mu_sigma(np.atleast_2d(X))
        logits = -0.5 * ((self.actions[None, :] - mu[:, None]) / sigma) ** 2
        return logits - logsumexp(logits, axis=1, keepdims=True)

    def weighted_grad(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        """``sum_n sum_a W[n, a] * grad log pi(a | x_n)``."""
        X = np.atleast_2d(X)
        mu, sigma = self._mu_sigma(X)
        p = np.exp(self.log_probs_batch(X))
        z = (self.actions[None, :] - mu[:, None]) / sigma
        d_mu = z / sigma                      # d logit / d mu
        d_ls = z * z                          # d logit / d log sigma
        wsum = W.sum(1)
        g_mu = (W * d_mu).sum(1) - wsum * (p * d_mu).sum(1)
        g_ls = (W * d_ls).sum(1) - wsum * (p * d_ls).sum(1)
        return np.concatenate([self.scale * (g_mu @ X), [g_ls.sum()]])

    # per-observation interface
    def probs(self, obs: Observation) -> np.ndarray:
        return np.exp(self.log_probs_batch(self.features(obs))[0])

    def log_prob(self, obs: Observation, order: float) -> float:
        return float(self.log_probs_batch(self.features(obs))[0, self._index(order)])

    def grad_log_prob(self, obs: Observation, order: float) -> np.ndarray:
        W = np.zeros((1, self.max_order + 1))
        W[0, self._index(order)] = 1.0
        return self.weighted_grad(self.features(obs), W)

    def _index(self, order: float) -> int:
        a = int(round(order))
        if a != order or not 0 <= a <= self.max_order:
            raise ValueError(f"order {order!r} is not on the grid 0..{self.max_order}")
        return a

    def act(self, obs: Observation, rng: np.random.Generator) -> tuple[float, float]:
        lp = self.log_probs_batch(self.features(obs))[0]
        a = int(rng.choice(lp.size, p=np.exp(lp)))
        return float(a), float(lp[a])

    decide = act


# --- rewards and advantages ---------------------------------------------------

@dataclass(frozen=True)
class RewardSpec:
    scope: str = "agent"            # system | agent
    attribution: str = "reward_to_go"  # episode | reward_to_go

    def __post_init__(self):
        if self.scope not in ("system", "agent"):
            raise ValueError(f"unknown reward scope {self.scope!r}")
        if self.attribution not in ("episode", "reward_to_go"):
            raise ValueError(f"unknown reward attribution {self.attribution!r}")


def assign_rewards(costs: np.ndarray, spec: RewardSpec) -> np.ndarray:
    """Rewards ``(K, T)`` from per-agent, per-week costs ``(K, T)``."""
    c = np.atleast_2d(np.asarray(costs, float))
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        raise ValueError("costs must be finite and >= 0")
    if spec.scope == "system":
        c = np.broadcast_to(c.sum(0, keepdims=True), c.shape)
    togo = np.cumsum(c[:, ::-1], axis=1)[:, ::-1]
    if spec.attribution == "episode":
        return -np.broadcast_to(togo[:, :1], c.shape).copy()
    return -togo.copy()


def group_advantages(rewards: np.ndarray, eps_norm: float = 1e-8) -> np.ndarray:
    """Normalise each cell across the leading (episode) axis with the population std."""
    r = np.asarray(rewards, float)
    if r.shape[0] < 2:
        raise InsufficientSamples(f"group size must be >= 2, got {r.shape[0]}")
    if not eps_norm > 0:
        raise ValueError("eps_norm must be > 0")
    centred = r - r.mean(0)
    return centred / (r.std(0) + eps_norm)


def categorical_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``KL(p || q)``; ``inf`` where ``q`` misses mass that ``p`` has."""
    p, q = np.atleast_2d(p), np.atleast_2d(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    kl = terms.sum(1)
    bad = np.any((p > 0) & (q <= 0), axis=1)
    if bad.any():
        log.warning("KL support violation in %d of %d rows (first at row %d)",
                    int(bad.sum()), len(bad), int(np.argmax(bad)))
        kl[bad] = np.inf
    return kl


def categorical_kl_log(lp: np.ndarray, lq: np.ndarray) -> np.ndarray:
    """Row-wise KL from log-probabilities, immune to underflow of tiny masses."""
    lp, lq = np.atleast_2d(lp), np.atleast_2d(lq)
    p = np.exp(lp)
    with np.errstate(invalid="ignore"):
        terms = np.where(np.isneginf(lp), 0.0, p * (lp - lq))
    kl = terms.sum(1)
    bad = np.any(~np.isneginf(lp) & np.isneginf(lq), axis=1)
    if bad.any():
        log.warning("KL support violation in %d of %d rows (first at row %d)",
                    int(bad.sum()), len(bad), int(np.argmax(bad)))
        kl[bad] = np.inf
    return kl


def kl_penalty(policy: CategoricalOrderPolicy, reference: CategoricalOrderPolicy, X: np.ndarray) -> float:
    """Mean exact KL over the observation features ``X``."""
    if policy.max_order != reference.max_order:
        raise ValueError("policies must share one action grid")
    return float(np.mean(categorical_kl_log(policy.log_probs_batch(X), reference.log_probs_batch(X))))


# --- batches and the update ---------------------------------------------------

@dataclass
class GroupBatch:
    """``G`` episodes of ``T`` weeks for ``K`` agents."""
    X: np.ndarray           # (G, T, K, F)
    actions: np.ndarray     # (G, T, K)
    log_probs: np.ndarray   # (G, T, K)
    costs: np.ndarray       # (G, K, T)
    rewards: np.ndarray     # (G, T, K)
    advantages: np.ndarray  # (G, T, K)

    @property
    def G(self) -> int:
        return self.X.shape[0]

    @classmethod
    def from_rollouts(cls, X, actions, log_probs, costs, spec: RewardSpec, eps_norm: float = 1e-8) -> "GroupBatch":
        rewards = np.stack([assign_rewards(c, spec).T for c in costs])
        return cls(X, actions, log_probs, costs, rewards, group_advantages(rewards, eps_norm))

    @property
    def flat(self):
        F = self.X.shape[-1]
        return self.X.reshape(-1, F), self.actions.reshape(-1).astype(int), self.advantages.reshape(-1)


@dataclass(frozen=True)
class StepDiagnostics:
    objective: float
    kl: float
    grad_norm: float
    clipped: bool
    aborted: bool
    logprob_shift: float  # mean Adv * (log pi_new - log pi_old)


def surrogate(policy: CategoricalOrderPolicy, batch: GroupBatch, beta: float,
              reference: CategoricalOrderPolicy | None) -> float:
    X, A, adv = batch.flat
    lp = policy.log_probs_batch(X)[np.arange(len(A)), A]
    val = float(np.mean(adv * lp))
    if beta and reference is not None:
        val -= beta * kl_penalty(policy, reference, X)
    return val


def surrogate_grad(policy: CategoricalOrderPolicy, batch: GroupBatch, beta: float,
                   reference: CategoricalOrderPolicy | None) -> np.ndarray:
    X, A, adv = batch.flat
    N = len(A)
    W = np.zeros((N, policy.max_order + 1))
    W[np.arange(N), A] = adv / N
    if beta and reference is not None:
        lp, lq = policy.log_probs_batch(X), reference.log_probs_batch(X)
        W -= beta * np.exp(lp) * (lp - lq) / N
    return policy.weighted_grad(X, W)


@dataclass
class Adam:
    """Adaptive-moment ascent direction; optional replacement for the plain step."""
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def direction(self, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m, self.v = np.zeros_like(g), np.zeros_like(g)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return mhat / (np.sqrt(vhat) + self.eps)


def grpo_step(policy: CategoricalOrderPolicy, batch: GroupBatch, beta: float = 0.01, lr: float = 0.05,
              reference: CategoricalOrderPolicy | None = None, max_grad_norm: float = 1.0,
              optimizer: Adam | None = None) -> tuple[CategoricalOrderPolicy, StepDiagnostics]:
    """One clipped gradient-ascent step on the group-relative surrogate.

    The clipped gradient is applied directly, or through ``optimizer`` when
    one is given (its state advances in place).
    """
    X, A, adv = batch.flat
    kl = kl_penalty(policy, reference, X) if reference is not None else 0.0
    g = surrogate_grad(policy, batch, beta, reference)
    norm = float(np.linalg.norm(g))
    obj = float(np.mean(adv * policy.log_probs_batch(X)[np.arange(len(A)), A])) - beta * kl
    if not math.isfinite(norm):
        log.error("non-finite gradient; step aborted (kl=%r)", kl)
        return policy, StepDiagnostics(obj, kl, norm, False, True, 0.0)
    clipped = norm > max_grad_norm
    if clipped:
        g = g * (max_grad_norm / norm)
    step = optimizer.direction(g) if optimizer is not None else g
    new = policy.with_params(policy.params + lr * step)
    old_lp = policy.log_probs_batch(X)[np.arange(len(A)), A]
    new_lp = new.log_probs_batch(X)[np.arange(len(A)), A]
    return new, StepDiagnostics(obj, kl, norm, bool(clipped), False, float(np.mean(adv * (new_lp - old_lp))))


# --- environment and curriculum ----------------------------------------------

@dataclass(frozen=True)
class DemandCurriculum:
    """Per-episode demand generator.

    Each episode picks one of ``regimes`` uniformly, draws its
    hyper-parameters from the configured ranges and then an iid path.
    ``constant`` emits ``level`` every week.  With ``resample=False`` one
    draw per training step is shared by the whole group; with ``True``
    every episode draws its own.
    """
    regimes: tuple[str, ...] = ("poisson", "trunc_normal")
    rate_range: tuple[float, float] = (5.0, 20.0)
    mean_range: tuple[float, float] = (8.0, 20.0)
    std_range: tuple[float, float] = (2.0, 6.0)
    support: tuple[float, float] = (0.0, 50.0)
    level: float = 4.0
    resample: bool = False

    def __post_init__(self):
        if not self.regimes:
            raise ValueError("curriculum needs at least one regime")
        for r in self.regimes:
            if r not in ("poisson", "trunc_normal", "constant"):
                raise ValueError(f"unknown curriculum regime {r!r}")

    def sample(self, rng: np.random.Generator, horizon: int) -> np.ndarray:
        regime = self.regimes[int(rng.integers(len(self.regimes)))]
        if regime == "constant":
            return np.full(horizon, float(self.level))
        if regime == "poisson":
            return rng.poisson(rng.uniform(*self.rate_range), horizon).astype(float)
        mu, sd = rng.uniform(*self.mean_range), rng.uniform(*self.std_range)
        return np.clip(rng.normal(mu, sd, horizon), *self.support)


@dataclass(frozen=True)
class EnvConfig:
    tiers: tuple[TierParams, ...] = (TierParams(),) * 4
    horizon: int = 20
    initial_on_hand: float = 12.0
    initial_flow: float = 4.0

    @property
    def n_tiers(self) -> int:
        return len(self.tiers)


def rollout(policy: CategoricalOrderPolicy, env: EnvConfig, demand: np.ndarray, rng: np.random.Generator):
    """One episode with the shared policy at every tier."""
    K, T = env.n_tiers, env.horizon
    state = initial_chain(env.tiers, env.initial_on_hand, env.initial_flow)
    X = np.zeros((T, K, len(FEATURES)))
    A = np.zeros((T, K), dtype=int)
    LP = np.zeros((T, K))
    C = np.zeros((K, T))
    for t in range(T):
        for k in range(K):
            X[t, k] = policy.features(observe(state, k))
        lp = policy.log_probs_batch(X[t])
        p = np.exp(lp)
        u = rng.random(K)
        A[t] = np.minimum((p.cumsum(1) < u[:, None]).sum(1), policy.max_order)
        LP[t] = lp[np.arange(K), A[t]]
        state, out = advance(state, float(demand[t]), A[t].astype(float))
        C[:, t] = out.costs
    return X, A, LP, C


def collect(policy, env: EnvConfig, curriculum: DemandCurriculum, G: int, seed: int, step: int,
            spec: RewardSpec, eps_norm: float = 1e-8, shared_demand: np.ndarray | None = None) -> GroupBatch:
    demand_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, step)))
    fixed = curriculum.sample(demand_rng, env.horizon) if not curriculum.resample else None
    parts = []
    for i in range(G):
        if shared_demand is not None:
            d = shared_demand
        elif fixed is not None:
            d = fixed
        else:
            d = curriculum.sample(np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, step, i))),
                                  env.horizon)
        parts.append(rollout(policy, env, d, np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, step, i)))))
    X, A, LP, C = (np.stack(z) for z in zip(*parts))
    return GroupBatch.from_rollouts(X, A, LP, C, spec, eps_norm)


@dataclass(frozen=True)
class TrainConfig:
    env: EnvConfig = EnvConfig()
    curriculum: DemandCurriculum = DemandCurriculum()
    reward: RewardSpec = RewardSpec()
    group_size: int = 16
    steps: int = 600
    beta: float = 0.01
    lr: float = 0.02
    max_grad_norm: float = 1.0
    eps_norm: float = 1e-8
    seed: int = 0
    optimizer: str = "adam"  # sgd | adam

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class TrainLogRow:
    step: int
    mean_cost: float
    kl: float
    grad_norm: float
    clipped: bool
    aborted: bool
    logprob_shift: float


LOG_COLUMNS = ("step", "mean_cost", "kl", "grad_norm", "clipped", "aborted", "logprob_shift")


def train(cfg: TrainConfig, init: CategoricalOrderPolicy | None = None
          ) -> tuple[CategoricalOrderPolicy, list[TrainLogRow]]:
    """Collect ``group_size`` episodes per step and apply :func:`grpo_step`."""
    if cfg.group_size < 2:
        raise InsufficientSamples("group size must be >= 2")
    policy = init if init is not None else CategoricalOrderPolicy.order_up_to(
        theta=cfg.env.tiers[0].target_multiplier)
    reference = policy
    opt = Adam() if cfg.optimizer == "adam" else None
    rows = []
    for step in range(cfg.steps):
        batch = collect(policy, cfg.env, cfg.curriculum, cfg.group_size, cfg.seed, step, cfg.reward, cfg.eps_norm)
        policy, d = grpo_step(policy, batch, cfg.beta, cfg.lr, reference, cfg.max_grad_norm, opt)
        rows.append(TrainLogRow(step, float(batch.costs.sum(axis=(1, 2)).mean()), d.kl, d.grad_norm,
                                d.clipped, d.aborted, d.logprob_shift))
    return policy, rows


def write_train_log(rows: Sequence[TrainLogRow], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow((r.step, repr(r.mean_cost), repr(r.kl), repr(r.grad_norm),
                        int(r.clipped), int(r.aborted), repr(r.logprob_shift)))


CHECKPOINT_SCHEMA = "agentbullwhip.policy/1"


def save_checkpoint(policy: CategoricalOrderPolicy, path: Path, config_hash: str = "") -> None:
    with open(path, "w") as fh:
        json.dump({"schema": CHECKPOINT_SCHEMA, "features": list(FEATURES),
                   "params": [float(x) for x in policy.params], "max_order": policy.max_order,
                   "scale": policy.scale, "config_hash": config_hash}, fh, indent=2)
        fh.write("\n")


def load_checkpoint(path: Path) -> tuple[CategoricalOrderPolicy, str]:
    data = json.loads(Path(path).read_text())
    if data.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {data.get('schema')!r}")
    return (CategoricalOrderPolicy(np.array(data["params"], float), int(data["max_order"]), float(data["scale"])),
            data.get("config_hash", ""))


# --- evaluation ----------------------------------------------------------------

@dataclass
class EvaluationReport:
    record: EnsembleRecord
    metrics: BullwhipMetrics
    total_costs: np.ndarray = field(init=False)
    agent_costs: np.ndarray = field(init=False)

    def __post_init__(self):
        self.total_costs = self.record.total_costs
        self.agent_costs = self.record.tier_costs

    @property
    def mean_cost(self) -> float:
        return float(self.total_costs.mean())

    @property
    def std_cost(self) -> float:
        return float(self.total_costs.std(ddof=1))

    @property
    def max_cost(self) -> float:
        return float(self.total_costs.max())

    @property
    def cv(self) -> float:
        return self.std_cost / self.mean_cost if self.mean_cost > 0 else float("nan")

    def summary(self) -> dict:
        return {"runs": int(self.record.R), "mean_cost": self.mean_cost, "std_cost": self.std_cost,
                "max_cost": self.max_cost, "cv": self.cv,
                "agent_mean_costs": [float(c) for c in self.agent_costs.mean(0)]}


EVAL_DEMAND = DemandSpec("pattern", level=EVAL_LEVEL, values=EVAL_PATTERN)


def evaluation_scenario(policy, env: EnvConfig = EnvConfig(), demand: DemandSpec = EVAL_DEMAND) -> Scenario:
    return Scenario(env.tiers, demand, env.horizon,
                    policies=(policy,) * env.n_tiers, initial_on_hand=env.initial_on_hand,
                    initial_flow=env.initial_flow, name="evaluation")


def evaluate(policy, R: int = 30, env: EnvConfig = EnvConfig(), seed: int = 12345,
             tau: float = 1e-9, workers: int = 1, demand: DemandSpec = EVAL_DEMAND) -> EvaluationReport:
    """Play the step-up pattern (or ``demand``) ``R`` times and summarise costs and variability."""
    rec = run_ensemble(evaluation_scenario(policy, env, demand), R, seed, workers)
    return EvaluationReport(rec, bullwhip_metrics(run_to_run_variance(rec), tau, rec.orders))
