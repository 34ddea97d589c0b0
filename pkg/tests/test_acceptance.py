"""Acceptance criteria 1-13, one test each; every test reports one PASS/FAIL line."""
import time

import numpy as np
import pytest

from agentbullwhip.chain import TierParams, advance, audit_ip_recursion, initial_chain
from agentbullwhip.grpo import (CategoricalOrderPolicy, EnvConfig, GroupBatch, TrainConfig, collect,
                                evaluate, group_advantages, grpo_step, kl_penalty, surrogate, surrogate_grad,
                                train, DemandCurriculum, RewardSpec)
from agentbullwhip.lab import (DemandSpec, Scenario, check_bounds, decompose_variance, run_ensemble,
                               run_to_run_variance, stationary_run_variance, variance_se)
from agentbullwhip.linear import (GainProfile, average_gain, decision_bound, frequency_gain,
                                  intertemporal_variance, mean_gain_quadrature, shock_filter, tier_filter,
                                  tier_gain)
from agentbullwhip.policies import DecisionShockSpec, Observation, OrderUpToPolicy, majority_vote

RESULTS: list[str] = []
GRID = [(th, la) for th in np.linspace(0.25, 4.0, 10) for la in np.linspace(0.05, 1.0, 10)]
GAUSS = DecisionShockSpec("gaussian", 1.0)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def linear_scenario(n, theta, lam, demand, shocks, horizon, burn_in):
    return Scenario(tuple(TierParams(smoothing=lam, target_multiplier=theta) for _ in range(n)), demand,
                    horizon, shocks=(GAUSS,) * n if shocks else (), engine="linear", burn_in=burn_in)


def test_criterion_01_gain_matches_impulse_energy():
    t0 = time.perf_counter()
    err = max(abs(average_gain(th, la) - tier_filter(th, la).energy()) for th, la in GRID)
    dt = time.perf_counter() - t0
    report(1, err <= 1e-9 and dt < 1.0, f"max |Gamma - sum h^2| = {err:.2e} over 100 grid points in {dt:.2f}s")


def test_criterion_02_quadrature_matches_gain():
    t0 = time.perf_counter()
    err = max(abs(mean_gain_quadrature(lambda w: frequency_gain(tier_filter(th, la), w)) - average_gain(th, la))
              for th, la in GRID)
    g_err = abs(mean_gain_quadrature(lambda w: frequency_gain(shock_filter(), w)) - 2.0)
    dt = time.perf_counter() - t0
    report(2, err <= 1e-6 and g_err <= 1e-9 and dt < 5.0,
           f"max quadrature error {err:.2e}, difference filter {g_err:.1e}, {dt:.2f}s")


def test_criterion_03_gain_floor():
    omega = np.linspace(-np.pi, np.pi, 10_001)
    nonzero = omega != 0.0
    worst, eq_ok = np.inf, True
    for th, la in GRID:
        g = tier_gain(th, la, omega)
        worst = min(worst, float((g[nonzero] - 1).min()))
        eq_ok &= bool(g[~nonzero][0] == 1.0)
        eq_ok &= bool(np.all(frequency_gain(tier_filter(th, la), omega) >= 1 - 1e-12))
    report(3, worst > 0 and eq_ok, f"min g-1 off zero frequency {worst:.2e}; g(0) = 1 on every grid point: {eq_ok}")


def test_criterion_04_single_tier_demand_equality():
    t0 = time.perf_counter()
    sc = linear_scenario(1, 1.0, 1.0, DemandSpec("normal", std=1.0, mode="stochastic"), False, 250, 20)
    rec = run_ensemble(sc, 500, seed=4)
    w = stationary_run_variance(rec, 20)
    dt = time.perf_counter() - t0
    n = rec.R * (rec.horizon - 20)
    ok = abs(w.estimate[1] - 5.0) <= 3 * w.se[1] and n >= 1e5 and dt < 30
    report(4, ok, f"Var(q1) = {w.estimate[1]:.4f} +/- {w.se[1]:.4f} (target 5), {n} samples, {dt:.1f}s")


def test_criterion_05_single_tier_decision_equality():
    t0 = time.perf_counter()
    sc = linear_scenario(1, 1.0, 1.0, DemandSpec("constant", level=0.0), True, 250, 20)
    rec = run_ensemble(sc, 1000, seed=5)
    w = stationary_run_variance(rec, 20)
    dt = time.perf_counter() - t0
    ok = abs(w.estimate[1] - 2.0) <= 3 * w.se[1] and dt < 30
    report(5, ok, f"Var(q1|D) = {w.estimate[1]:.4f} +/- {w.se[1]:.4f} (target 2), {dt:.1f}s")


def test_criterion_06_multi_tier_bounds():
    t0 = time.perf_counter()
    sc = linear_scenario(3, 1.0, 0.5, DemandSpec("normal", std=1.0), True, 120, 40)
    res = decompose_variance(sc, 400, 4, seed=6)
    checks = check_bounds(res, sc.gains, 1.0, [1.0] * 3, burn_in=40)
    dt = time.perf_counter() - t0
    ok = len(checks) == 6 and all(c.passed for c in checks) and dt < 120
    summary = "; ".join(f"k{c.k} {c.component[:3]} {c.estimate:.2f}>={c.bound:.2f}-3*{c.se:.2f}" for c in checks)
    report(6, ok, f"Gamma={sc.gains.gammas[0]:.4f}; {summary}; {dt:.1f}s")


def test_criterion_07_intertemporal_accumulation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    mono = True
    for _ in range(50):
        n = int(rng.integers(1, 5))
        gains = GainProfile(tuple(rng.uniform(0.1, 4, n)), tuple(rng.uniform(0.05, 1, n)))
        s2 = rng.uniform(0, 3, n)
        for k in range(1, n + 1):
            mono &= bool(np.all(np.diff(intertemporal_variance(k, 40, s2, gains)) >= -1e-12))
    sc = linear_scenario(3, 1.0, 0.5, DemandSpec("constant", level=0.0), True, 10, 0)
    rec = run_ensemble(sc, 20_000, seed=7)
    s2_mc = run_to_run_variance(rec)
    worst = 0.0
    for k in (1, 2, 3):
        exact = intertemporal_variance(k, 10, [1.0] * 3, sc.gains)
        se = variance_se(rec.orders[:, k, :])
        for t in (2, 5, 10):
            worst = max(worst, abs(s2_mc[k, t - 1] - exact[t - 1]) / se[t - 1])
    dt = time.perf_counter() - t0
    report(7, mono and worst <= 3 and dt < 60,
           f"50 random profiles nondecreasing: {mono}; worst |MC - exact| = {worst:.2f} s.e.; {dt:.1f}s")


def test_criterion_08_physics_invariants():
    rng = np.random.default_rng(8)
    params = [TierParams(order_delay=int(rng.integers(0, 3)), ship_delay=int(rng.integers(0, 4)),
                         smoothing=float(rng.uniform(0.1, 1))) for _ in range(4)]
    chain = initial_chain(params, on_hand=12.0, flow=4.0)
    violations = 0
    for _ in range(10_000):
        demand = float(rng.poisson(6))
        orders = rng.uniform(0, 15, 4) * (rng.random(4) > 0.1)
        nxt, out = advance(chain, demand, orders)
        violations += not audit_ip_recursion(chain, nxt, out)
        for k, (before, after) in enumerate(zip(chain.tiers, nxt.tiers)):
            violations += after.on_hand < 0 or after.backlog < 0
            violations += out.shipments[k] > before.on_hand + out.receipts[k] + 1e-9
            violations += out.shipments[k] > out.incoming[k] + before.backlog + 1e-9
        chain = nxt
    report(8, violations == 0, f"10000 randomized steps, {violations} violations")


def test_criterion_09_decomposition_consistency():
    pol = lambda shock: tuple(OrderUpToPolicy(shock) for _ in range(4))  # noqa: E731
    zero = DecisionShockSpec("zero", 0.0)
    scenarios = {
        "demand-only": Scenario((TierParams(),) * 4, DemandSpec("poisson", rate=4.0), 30, pol(zero),
                                initial_on_hand=4.0),
        "shock-only": Scenario((TierParams(),) * 4, DemandSpec("constant", level=4.0), 30, pol(GAUSS),
                               initial_on_hand=4.0),
        "both": Scenario((TierParams(),) * 4, DemandSpec("poisson", rate=4.0), 30, pol(GAUSS),
                         initial_on_hand=4.0),
    }
    worst, parts = 0.0, []
    for i, (name, sc) in enumerate(scenarios.items()):
        win = decompose_variance(sc, 100, 4, seed=90 + i).window(10)
        se = win.combined_se
        ratio = np.where(se > 0, np.abs(win.gap) / np.where(se > 0, se, 1), np.where(win.gap == 0, 0, np.inf))
        worst = max(worst, float(ratio.max()))
        parts.append(f"{name} {ratio.max():.2f}")
    report(9, worst <= 4, "max |total - (V^D + V^e)| / combined s.e.: " + ", ".join(parts))


def test_criterion_10_agent_bullwhip_under_fixed_demand():
    sc = Scenario((TierParams(),) * 4, DemandSpec("constant", level=4.0), 40,
                  policies=tuple(OrderUpToPolicy(GAUSS) for _ in range(4)), initial_on_hand=4.0)
    rec = run_ensemble(sc, 30, seed=10)
    med = np.median(run_to_run_variance(rec), axis=1)
    report(10, bool(np.all(np.diff(med) > 0)), f"median_t sigma^2 by tier 0..4: {np.round(med, 3).tolist()}")


def test_criterion_11_grpo_mechanics():
    rng = np.random.default_rng(11)
    adv = group_advantages(rng.normal(size=(16, 20, 4)) * rng.uniform(0.1, 50, (1, 20, 4)))
    cells_ok = bool(np.all(np.abs(adv.mean(0)) < 1e-9) and np.all(adv.std(0) <= 1 + 1e-12))

    pol = CategoricalOrderPolicy.order_up_to(theta=4, sigma=4)
    batch = collect(pol, EnvConfig(tiers=(TierParams(),) * 2, horizon=6), DemandCurriculum(), 4, 11, 0,
                    RewardSpec())
    ref = pol.with_params(pol.params + np.array([0.1, 0, -0.05, 0.2, 0, 0.01, -0.2]))
    g = surrogate_grad(pol, batch, 0.1, ref)
    fd = np.zeros_like(g)
    for i in range(g.size):
        e = np.zeros_like(g)
        e[i] = 1e-6
        fd[i] = (surrogate(pol.with_params(pol.params + e), batch, 0.1, ref)
                 - surrogate(pol.with_params(pol.params - e), batch, 0.1, ref)) / 2e-6
    rel = float(np.linalg.norm(g - fd) / np.linalg.norm(fd))

    obs = Observation(week=2, tier=0, on_hand=4.0, backlog=0.0, outstanding=8.0, forecast=4.0,
                      incoming_order=4.0, last_order=4.0, last_delivery=4.0)
    bandit = CategoricalOrderPolicy(np.zeros(7), max_order=1)
    X = np.tile(bandit.features(obs), (2, 1, 1, 1))
    z = np.zeros((2, 1, 1))
    bb = GroupBatch(X, np.array([1, 0]).reshape(2, 1, 1), z, z, z, np.array([1.0, -1.0]).reshape(2, 1, 1))
    p0 = bandit.probs(obs)[1]
    p1 = grpo_step(bandit, bb, beta=0.0, lr=0.1)[0].probs(obs)[1]

    Xf = batch.flat[0]
    kl0 = kl_penalty(pol, ref, Xf)
    kl1 = kl_penalty(grpo_step(pol, batch, beta=1e4, lr=0.01, reference=ref)[0], ref, Xf)
    ok = cells_ok and rel <= 1e-4 and p1 > p0 and kl1 < kl0
    report(11, ok, f"cells standardised: {cells_ok}; gradient rel err {rel:.1e}; bandit P(a) {p0:.4f}->{p1:.4f}; "
                   f"KL {kl0:.4f}->{kl1:.4f}")


@pytest.mark.slow
def test_criterion_12_grpo_effect():
    t0 = time.perf_counter()
    cfg = TrainConfig(group_size=16, steps=600, seed=1)
    init = CategoricalOrderPolicy.order_up_to(theta=4.0, sigma=5.0)
    trained, _ = train(cfg, init)
    before, after = evaluate(init, 30), evaluate(trained, 30)
    dt = time.perf_counter() - t0
    ok = after.mean_cost < before.mean_cost and after.cv < before.cv and dt < 900
    report(12, ok, f"mean cost {before.mean_cost:.1f} -> {after.mean_cost:.1f}, "
                   f"CV {before.cv:.3f} -> {after.cv:.3f}, {cfg.steps} steps, {dt:.0f}s")


def test_criterion_13_voting_leaves_upstream_amplification():
    tiers = (TierParams(smoothing=0.5, target_multiplier=1.0),) * 4
    voted = majority_vote(OrderUpToPolicy(GAUSS, integer=True), 10)
    # per-decision variance of the voted order at interior states, over fractional target offsets
    rng = np.random.default_rng(13)
    v = np.mean([np.var([voted.decide(Observation(week=5, tier=0, on_hand=0.0, backlog=0.0,
                                                  outstanding=30.0 - off, forecast=40.0, incoming_order=40.0,
                                                  last_order=40.0, last_delivery=40.0, target_multiplier=1.0),
                                      c)[0] for c in rng.spawn(2000)], ddof=1)
                 for off in np.arange(10) / 10])
    sc = Scenario(tiers, DemandSpec("constant", level=40.0), 100, policies=(voted,) * 4,
                  initial_on_hand=40.0, initial_flow=40.0)
    rec = run_ensemble(sc, 30, seed=1)
    med = np.median(run_to_run_variance(rec)[:, 30:], axis=1)
    floor = np.array([decision_bound(k, [v] * 4, GainProfile.uniform(1.0, 0.5, 4)) for k in range(1, 5)])
    ok = v < 1.0 and bool(np.all(med[2:] > floor[1:]))
    report(13, ok, f"voted per-decision variance {v:.3f} (base 1.0); upstream median sigma^2 "
                   f"{np.round(med[2:], 2).tolist()} vs floor {np.round(floor[1:], 2).tolist()}")
