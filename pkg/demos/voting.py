"""Majority voting shrinks each decision's noise but upstream tiers still amplify what is left."""
import numpy as np

from agentbullwhip.chain import TierParams
from agentbullwhip.lab import DemandSpec, Scenario, run_ensemble, run_to_run_variance
from agentbullwhip.linear import GainProfile, decision_bound
from agentbullwhip.policies import DecisionShockSpec, OrderUpToPolicy, majority_vote

tiers = (TierParams(smoothing=0.5, target_multiplier=1.0),) * 4
base = OrderUpToPolicy(DecisionShockSpec("gaussian", 1.0), integer=True)
gains = GainProfile.uniform(1.0, 0.5, 4)

for label, policy in [("single sample", base), ("vote of 10", majority_vote(base, 10))]:
    sc = Scenario(tiers, DemandSpec("constant", level=40.0), 100, policies=(policy,) * 4,
                  initial_on_hand=40.0, initial_flow=40.0)
    med = np.median(run_to_run_variance(run_ensemble(sc, 30, seed=1))[:, 30:], axis=1)
    # tier-1 variance is twice the per-decision variance in the linear regime
    v = med[1] / 2
    floor = [decision_bound(k, [v] * 4, gains) for k in range(1, 5)]
    print(f"{label:>13}: median sigma^2 {np.round(med[1:], 2)}  floor {np.round(floor, 2)}")
