"""Per-tier gains and the variance floors they imply for a four-tier chain."""
from agentbullwhip.linear import GainProfile, average_gain, bound_table

for theta, lam in [(1.0, 1.0), (1.0, 0.5), (3.0, 0.5), (0.5, 0.2)]:
    print(f"theta={theta:<4} lam={lam:<4} Gamma={average_gain(theta, lam):.4f}")

print()
print(" k   demand floor   decision floor")
for row in bound_table(GainProfile.uniform(1.0, 0.5, 4), demand_var=1.0, shock_vars=[1.0] * 4):
    print(f"{row.k:2d}   {row.demand_bound:12.3f}   {row.decision_bound:14.3f}")
