"""Laplace functionals and remainder tails at moderate scale.

The Laplace estimate (1/alpha) log E exp(sqrt(alpha) X) of a field X is
compared with its Gaussian target while alpha(N) = N^beta grows. Watch the
'flagged' column: once sqrt(alpha) times the standard deviation of X is a
few units, a handful of replications carry the whole exponential mean and
the estimate drifts below the target. This is an estimator limit, not a
property of the particle system. Increase R to push it back.
"""
import numpy as np

from meanfield_mdp import RngSpec, SpeedSchedule, mdp_sweep, remainder_tail_check, two_state_example

model = two_state_example(horizon=1)
f = np.array([1.0, 0.0])
schedule = SpeedSchedule(0.5, (100, 1000, 4000))
rng = RngSpec(11)

sweep = mdp_sweep(model, f, schedule, 4000, rng, n=1)
print(sweep.to_text())

tails = remainder_tail_check(model, f, schedule, 4000, rng, eps=0.25, n=1)
print(tails.to_text())
