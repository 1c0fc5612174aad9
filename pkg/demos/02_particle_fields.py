"""Simulate the particle system and look at its fluctuation fields.

One run at N = 2000 shows the three fields V (local sampling noise),
W (global error) and R (second-order remainder) and checks the identity
W = sum_p V_p(D_{p,n} f) + R / sqrt(N). A batch of replications then
compares the empirical variance of W_n(f) with the Gaussian limit.
"""
import numpy as np

from meanfield_mdp import (
    RngSpec,
    cov_W,
    exact_flow,
    field_V,
    field_W,
    remainder_R,
    replicate,
    semigroup_d,
    simulate,
    two_state_example,
)

model = two_state_example(horizon=3)
flow = exact_flow(model)
f = np.array([1.0, 0.0])
rng = RngSpec(7)

run = simulate(model, 2000, rng)
n = 3
linear = sum(field_V(run, p, semigroup_d(model, p, n, flow).apply(f)) for p in range(n + 1))
W, R = field_W(run, flow, n, f), remainder_R(run, flow, n, f)
print(f"W_3(f) = {W:+.6f}")
print(f"sum_p V_p(D_p,3 f) + R/sqrt(N) = {linear + R / np.sqrt(run.N):+.6f}   (R = {R:+.4f})")

batch = replicate(model, 1000, 4000, rng)
samples = batch.W(flow, n, f)
print(f"\nvariance of W_3(f) over {batch.R} runs: {samples.var(ddof=1):.4f}")
print(f"Gaussian limit                     : {cov_W(model, flow, n, f, f):.4f}")

# replications are keyed by (seed, replication, time): a sub-range is reproduced exactly
again = replicate(model, 1000, 100, rng, start=500)
print("\nreplications 500..599 reproduced exactly:",
      np.array_equal(again.W(flow, n, f), samples[500:600]))
