"""Exact flow of the two-state running model.

The model has eta_0 = (0.5, 0.5), potential G = (0.5, 1.0) and mutation
M = [[0.7, 0.3], [0.4, 0.6]]. Selection pushes mass to state 1 and the
mutation pushes it back, and the two effects cancel: (0.5, 0.5) is a fixed
point. The script prints the flow, the McKean kernel at that point, the
first-order operators and the stability constants.
"""
import numpy as np

from meanfield_mdp import exact_flow, fk_constants, mckean_kernel, semigroup_d, two_state_example

model = two_state_example(horizon=10)
flow = exact_flow(model)

print("eta_n for n = 0..10")
for n in range(model.horizon + 1):
    print(f"  {n:2d}  {flow.weights(n)}")

# the McKean kernel keeps a particle in state 1 with probability one before
# mutating; a particle in state 0 is resampled with probability 1/2
K = mckean_kernel(model, 0, flow[0])
print("\nMcKean kernel at eta_0:\n", K.rows)
print("eta_0 K =", flow.weights(0) @ K.rows)

# D_{p,n} annihilates constants and its rows integrate to zero under eta_p
for n in (1, 3, 10):
    D = semigroup_d(model, 0, n, flow)
    print(f"\nD_(0,{n}) =\n{D.matrix}\n  eta_0 D = {flow.weights(0) @ D.matrix}, beta = {D.beta():.4f}")

c = fk_constants(model, flow)
print("\ng_n     :", np.round(c.g, 4))
print("r bound :", np.round(c.r_bound, 3))
