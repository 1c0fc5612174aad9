"""Rate functions of the Gaussian limits.

For a zero-mass direction mu the rate I_n(mu) has a closed spectral form;
it is checked here against a direct maximisation of the variational
problem. The iid case (no selection, constant kernel) reduces to half the
chi-square distance, and the global rate J_n of W is a Legendre transform
of the covariance form.
"""
import numpy as np

from meanfield_mdp import (
    FeynmanKacModel,
    exact_flow,
    rate_I_measure,
    rate_J,
    rate_variational_numeric,
    two_state_example,
)

model = two_state_example(horizon=3)
flow = exact_flow(model)

print("time-0 rate at mu = (0.1, -0.1):", rate_I_measure(model, flow, 0, [0.1, -0.1]).value)
for n in (1, 2, 3):
    mu = [0.1, -0.1]
    a = rate_I_measure(model, flow, n, mu)
    b = rate_variational_numeric(model, flow, n, mu)
    print(f"n={n}: spectral {a.value:.10f} ({a.meta['terms']} terms)   variational {b.value:.10f}")

# directions with non-zero mass are never reached by a centred field
print("non-zero mass:", rate_I_measure(model, flow, 1, [0.1, 0.0]).to_json())

# a permutation mutation without selection has a harmonic direction
swap = FeynmanKacModel.homogeneous([1.0, 1.0], np.array([[0.0, 1.0], [1.0, 0.0]]), [0.5, 0.5], 1)
print("harmonic pairing:", rate_I_measure(swap, exact_flow(swap), 1, [0.1, -0.1]).to_json())

for n in (1, 3):
    print(f"J_{n}(0.1, -0.1) = {rate_J(model, flow, n, [0.1, -0.1]).value:.6f}"
          f"   I_{n} = {rate_I_measure(model, flow, n, [0.1, -0.1]).value:.6f}")
