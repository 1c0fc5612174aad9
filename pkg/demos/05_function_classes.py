"""Covering numbers, entropy integrals and the sup of W over a class.

A random class of observables on four points is covered in L2(mu) at
several radii, greedy against exact. The entropy integral is then compared
with the Orlicz norm of the sup of the global field over the class.
"""
import numpy as np

from meanfield_mdp import (
    FeynmanKacModel,
    FunctionClass,
    RngSpec,
    covering_number,
    entropy_integral,
    exact_flow,
    random_kernel,
    random_probability,
    replicate,
)
from meanfield_mdp.empirical import orlicz_entropy_ratio

gen = np.random.default_rng(3)
F = FunctionClass.random(gen, 4, 6)
mu = np.full(4, 0.25)
for eps in (0.1, 0.25, 0.5, 1.0):
    print(f"eps={eps:4}: greedy {covering_number(F, mu, eps)}  exact {covering_number(F, mu, eps, 'exact')}")

ent = entropy_integral(F, 0.02)
print(f"\nentropy integral {ent.value:.4f} (+/- {ent.error_bound:.4f})")

model = FeynmanKacModel.homogeneous(gen.uniform(0.3, 1.0, 4), random_kernel(gen, 4), random_probability(gen, 4), 2)
flow = exact_flow(model)
batch = replicate(model, 500, 2000, RngSpec(5))
print(orlicz_entropy_ratio(batch, flow, 2, [F, FunctionClass.indicators(4)]).to_text())
