import numpy as np

from meanfield_mdp import FeynmanKacModel, random_kernel, random_probability


def random_model(rng, horizon=3, max_d=5, min_potential=0.05, min_d=1):
    d = [int(rng.integers(min_d, max_d + 1)) for _ in range(horizon + 1)]
    return FeynmanKacModel(
        horizon,
        tuple(d),
        tuple(rng.uniform(min_potential, 1.0, size=k) for k in d),
        tuple(random_kernel(rng, d[i], d[i + 1]).rows for i in range(horizon)),
        random_probability(rng, d[0]).weights,
    )


def random_mean_zero(rng, d):
    mu = rng.normal(size=d)
    return mu - mu.mean()
