"""Exact nonlinear measure flows for finite-state Feynman-Kac models.

The one-step map is Phi_{n+1}(eta) = Psi_{G_n}(eta) M_{n+1}, realised by the
McKean transition K_{n+1,eta} = S_{eta,G_n} M_{n+1}.  Its linearisation
along the exact flow gives the signed first-order operators D_{p,n} that
carry early sampling noise forward in time.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ModelValidationError, PotentialOutOfRange, TimeOrder, TimeOutOfRange, ZeroMass
from .measures import (
    MarkovKernel,
    Observable,
    ProbabilityMeasure,
    SignedMeasure,
    StateSpace,
    dobrushin_coefficient,
    kernel_compose,
    oscillation_coefficient,
)

__all__ = [
    "FeynmanKacModel",
    "FlowTrajectory",
    "FirstOrderOperator",
    "FKConstants",
    "psi_transform",
    "phi_step",
    "phi_semigroup",
    "selection_kernel",
    "mckean_kernel",
    "exact_flow",
    "first_order_d",
    "semigroup_d",
    "fk_constants",
    "two_state_example",
    "load_model",
]

# potentials below this are rejected: g_n = max G / min G would blow up
MIN_POTENTIAL = 1e-12


@dataclass(frozen=True, eq=False)
class FeynmanKacModel:
    """Potentials G_0..G_horizon with values in (0, 1], mutations M_1..M_horizon
    and initial law eta_0."""

    horizon: int
    spaces: tuple
    potentials: tuple
    mutations: tuple
    initial: ProbabilityMeasure

    exact = True

    def __post_init__(self):
        horizon = int(self.horizon)
        if horizon < 0:
            raise ModelValidationError(f"horizon must be >= 0, got {self.horizon}")
        object.__setattr__(self, "horizon", horizon)
        spaces = tuple(s if isinstance(s, StateSpace) else StateSpace(int(s)) for s in self.spaces)
        if len(spaces) != horizon + 1:
            raise ModelValidationError(f"need {horizon + 1} state spaces, got {len(spaces)}")
        if len(self.potentials) != horizon + 1:
            raise ModelValidationError(f"need {horizon + 1} potentials, got {len(self.potentials)}")
        if len(self.mutations) != horizon:
            raise ModelValidationError(f"need {horizon} mutation kernels, got {len(self.mutations)}")

        potentials = []
        for n, G in enumerate(self.potentials):
            values = G.values if isinstance(G, Observable) else np.asarray(G, dtype=float)
            if values.shape != (spaces[n].size,):
                raise ModelValidationError(
                    f"potential has {values.size} values for a space of size {spaces[n].size}", time=n
                )
            if not np.all(np.isfinite(values)) or np.any(values > 1.0) or np.any(values <= 0.0):
                raise PotentialOutOfRange(n, f"potential values must lie in (0, 1], got {values.tolist()}")
            if values.min() < MIN_POTENTIAL:
                raise PotentialOutOfRange(n, f"degenerate potential (min {values.min():.3g} < {MIN_POTENTIAL})")
            potentials.append(Observable(spaces[n], values))

        mutations = []
        for k, M in enumerate(self.mutations):
            n = k + 1
            try:
                kernel = M if isinstance(M, MarkovKernel) else MarkovKernel.from_array(M)
            except ValueError as exc:
                raise ModelValidationError(f"mutation kernel: {exc}", time=n) from exc
            if kernel.source.size != spaces[n - 1].size or kernel.target.size != spaces[n].size:
                raise ModelValidationError(
                    f"mutation kernel shape {kernel.rows.shape} does not chain "
                    f"space {n - 1} (size {spaces[n - 1].size}) to space {n} (size {spaces[n].size})",
                    time=n,
                )
            mutations.append(MarkovKernel(spaces[n - 1], spaces[n], kernel.rows))

        initial = self.initial
        if not isinstance(initial, ProbabilityMeasure):
            try:
                initial = ProbabilityMeasure(spaces[0], np.asarray(initial, dtype=float))
            except ValueError as exc:
                raise ModelValidationError(f"initial law: {exc}", time=0) from exc
        if initial.space.size != spaces[0].size:
            raise ModelValidationError("initial law does not live on space 0", time=0)

        object.__setattr__(self, "spaces", spaces)
        object.__setattr__(self, "potentials", tuple(potentials))
        object.__setattr__(self, "mutations", tuple(mutations))
        object.__setattr__(self, "initial", ProbabilityMeasure(spaces[0], initial.weights))

    @classmethod
    def homogeneous(cls, potential, mutation, initial, horizon: int):
        G = np.asarray(potential, dtype=float)
        M = mutation.rows if isinstance(mutation, MarkovKernel) else np.asarray(mutation, dtype=float)
        d = G.size
        return cls(
            horizon=horizon,
            spaces=tuple(StateSpace(d) for _ in range(horizon + 1)),
            potentials=tuple(G for _ in range(horizon + 1)),
            mutations=tuple(M for _ in range(horizon)),
            initial=np.asarray(initial.weights if isinstance(initial, SignedMeasure) else initial, dtype=float),
        )

    def size(self, n: int) -> int:
        self._check_time(n)
        return self.spaces[n].size

    def G(self, n: int) -> np.ndarray:
        return self.potentials[n].values

    def M(self, n: int) -> np.ndarray:
        """Mutation matrix M_n from space n-1 into space n (n >= 1)."""
        if not 1 <= n <= self.horizon:
            raise TimeOutOfRange(f"no mutation kernel M_{n} (horizon {self.horizon})")
        return self.mutations[n - 1].rows

    def _check_time(self, n: int):
        if not 0 <= n <= self.horizon:
            raise TimeOutOfRange(f"time {n} outside 0..{self.horizon}")

    def truncated(self, horizon: int) -> "FeynmanKacModel":
        if horizon > self.horizon:
            raise TimeOutOfRange(f"cannot extend horizon {self.horizon} to {horizon}")
        return FeynmanKacModel(
            horizon, self.spaces[: horizon + 1], self.potentials[: horizon + 1],
            self.mutations[:horizon], self.initial,
        )

    def to_json(self) -> dict:
        return {
            "horizon": self.horizon,
            "spaces": [s.size for s in self.spaces],
            "potentials": [G.values.tolist() for G in self.potentials],
            "mutations": [M.rows.tolist() for M in self.mutations],
            "initial": self.initial.weights.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FeynmanKacModel":
        for key in ("horizon", "spaces", "potentials", "mutations", "initial"):
            if key not in doc:
                raise ModelValidationError(f"model document is missing {key!r}")
        spaces = []
        for n, s in enumerate(doc["spaces"]):
            if isinstance(s, dict):
                spaces.append(StateSpace(int(s["size"]), s.get("labels")))
            else:
                spaces.append(StateSpace(int(s)))
        return cls(
            horizon=int(doc["horizon"]),
            spaces=tuple(spaces),
            potentials=tuple(np.asarray(G, dtype=float) for G in doc["potentials"]),
            mutations=tuple(np.asarray(M, dtype=float) for M in doc["mutations"]),
            initial=np.asarray(doc["initial"], dtype=float),
        )


def load_model(path) -> FeynmanKacModel:
    with open(Path(path)) as fh:
        return FeynmanKacModel.from_json(json.load(fh))


def two_state_example(horizon: int = 10, potential=(0.5, 1.0), mutation=((0.7, 0.3), (0.4, 0.6)),
                      initial=(0.5, 0.5)) -> FeynmanKacModel:
    """The running two-point model; (0.5, 0.5) is a fixed point of its flow."""
    return FeynmanKacModel.homogeneous(potential, np.asarray(mutation), initial, horizon)


def _as_weights(eta) -> np.ndarray:
    return eta.weights if isinstance(eta, SignedMeasure) else np.asarray(eta, dtype=float)


def _as_values(f) -> np.ndarray:
    return f.values if isinstance(f, Observable) else np.asarray(f, dtype=float)


def psi_transform(G, eta) -> ProbabilityMeasure:
    """Boltzmann-Gibbs reweighting Psi_G(eta)(dx) = G(x) eta(dx) / eta(G)."""
    g = _as_values(G)
    w = _as_weights(eta)
    mass = float(w @ g)
    if not mass > 0.0:
        raise ZeroMass("eta(G) = 0")
    return ProbabilityMeasure(StateSpace(w.size), g * w / mass)


def phi_step(model: FeynmanKacModel, n: int, eta) -> ProbabilityMeasure:
    """Phi_{n+1}(eta) = Psi_{G_n}(eta) M_{n+1}, for eta on space n."""
    if not 0 <= n < model.horizon:
        raise TimeOutOfRange(f"phi_step needs 0 <= n < horizon={model.horizon}, got {n}")
    psi = psi_transform(model.G(n), eta)
    return ProbabilityMeasure(model.spaces[n + 1], psi.weights @ model.M(n + 1))


def phi_semigroup(model: FeynmanKacModel, p: int, n: int, mu) -> ProbabilityMeasure:
    """Phi_{p,n}(mu) = Phi_n o ... o Phi_{p+1}(mu); the identity when p == n."""
    if p > n:
        raise TimeOrder(f"Phi_{{p,n}} needs p <= n, got p={p}, n={n}")
    model._check_time(n)
    out = ProbabilityMeasure(model.spaces[p], _as_weights(mu))
    for q in range(p, n):
        out = phi_step(model, q, out)
    return out


def selection_kernel(G, eta) -> MarkovKernel:
    """S_{eta,G}(x, .) = G(x) delta_x + (1 - G(x)) Psi_G(eta)."""
    g = _as_values(G)
    if np.any(g <= 0.0) or np.any(g > 1.0):
        raise PotentialOutOfRange(None, f"selection needs G in (0, 1], got {g.tolist()}")
    psi = psi_transform(g, eta).weights
    rows = np.diag(g) + (1.0 - g)[:, None] * psi[None, :]
    return MarkovKernel.from_array(rows)


def mckean_kernel(model: FeynmanKacModel, n: int, eta) -> MarkovKernel:
    """K_{n+1,eta} = S_{eta,G_n} M_{n+1}; satisfies eta K = Phi_{n+1}(eta)."""
    if not 0 <= n < model.horizon:
        raise TimeOutOfRange(f"mckean_kernel needs 0 <= n < horizon={model.horizon}, got {n}")
    S = selection_kernel(model.G(n), eta)
    return kernel_compose(S, model.mutations[n])


@dataclass(frozen=True, eq=False)
class FlowTrajectory:
    model: FeynmanKacModel
    measures: tuple

    def __getitem__(self, n) -> ProbabilityMeasure:
        return self.measures[n]

    def __len__(self):
        return len(self.measures)

    @property
    def last(self) -> int:
        return len(self.measures) - 1

    def weights(self, n: int) -> np.ndarray:
        return self.measures[n].weights

    def phi(self, p: int, n: int, mu) -> ProbabilityMeasure:
        return phi_semigroup(self.model, p, n, mu)

    def to_json(self) -> dict:
        return {"measures": [m.weights.tolist() for m in self.measures]}


def exact_flow(model: FeynmanKacModel, n: Optional[int] = None) -> FlowTrajectory:
    n = model.horizon if n is None else n
    model._check_time(n)
    measures = [model.initial]
    for q in range(n):
        measures.append(phi_step(model, q, measures[-1]))
    return FlowTrajectory(model, tuple(measures))


@dataclass(frozen=True, eq=False)
class FirstOrderOperator:
    """Signed matrix from functions on space n to functions on space p.

    ``matrix[x, y]`` is the weight of f(y) in (D f)(x); rows sum to zero.
    """

    p: int
    n: int
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def apply(self, f) -> np.ndarray:
        return self.matrix @ _as_values(f)

    def apply_measure(self, mu) -> np.ndarray:
        return _as_weights(mu) @ self.matrix

    def beta(self) -> float:
        return oscillation_coefficient(self.matrix)

    def __matmul__(self, other: "FirstOrderOperator") -> "FirstOrderOperator":
        if self.n != other.p:
            raise TimeOrder(f"cannot chain D_{{{self.p},{self.n}}} with D_{{{other.p},{other.n}}}")
        return FirstOrderOperator(self.p, other.n, self.matrix @ other.matrix)


def first_order_d(model: FeynmanKacModel, n: int, eta) -> FirstOrderOperator:
    """D_eta Phi_{n+1}: f -> (G_n / eta(G_n)) (M_{n+1} f - Phi_{n+1}(eta)(f))."""
    w = _as_weights(eta)
    G = model.G(n)
    mass = float(w @ G)
    if not mass > 0.0:
        raise ZeroMass("eta(G) = 0")
    phi = phi_step(model, n, w).weights
    M = model.M(n + 1)
    matrix = (G / mass)[:, None] * (M - phi[None, :])
    return FirstOrderOperator(n, n + 1, matrix)


def semigroup_d(model: FeynmanKacModel, p: int, n: int, flow: FlowTrajectory) -> FirstOrderOperator:
    """D_{p,n} = D_{p+1} D_{p+2} ... D_n with D_q = D_{eta_{q-1}} Phi_q along the flow."""
    if p > n:
        raise TimeOrder(f"D_{{p,n}} needs p <= n, got p={p}, n={n}")
    model._check_time(n)
    if flow.last < n - 1:
        raise TimeOutOfRange(f"flow stops at time {flow.last}, need eta up to time {n - 1}")
    out = np.eye(model.size(p))
    for q in range(p, n):
        out = out @ first_order_d(model, q, flow.weights(q)).matrix
    return FirstOrderOperator(p, n, out)


@dataclass(frozen=True)
class FKConstants:
    """Per-time constants; ``r_bound`` is a conservative engineering bound
    on the remainder constant r(n), not a sharp value."""

    g: tuple
    r_raw: tuple
    r_bound: tuple
    conservative: bool = True

    def to_json(self) -> dict:
        return {
            "g": list(self.g),
            "r_raw": list(self.r_raw),
            "r_bound": list(self.r_bound),
            "conservative": self.conservative,
        }


def fk_constants(model: FeynmanKacModel, flow: Optional[FlowTrajectory] = None) -> FKConstants:
    """g_n = max G_n / min G_n and an upper bound for the remainder constant.

    r(n) <= sum_{p<n} beta(D_{p+1,n}) (sum_{q<=p} dT(q,p))^2 dR(p+1) with
    dT(q,p) <- prod_{q<=k<p} g_k * beta(M_{q+1}...M_p) and dR(p+1) <- g_p^2.
    ``r_bound`` is the running maximum of these raw values, so it is
    nondecreasing in n.
    """
    flow = exact_flow(model) if flow is None else flow
    g = [float(G.values.max() / G.values.min()) for G in model.potentials]

    def delta_T(q, p):
        if q == p:
            return 1.0
        composed = model.mutations[q]
        for k in range(q + 1, p):
            composed = kernel_compose(composed, model.mutations[k])
        return float(np.prod(g[q:p])) * dobrushin_coefficient(composed)

    r_raw = []
    for n in range(model.horizon + 1):
        total = 0.0
        for p in range(n):
            beta_d = semigroup_d(model, p + 1, n, flow).beta()
            spread = sum(delta_T(q, p) for q in range(p + 1))
            total += beta_d * spread**2 * g[p] ** 2
        r_raw.append(total)
    r_bound = list(np.maximum.accumulate(r_raw)) if r_raw else []
    return FKConstants(tuple(g), tuple(r_raw), tuple(float(r) for r in r_bound))


# -- batched helpers over many empirical measures (rows of a 2-d array) --------

def psi_batch(G: np.ndarray, etas: np.ndarray) -> np.ndarray:
    weighted = etas * G[None, :]
    return weighted / weighted.sum(axis=1, keepdims=True)


def phi_batch(model: FeynmanKacModel, n: int, etas: np.ndarray) -> np.ndarray:
    """Rows Phi_{n+1}(eta_r) for each row eta_r of ``etas``."""
    return psi_batch(model.G(n), etas) @ model.M(n + 1)


def mckean_apply_batch(model: FeynmanKacModel, n: int, etas: np.ndarray, f: np.ndarray) -> np.ndarray:
    """(K_{n+1,eta_r} f)(x) for every row r and source point x, shape (R, d_n)."""
    G = model.G(n)
    Mf = model.M(n + 1) @ f
    psi_Mf = psi_batch(G, etas) @ Mf
    return G[None, :] * Mf[None, :] + (1.0 - G)[None, :] * psi_Mf[:, None]
