"""Finite-state measures, observables and Markov kernels.

Everything here is immutable: arrays are copied on construction and flagged
read-only, so values can be shared freely between threads and processes.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import (
    DomainTooLarge,
    InvalidMeasure,
    SpaceMismatch,
    UnreachableTargetPoint,
)

__all__ = [
    "StateSpace",
    "SignedMeasure",
    "ProbabilityMeasure",
    "Observable",
    "MarkovKernel",
    "oscillation",
    "oscillation_coefficient",
    "dobrushin_coefficient",
    "adjoint_kernel",
    "b_constant",
    "kernel_apply_fn",
    "kernel_apply_measure",
    "kernel_compose",
    "total_variation",
]

# probability vectors are renormalised inside this band and rejected outside
NORMALIZE_TOL = 1e-9
# sums this close to one are accepted as they stand
ROUNDING_TOL = 1e-14
# negative weights down to this level are treated as rounding noise
NEGATIVE_TOL = 1e-12


def _frozen(values, ndim) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    if arr.ndim != ndim:
        raise InvalidMeasure(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidMeasure("non-finite entries")
    arr.setflags(write=False)
    return arr


def _normalized(weights: np.ndarray, what: str) -> np.ndarray:
    w = np.array(weights, dtype=float)
    if np.any(w < -NEGATIVE_TOL):
        raise InvalidMeasure(f"{what}: negative weight {w.min():.3g}")
    w = np.clip(w, 0.0, None)
    total = w.sum()
    if abs(total - 1.0) > NORMALIZE_TOL:
        raise InvalidMeasure(f"{what}: weights sum to {total!r}, not 1")
    # leave already-normalised vectors alone so JSON round trips are bit-exact
    if abs(total - 1.0) <= ROUNDING_TOL:
        return w
    return w / total


@dataclass(frozen=True)
class StateSpace:
    size: int
    labels: Optional[tuple] = None

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 1:
            raise ValueError(f"state space size must be a positive integer, got {self.size!r}")
        object.__setattr__(self, "size", int(self.size))
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != self.size:
                raise ValueError("one label per point required")
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.size

    def compatible(self, other: "StateSpace") -> bool:
        return self.size == other.size


def _space(space) -> StateSpace:
    return space if isinstance(space, StateSpace) else StateSpace(int(space))


@dataclass(frozen=True, eq=False)
class SignedMeasure:
    space: StateSpace
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "space", _space(self.space))
        object.__setattr__(self, "weights", _frozen(self.weights, 1))
        if self.weights.size != self.space.size:
            raise SpaceMismatch(f"{self.weights.size} weights for a space of size {self.space.size}")

    @classmethod
    def from_array(cls, weights):
        weights = np.asarray(weights, dtype=float)
        return cls(StateSpace(weights.size), weights)

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def integrate(self, f) -> float:
        """mu(f) for an Observable or a plain array of values."""
        values = f.values if isinstance(f, Observable) else np.asarray(f, dtype=float)
        if values.shape != self.weights.shape:
            raise SpaceMismatch("observable and measure live on different spaces")
        return float(self.weights @ values)

    def __add__(self, other):
        _check_same(self.space, other.space)
        return SignedMeasure(self.space, self.weights + other.weights)

    def __sub__(self, other):
        _check_same(self.space, other.space)
        return SignedMeasure(self.space, self.weights - other.weights)

    def __mul__(self, scalar):
        return SignedMeasure(self.space, float(scalar) * self.weights)

    __rmul__ = __mul__

    def to_json(self) -> dict:
        return {"space": self.space.size, "weights": self.weights.tolist()}

    @classmethod
    def from_json(cls, doc: dict):
        return cls(StateSpace(int(doc["space"])), doc["weights"])

    def __repr__(self):
        return f"{type(self).__name__}({self.weights.tolist()})"


class ProbabilityMeasure(SignedMeasure):
    """Nonnegative weights summing to one (renormalised on construction)."""

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "weights", _frozen(_normalized(self.weights, "probability"), 1))

    @classmethod
    def uniform(cls, size: int):
        return cls(StateSpace(size), np.full(size, 1.0 / size))

    @classmethod
    def dirac(cls, size: int, point: int):
        w = np.zeros(size)
        w[point] = 1.0
        return cls(StateSpace(size), w)

    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0.0)


@dataclass(frozen=True, eq=False)
class Observable:
    space: StateSpace
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "space", _space(self.space))
        object.__setattr__(self, "values", _frozen(self.values, 1))
        if self.values.size != self.space.size:
            raise SpaceMismatch(f"{self.values.size} values for a space of size {self.space.size}")

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=float)
        return cls(StateSpace(values.size), values)

    @classmethod
    def constant(cls, size: int, c: float = 1.0):
        return cls(StateSpace(size), np.full(size, float(c)))

    @classmethod
    def indicator(cls, size: int, points):
        v = np.zeros(size)
        v[np.atleast_1d(points)] = 1.0
        return cls(StateSpace(size), v)

    @property
    def sup_norm(self) -> float:
        return float(np.abs(self.values).max())

    def in_osc1(self, tol: float = 1e-12) -> bool:
        return oscillation(self) <= 1.0 + tol

    def to_json(self) -> dict:
        return {"space": self.space.size, "values": self.values.tolist()}

    @classmethod
    def from_json(cls, doc: dict):
        return cls(StateSpace(int(doc["space"])), doc["values"])

    def __repr__(self):
        return f"Observable({self.values.tolist()})"


@dataclass(frozen=True, eq=False)
class MarkovKernel:
    """Row-stochastic matrix from ``source`` to ``target``."""

    source: StateSpace
    target: StateSpace
    rows: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float)
        if rows.ndim != 2:
            raise InvalidMeasure(f"kernel rows must form a matrix, got shape {rows.shape}")
        object.__setattr__(self, "source", _space(self.source))
        object.__setattr__(self, "target", _space(self.target))
        if rows.shape != (self.source.size, self.target.size):
            raise SpaceMismatch(
                f"kernel shape {rows.shape} does not match spaces "
                f"({self.source.size}, {self.target.size})"
            )
        normed = np.empty_like(rows)
        for x, row in enumerate(rows):
            normed[x] = _normalized(row, f"kernel row {x}")
        object.__setattr__(self, "rows", _frozen(normed, 2))

    @classmethod
    def from_array(cls, rows):
        rows = np.asarray(rows, dtype=float)
        return cls(StateSpace(rows.shape[0]), StateSpace(rows.shape[1]), rows)

    @classmethod
    def identity(cls, size: int):
        return cls.from_array(np.eye(size))

    @classmethod
    def constant_rows(cls, nu: ProbabilityMeasure, source_size: int):
        return cls(StateSpace(source_size), nu.space, np.tile(nu.weights, (source_size, 1)))

    def row(self, x: int) -> ProbabilityMeasure:
        return ProbabilityMeasure(self.target, self.rows[x])

    def to_json(self) -> dict:
        return {"rows": self.rows.tolist()}

    @classmethod
    def from_json(cls, doc: dict):
        return cls.from_array(doc["rows"])

    def __repr__(self):
        return f"MarkovKernel({self.rows.tolist()})"


def _check_same(a: StateSpace, b: StateSpace):
    if not a.compatible(b):
        raise SpaceMismatch(f"space of size {a.size} vs space of size {b.size}")


def _values(f) -> np.ndarray:
    return f.values if isinstance(f, Observable) else np.asarray(f, dtype=float)


def _weights(mu) -> np.ndarray:
    return mu.weights if isinstance(mu, SignedMeasure) else np.asarray(mu, dtype=float)


def _matrix(M) -> np.ndarray:
    return M.rows if isinstance(M, MarkovKernel) else np.asarray(M, dtype=float)


def oscillation(f) -> float:
    v = _values(f)
    return float(v.max() - v.min())


def total_variation(mu, nu) -> float:
    """Half the L1 distance between two weight vectors."""
    return 0.5 * float(np.abs(_weights(mu) - _weights(nu)).sum())


def oscillation_coefficient(matrix) -> float:
    """sup{osc(A f) : osc(f) <= 1} for a matrix with constant row sums.

    For constant-mass operators this is the largest half-L1 distance
    between two rows, so it applies to Markov kernels and to the signed
    first-order operators alike.
    """
    A = _matrix(matrix)
    if A.shape[0] < 2:
        return 0.0
    diffs = np.abs(A[:, None, :] - A[None, :, :]).sum(axis=-1)
    return 0.5 * float(diffs.max())


def dobrushin_coefficient(M: MarkovKernel) -> float:
    return min(1.0, oscillation_coefficient(M))


def adjoint_kernel(M: MarkovKernel, mu: ProbabilityMeasure) -> MarkovKernel:
    """Bayes reversal of ``M`` under ``mu``: row y is the law of x given y
    under mu(dx) M(x, dy)."""
    _check_same(M.source, mu.space)
    joint = mu.weights[:, None] * M.rows
    pushed = joint.sum(axis=0)
    unreachable = np.flatnonzero(pushed <= 0.0)
    if unreachable.size:
        raise UnreachableTargetPoint(unreachable.tolist())
    return MarkovKernel(M.target, M.source, (joint / pushed).T)


def b_constant(m: int) -> float:
    """The moment constants b(m); b(2k)^(2k) = E Z^(2k) for standard Gaussian Z."""
    if int(m) != m or m < 1:
        raise ValueError(f"b(m) needs a positive integer, got {m!r}")
    m = int(m)
    if m > 170:
        warnings.warn(
            f"b({m}) is past the double-precision factorial range; "
            "returned from log-gamma with ~1e-13 relative accuracy",
            DomainTooLarge,
            stacklevel=2,
        )
    k, odd = divmod(m, 2)
    if not odd:
        log_power = gammaln(2 * k + 1) - gammaln(k + 1) - k * math.log(2.0)
    else:
        log_power = (
            gammaln(2 * k + 2)
            - gammaln(k + 2)
            - 0.5 * math.log(k + 0.5)
            - (k + 0.5) * math.log(2.0)
        )
    return math.exp(log_power / m)


def kernel_apply_fn(M: MarkovKernel, f) -> Observable:
    v = _values(f)
    if v.size != M.target.size:
        raise SpaceMismatch("observable does not live on the kernel target")
    return Observable(M.source, M.rows @ v)


def kernel_apply_measure(mu, M: MarkovKernel) -> SignedMeasure:
    w = _weights(mu)
    if w.size != M.source.size:
        raise SpaceMismatch("measure does not live on the kernel source")
    out = w @ M.rows
    if isinstance(mu, ProbabilityMeasure):
        return ProbabilityMeasure(M.target, out)
    return SignedMeasure(M.target, out)


def kernel_compose(M1: MarkovKernel, M2: MarkovKernel) -> MarkovKernel:
    if not M1.target.compatible(M2.source):
        raise SpaceMismatch("kernels do not chain")
    return MarkovKernel(M1.source, M2.target, M1.rows @ M2.rows)


def random_kernel(rng: np.random.Generator, d_source: int, d_target: Optional[int] = None,
                  concentration: float = 1.0) -> MarkovKernel:
    """Dirichlet rows; handy for property tests and demos."""
    d_target = d_source if d_target is None else d_target
    rows = rng.dirichlet(np.full(d_target, concentration), size=d_source)
    return MarkovKernel(StateSpace(d_source), StateSpace(d_target), rows)


def random_probability(rng: np.random.Generator, d: int, concentration: float = 1.0) -> ProbabilityMeasure:
    return ProbabilityMeasure(StateSpace(d), rng.dirichlet(np.full(d, concentration)))
