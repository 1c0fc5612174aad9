"""N-particle mean-field simulation and the random fields it generates.

For a finite-state model every field value is a deterministic function of
the empirical measures eta^N_0, ..., eta^N_n, so a replication batch keeps
only the occupation counts and evaluates V^N, W^N, the remainder and the
martingale bracket afterwards by exact arithmetic.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateBatch, ExactFlowUnavailable, TimeOutOfRange
from .flow import (
    FeynmanKacModel,
    FlowTrajectory,
    mckean_apply_batch,
    mckean_kernel,
    phi_batch,
    semigroup_d,
)
from .measures import Observable
from .streams import RngSpec, alias_sample, alias_table

__all__ = [
    "SamplingMcKean",
    "ParticleEnsemble",
    "SimulationRun",
    "ReplicationBatch",
    "Accumulator",
    "init_particles",
    "step",
    "simulate",
    "field_V",
    "field_W",
    "remainder_R",
    "martingale_bracket",
    "replicate",
    "replicate_experiment",
    "write_field_samples",
]


@dataclass(frozen=True, eq=False)
class SamplingMcKean:
    """A mean-field model known only through samplers.

    ``sample_initial(N, u)`` returns N iid draws from eta_0 and
    ``sample_step(n, states, u)`` moves every particle through
    K_{n+1, eta^N_n}; ``u`` holds two uniforms per particle.  The optional
    ``predictor(n, states, f)`` returns eta^N_{n-1} K_{n,eta^N_{n-1}}(f),
    which is all that V^N needs.
    """

    horizon: int
    sample_initial: Callable
    sample_step: Callable
    predictor: Optional[Callable] = None
    initial_mean: Optional[Callable] = None

    exact = False


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    time: int
    states: np.ndarray
    space_size: Optional[int] = None

    @property
    def N(self) -> int:
        return len(self.states)

    def counts(self) -> np.ndarray:
        if self.space_size is None:
            raise ExactFlowUnavailable("occupation counts need a finite state space")
        return np.bincount(self.states, minlength=self.space_size)

    def empirical(self) -> np.ndarray:
        return self.counts() / self.N


def init_particles(model, N: int, rng: RngSpec, replication: int = 0) -> ParticleEnsemble:
    """N iid draws from eta_0 (stream time index 0)."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    u = rng.uniforms(replication, 0, N)
    if not model.exact:
        return ParticleEnsemble(0, np.asarray(model.sample_initial(N, u)))
    accept, alias = alias_table(model.initial.weights[None, :])
    states = alias_sample(accept, alias, np.zeros(N, dtype=np.int64), u)
    return ParticleEnsemble(0, states, model.size(0))


def step(model, ensemble: ParticleEnsemble, rng: RngSpec, replication: int = 0) -> ParticleEnsemble:
    """Move every particle once through K_{n+1, eta^N_n}, the kernel frozen at
    the current empirical measure."""
    n = ensemble.time
    if n >= model.horizon:
        raise TimeOutOfRange(f"cannot step past the horizon {model.horizon}")
    u = rng.uniforms(replication, n + 1, ensemble.N)
    if not model.exact:
        return ParticleEnsemble(n + 1, np.asarray(model.sample_step(n, ensemble.states, u)))
    K = mckean_kernel(model, n, ensemble.empirical())
    accept, alias = alias_table(K.rows)
    states = alias_sample(accept, alias, ensemble.states, u)
    return ParticleEnsemble(n + 1, states, model.size(n + 1))


@dataclass(frozen=True, eq=False)
class SimulationRun:
    model: object
    ensembles: tuple
    rng: RngSpec
    replication: int = 0

    @property
    def N(self) -> int:
        return self.ensembles[0].N

    @property
    def last(self) -> int:
        return len(self.ensembles) - 1

    def empirical(self, n: int) -> np.ndarray:
        return self.ensembles[n].empirical()

    def counts(self) -> list:
        return [e.counts()[None, :] for e in self.ensembles]


def simulate(model, N: int, rng: RngSpec, replication: int = 0, horizon: Optional[int] = None) -> SimulationRun:
    horizon = model.horizon if horizon is None else horizon
    ensembles = [init_particles(model, N, rng, replication)]
    for _ in range(horizon):
        ensembles.append(step(model, ensembles[-1], rng, replication))
    return SimulationRun(model, tuple(ensembles), rng, replication)


# -- field values from empirical measures -------------------------------------
#
# ``etas`` is a list indexed by time of arrays of shape (R, d_n): one row per
# replication.  All functions return one value per replication.

def _values(f) -> np.ndarray:
    return f.values if isinstance(f, Observable) else np.asarray(f, dtype=float)


def _require_exact(model):
    if not getattr(model, "exact", False):
        raise ExactFlowUnavailable("this operation needs a finite-state model with an exact flow")


def _check_time(etas, n):
    if not 0 <= n < len(etas):
        raise TimeOutOfRange(f"time {n} not simulated (last time {len(etas) - 1})")


def predictor_values(model: FeynmanKacModel, etas, n: int, f) -> np.ndarray:
    """(eta^N_{n-1} K_{n,eta^N_{n-1}})(f) per replication; eta_0(f) at n = 0."""
    f = _values(f)
    if n == 0:
        return np.full(etas[0].shape[0], float(model.initial.weights @ f))
    return phi_batch(model, n - 1, etas[n - 1]) @ f


def v_values(model, etas, N: int, n: int, f) -> np.ndarray:
    _require_exact(model)
    _check_time(etas, n)
    f = _values(f)
    return math.sqrt(N) * (etas[n] @ f - predictor_values(model, etas, n, f))


def w_values(model, flow: FlowTrajectory, etas, N: int, n: int, f) -> np.ndarray:
    _require_exact(model)
    _check_time(etas, n)
    f = _values(f)
    return math.sqrt(N) * (etas[n] @ f - float(flow.weights(n) @ f))


def r_values(model, flow: FlowTrajectory, etas, N: int, n: int, f) -> np.ndarray:
    """sqrt(N) [W^N_n(f) - sum_p V^N_p(D_{p,n} f)]."""
    f = _values(f)
    first_order = np.zeros(etas[0].shape[0])
    for p in range(n + 1):
        Df = semigroup_d(model, p, n, flow).apply(f)
        first_order += v_values(model, etas, N, p, Df)
    return math.sqrt(N) * (w_values(model, flow, etas, N, n, f) - first_order)


def bracket_increment(model, etas_prev, n: int, f) -> np.ndarray:
    """eta K_{n,eta}[(f - K_{n,eta} f)^2] for each row eta of ``etas_prev`` (n >= 1)."""
    f = _values(f)
    Kf = mckean_apply_batch(model, n - 1, etas_prev, f)
    Kf2 = mckean_apply_batch(model, n - 1, etas_prev, f**2)
    return np.einsum("rx,rx->r", etas_prev, Kf2 - Kf**2)


def bracket_values(model, etas, f_sequence, n: int) -> np.ndarray:
    """<M^(N)(f)>_n; the time-0 term is eta_0([f_0 - eta_0(f_0)]^2)."""
    _require_exact(model)
    _check_time(etas, n)
    f0 = _values(f_sequence[0])
    eta0 = model.initial.weights
    total = np.full(etas[0].shape[0], float(eta0 @ (f0 - eta0 @ f0) ** 2))
    for p in range(1, n + 1):
        total = total + bracket_increment(model, etas[p - 1], p, f_sequence[p])
    return total


def _run_etas(run: SimulationRun):
    return [e.empirical()[None, :] for e in run.ensembles]


def field_V(run: SimulationRun, n: int, f) -> float:
    """sqrt(N) (eta^N_n - eta^N_{n-1} K_{n,eta^N_{n-1}})(f)."""
    if not 0 <= n <= run.last:
        raise TimeOutOfRange(f"time {n} not simulated (last time {run.last})")
    model = run.model
    if not model.exact:
        if model.predictor is None:
            raise ExactFlowUnavailable("sampling-only model without a predictor")
        states = run.ensembles[n].states
        current = float(np.mean(f(states)))
        if n == 0:
            if model.initial_mean is None:
                raise ExactFlowUnavailable("sampling-only model without eta_0(f)")
            pred = model.initial_mean(f)
        else:
            pred = model.predictor(n, run.ensembles[n - 1].states, f)
        return math.sqrt(run.N) * (current - pred)
    return float(v_values(model, _run_etas(run), run.N, n, f)[0])


def field_W(run: SimulationRun, flow: FlowTrajectory, n: int, f) -> float:
    _require_exact(run.model)
    if not 0 <= n <= run.last:
        raise TimeOutOfRange(f"time {n} not simulated (last time {run.last})")
    return float(w_values(run.model, flow, _run_etas(run), run.N, n, f)[0])


def remainder_R(run: SimulationRun, flow: FlowTrajectory, n: int, f) -> float:
    _require_exact(run.model)
    if not 0 <= n <= run.last:
        raise TimeOutOfRange(f"time {n} not simulated (last time {run.last})")
    if n == 0:
        return 0.0
    return float(r_values(run.model, flow, _run_etas(run), run.N, n, f)[0])


def martingale_bracket(run: SimulationRun, f_sequence, n: int) -> float:
    return float(bracket_values(run.model, _run_etas(run), f_sequence, n)[0])


# -- replication ---------------------------------------------------------------

class Accumulator:
    """Streaming mean and variance (Welford) with optional raw storage."""

    def __init__(self, keep_raw: bool = True):
        self.count = 0
        self.mean = 0.0
        self._m2 = 0.0
        self.keep_raw = keep_raw
        self._raw = []

    def push(self, x: float):
        x = float(x)
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (x - self.mean)
        if self.keep_raw:
            self._raw.append(x)

    def extend(self, xs):
        for x in np.ravel(xs):
            self.push(x)
        return self

    @property
    def variance(self) -> float:
        """Unbiased sample variance."""
        return self._m2 / (self.count - 1) if self.count > 1 else float("nan")

    @property
    def stderr(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count > 1 else float("nan")

    @property
    def raw(self) -> np.ndarray:
        if not self.keep_raw:
            raise ValueError("raw samples were not kept")
        return np.asarray(self._raw)

    def quantiles(self, qs) -> np.ndarray:
        return np.quantile(self.raw, qs)

    def summary(self) -> dict:
        return {"count": self.count, "mean": self.mean, "variance": self.variance, "stderr": self.stderr}


def _simulate_counts(args):
    model, N, rng, replications, horizon = args
    out = [np.zeros((len(replications), model.size(t)), dtype=np.int64) for t in range(horizon + 1)]
    for i, r in enumerate(replications):
        run = simulate(model, N, rng, replication=r, horizon=horizon)
        for t, ens in enumerate(run.ensembles):
            out[t][i] = ens.counts()
    return out


def _chunks(indices, workers):
    size = max(1, math.ceil(len(indices) / workers))
    return [indices[i:i + size] for i in range(0, len(indices), size)]


@dataclass(frozen=True, eq=False)
class ReplicationBatch:
    """R independent runs at ensemble size N; counts[t] has shape (R, d_t)."""

    model: FeynmanKacModel
    N: int
    rng: RngSpec
    replications: np.ndarray
    counts: tuple

    @property
    def R(self) -> int:
        return len(self.replications)

    @property
    def horizon(self) -> int:
        return len(self.counts) - 1

    @property
    def etas(self) -> list:
        return [c / self.N for c in self.counts]

    def empirical(self, n: int) -> np.ndarray:
        return self.counts[n] / self.N

    def V(self, n: int, f) -> np.ndarray:
        return v_values(self.model, self.etas, self.N, n, f)

    def W(self, flow: FlowTrajectory, n: int, f) -> np.ndarray:
        return w_values(self.model, flow, self.etas, self.N, n, f)

    def remainder(self, flow: FlowTrajectory, n: int, f) -> np.ndarray:
        if n == 0:
            return np.zeros(self.R)
        return r_values(self.model, flow, self.etas, self.N, n, f)

    def field_rows(self, n: int, field: str = "W", flow: Optional[FlowTrajectory] = None) -> np.ndarray:
        """Signed measures, one row per replication, with F^N_n(f) = rows @ f.

        Every field is linear in f, so whole function classes are evaluated
        with one matrix product.
        """
        _check_time(self.counts, n)
        eta = self.empirical(n)
        if field == "W":
            if flow is None:
                raise ExactFlowUnavailable("W needs the exact flow")
            centre = flow.weights(n)[None, :]
        elif field == "V":
            centre = (self.model.initial.weights[None, :] if n == 0
                      else phi_batch(self.model, n - 1, self.empirical(n - 1)))
        else:
            raise ValueError(f"field must be 'V' or 'W', got {field!r}")
        return math.sqrt(self.N) * (eta - centre)

    def bracket(self, f_sequence, n: int) -> np.ndarray:
        return bracket_values(self.model, self.etas, f_sequence, n)

    def martingale(self, f_sequence, n: int) -> np.ndarray:
        """M^(N)_n(f) = sum_{p<=n} V^N_p(f_p)."""
        etas = self.etas
        return sum(v_values(self.model, etas, self.N, p, f_sequence[p]) for p in range(n + 1))

    @staticmethod
    def accumulate(values, keep_raw: bool = True) -> Accumulator:
        return Accumulator(keep_raw).extend(values)

    def subset(self, mask) -> "ReplicationBatch":
        return ReplicationBatch(self.model, self.N, self.rng, self.replications[mask],
                                tuple(c[mask] for c in self.counts))


def replicate(model: FeynmanKacModel, N: int, R: int, rng: RngSpec, *, horizon: Optional[int] = None,
              start: int = 0, workers: int = 1) -> ReplicationBatch:
    """Simulate replications start .. start+R-1; results never depend on ``workers``."""
    if R < 1:
        raise ValueError(f"R must be >= 1, got {R}")
    _require_exact(model)
    horizon = model.horizon if horizon is None else horizon
    indices = list(range(start, start + R))
    jobs = [(model, N, rng, chunk, horizon) for chunk in _chunks(indices, max(1, workers))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_simulate_counts, jobs))
    else:
        parts = [_simulate_counts(job) for job in jobs]
    counts = tuple(np.concatenate([part[t] for part in parts]) for t in range(horizon + 1))
    return ReplicationBatch(model, N, rng, np.asarray(indices), counts)


def _call_experiment(args):
    experiment, rng, replications = args
    return [experiment(r, rng) for r in replications]


def replicate_experiment(experiment: Callable, R: int, rng: RngSpec, *, start: int = 0, workers: int = 1,
                         keep_raw: bool = True):
    """Run ``experiment(replication, rng) -> float`` for R replications.

    Returns the per-replication values (ordered by replication index) and an
    Accumulator fed in that order.
    """
    if R < 1:
        raise ValueError(f"R must be >= 1, got {R}")
    indices = list(range(start, start + R))
    jobs = [(experiment, rng, chunk) for chunk in _chunks(indices, max(1, workers))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_call_experiment, jobs))
    else:
        parts = [_call_experiment(job) for job in jobs]
    values = np.asarray([v for part in parts for v in part], dtype=float)
    return values, Accumulator(keep_raw).extend(values)


def write_field_samples(path, batch: ReplicationBatch, flow: FlowTrajectory, observables: dict,
                        times: Optional[Sequence[int]] = None):
    """CSV with header replication,time,observable,V,W,R (17 significant digits)."""
    times = range(batch.horizon + 1) if times is None else times
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replication", "time", "observable", "V", "W", "R"])
        for n in times:
            for name, f in observables.items():
                V = batch.V(n, f)
                W = batch.W(flow, n, f)
                Rm = batch.remainder(flow, n, f)
                for r, v, w, rr in zip(batch.replications, V, W, Rm):
                    writer.writerow([int(r), n, name, f"{v:.17g}", f"{w:.17g}", f"{rr:.17g}"])


def read_field_samples(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["replication"] = int(row["replication"])
        row["time"] = int(row["time"])
        for key in ("V", "W", "R"):
            row[key] = float(row[key])
    return rows
