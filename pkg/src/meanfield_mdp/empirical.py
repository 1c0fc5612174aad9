"""Finite function classes: covering numbers, entropy integrals, difference
classes, sup-norms of the particle fields and Orlicz norms.

Distances are L2(mu) on a finite space.  Covers are internal: centres are
picked among the members (or among an explicit candidate list).
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, bisect, milp
from scipy.special import logsumexp

from .analysis import Report, SpeedSchedule, mc_number, wilson_interval
from .flow import FeynmanKacModel, FlowTrajectory, exact_flow
from .measures import Observable, ProbabilityMeasure, SignedMeasure, StateSpace
from .particles import ReplicationBatch, SimulationRun, replicate
from .streams import RngSpec

__all__ = [
    "FunctionClass",
    "DeltaClass",
    "EntropyIntegral",
    "covering_number",
    "uniform_covering_number",
    "default_measure_grid",
    "entropy_integral",
    "delta_class",
    "class_sup_norm",
    "orlicz_estimate",
    "equicontinuity_sweep",
    "orlicz_entropy_ratio",
    "chaining_diagnostic",
]

NORM_TOL = 1e-12
# closed balls: a point at distance eps (up to rounding) is covered
BALL_TOL = 1e-12
EXHAUSTIVE_LIMIT = 12

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True, eq=False)
class FunctionClass:
    """Finite class of functions with sup norm <= 1 containing 0 and 1."""

    space: StateSpace
    members: np.ndarray

    def __post_init__(self):
        space = self.space if isinstance(self.space, StateSpace) else StateSpace(int(self.space))
        rows = [m.values if isinstance(m, Observable) else np.asarray(m, dtype=float) for m in self.members]
        H = np.array(rows, dtype=float).reshape(len(rows), -1)
        if H.shape[1] != space.size:
            raise ValueError(f"members have {H.shape[1]} values for a space of size {space.size}")
        if np.any(np.abs(H) > 1.0 + NORM_TOL):
            raise ValueError(f"member with sup norm {np.abs(H).max():.6g} > 1")
        if not np.any(np.all(H == 0.0, axis=1)):
            raise ValueError("class must contain the zero function")
        if not np.any(np.all(H == 1.0, axis=1)):
            raise ValueError("class must contain the unit function")
        H.setflags(write=False)
        object.__setattr__(self, "space", space)
        object.__setattr__(self, "members", H)

    def __len__(self):
        return self.members.shape[0]

    @classmethod
    def indicators(cls, d: int) -> "FunctionClass":
        """Indicators of all 2^d subsets (includes 0 and 1)."""
        rows = np.array(list(itertools.product((0.0, 1.0), repeat=d)))
        return cls(StateSpace(d), rows)

    @classmethod
    def random(cls, rng: np.random.Generator, d: int, k: int) -> "FunctionClass":
        """0, 1 and k - 2 members uniform in [-1, 1]^d."""
        if k < 2:
            raise ValueError("a class needs at least the zero and unit functions")
        rows = np.vstack([np.zeros(d), np.ones(d), rng.uniform(-1.0, 1.0, size=(k - 2, d))])
        return cls(StateSpace(d), rows)

    def to_json(self) -> dict:
        return {"space": self.space.size, "members": self.members.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "FunctionClass":
        return cls(StateSpace(int(doc["space"])), np.asarray(doc["members"], dtype=float))

    @classmethod
    def load(cls, path) -> "FunctionClass":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True, eq=False)
class DeltaClass:
    """Differences f - g of parent members with eta((f - g)^2)^(1/2) <= delta."""

    parent: FunctionClass
    delta: float
    eta: np.ndarray
    pairs: tuple

    @property
    def members(self) -> np.ndarray:
        H = self.parent.members
        if not self.pairs:
            return np.zeros((0, H.shape[1]))
        i, j = np.array(self.pairs).T
        return H[i] - H[j]

    def __len__(self):
        return len(self.pairs)


def _members(C) -> np.ndarray:
    if isinstance(C, (FunctionClass, DeltaClass)):
        return C.members
    return np.atleast_2d(np.asarray(C, dtype=float))


def _weights(mu) -> np.ndarray:
    return mu.weights if isinstance(mu, SignedMeasure) else np.asarray(mu, dtype=float)


def l2_distances(A: np.ndarray, B: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """L2(mu) distances between the rows of A and the rows of B."""
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.einsum("ijx,x->ij", diff * diff, mu))


def _ball_matrix(points, centres, mu, eps) -> np.ndarray:
    """covers[c, i] is True when centre c covers point i."""
    return l2_distances(centres, points, mu) <= eps * (1.0 + BALL_TOL) + BALL_TOL


def _greedy_cover(covers: np.ndarray) -> int:
    uncovered = np.ones(covers.shape[1], dtype=bool)
    count = 0
    while uncovered.any():
        gain = (covers & uncovered).sum(axis=1)
        best = int(np.argmax(gain))
        if gain[best] == 0:
            raise ValueError("candidate centres cannot cover every member")
        uncovered &= ~covers[best]
        count += 1
    return count


def _exhaustive_cover(covers: np.ndarray) -> int:
    masks = [int("".join("1" if b else "0" for b in row[::-1]), 2) for row in covers]
    full = (1 << covers.shape[1]) - 1
    for size in range(1, len(masks) + 1):
        for combo in itertools.combinations(masks, size):
            acc = 0
            for m in combo:
                acc |= m
            if acc == full:
                return size
    raise ValueError("candidate centres cannot cover every member")


def _milp_cover(covers: np.ndarray) -> int:
    c = np.ones(covers.shape[0])
    res = milp(c, constraints=LinearConstraint(covers.T.astype(float), lb=1.0),
               integrality=np.ones_like(c), bounds=Bounds(0, 1))
    if not res.success:
        raise ValueError(f"set-cover solve failed: {res.message}")
    return int(round(res.fun))


def _cover_size(covers: np.ndarray, method: str) -> int:
    if covers.shape[1] == 0:
        return 0
    if method == "auto":
        method = "exhaustive" if covers.shape[0] <= EXHAUSTIVE_LIMIT else "exact"
    if method == "greedy":
        return _greedy_cover(covers)
    if method == "exhaustive":
        if covers.shape[0] > EXHAUSTIVE_LIMIT:
            raise ValueError(f"exhaustive search limited to {EXHAUSTIVE_LIMIT} candidate centres")
        return _exhaustive_cover(covers)
    if method == "exact":
        return _milp_cover(covers)
    raise ValueError(f"unknown covering method {method!r}")


def covering_number(F, mu, eps: float, method: str = "greedy", centres=None) -> int:
    """Number of closed L2(mu) balls of radius eps, centred at members (or at
    ``centres``), needed to cover F.

    ``greedy`` repeatedly takes the centre covering the most uncovered
    members; it is an upper bound on the minimum and, for classes of at most
    six members, exceeds it by at most one.  ``exhaustive`` enumerates
    subsets (at most 12 candidates) and ``exact`` solves the set-cover
    integer program; both return the minimum.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    H = _members(F)
    C = H if centres is None else _members(centres)
    return _cover_size(_ball_matrix(H, C, _weights(mu), eps), method)


def default_measure_grid(d: int, n_random: int = 100, seed: int = 0) -> np.ndarray:
    """Point masses, the uniform measure and ``n_random`` Dirichlet(1) draws."""
    rng = np.random.default_rng(seed)
    return np.vstack([np.eye(d), np.full((1, d), 1.0 / d), rng.dirichlet(np.ones(d), size=n_random)])


def uniform_covering_number(F, eps: float, measure_grid=None, method: str = "auto") -> int:
    """Largest covering number over a finite grid of probability measures.

    The true supremum runs over all probability measures, so this is a lower
    bound for it.
    """
    H = _members(F)
    grid = default_measure_grid(H.shape[1]) if measure_grid is None else np.atleast_2d(measure_grid)
    return max(covering_number(H, mu, eps, method) for mu in grid)


def _uniform_profile(H, eps_values, grid, method) -> np.ndarray:
    """sup over the grid of N(eps) for every eps, sharing distance matrices."""
    best = np.zeros(len(eps_values), dtype=int)
    for mu in grid:
        D = l2_distances(H, H, mu)
        for k, eps in enumerate(eps_values):
            covers = D <= eps * (1.0 + BALL_TOL) + BALL_TOL
            best[k] = max(best[k], _cover_size(covers, method))
    return best


@dataclass(frozen=True)
class EntropyIntegral:
    value: float
    step: float
    error_bound: float

    def to_json(self) -> dict:
        return {"value": self.value, "step": self.step, "error_bound": self.error_bound}


def entropy_integral(F, quadrature_step: float = 0.02, measure_grid=None, method: str = "auto") -> EntropyIntegral:
    """Trapezoid rule for int sqrt(log N(eps)) d eps over [step, 2].

    The integrand is nonincreasing, vanishes at eps = 2 and is at most
    sqrt(log |F|), so the dropped piece [0, step] costs at most
    step * sqrt(log |F|) and the trapezoid error on a monotone integrand
    another step * sqrt(log |F|) / 2; ``error_bound`` is their sum.
    """
    if not quadrature_step > 0:
        raise ValueError(f"quadrature step must be positive, got {quadrature_step}")
    H = _members(F)
    grid = default_measure_grid(H.shape[1]) if measure_grid is None else np.atleast_2d(measure_grid)
    k = max(1, int(math.ceil((2.0 - quadrature_step) / quadrature_step)))
    eps = np.linspace(quadrature_step, 2.0, k + 1)
    counts = _uniform_profile(H, eps, grid, method)
    integrand = np.sqrt(np.log(np.maximum(counts, 1)))
    value = float(_trapezoid(integrand, eps))
    ceiling = math.sqrt(math.log(max(len(np.unique(H, axis=0)), 1)))
    return EntropyIntegral(value, quadrature_step, 1.5 * quadrature_step * ceiling)


def delta_class(F: FunctionClass, eta, delta: float) -> DeltaClass:
    """All ordered pairs (f, g) of members with eta((f - g)^2) <= delta^2."""
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    w = _weights(eta)
    D = l2_distances(F.members, F.members, w)
    i, j = np.nonzero(D <= delta + BALL_TOL)
    pairs = tuple(zip(i.tolist(), j.tolist()))
    return DeltaClass(F, float(delta), np.array(w), pairs)


def class_sup_norm(run, flow: Optional[FlowTrajectory], n: int, C, field: str = "W"):
    """sup over members h of |F^N_n(h)|.

    For a SimulationRun this is one number; for a ReplicationBatch it is one
    value per replication.
    """
    H = _members(C)
    if isinstance(run, ReplicationBatch):
        if H.shape[0] == 0:
            return np.zeros(run.R)
        rows = run.field_rows(n, field, flow)
        return np.max(np.abs(rows @ H.T), axis=1)
    if isinstance(run, SimulationRun):
        from .particles import field_V, field_W

        if H.shape[0] == 0:
            return 0.0
        fn = (lambda h: field_W(run, flow, n, h)) if field == "W" else (lambda h: field_V(run, n, h))
        return max(abs(fn(h)) for h in H)
    raise TypeError(f"expected a SimulationRun or ReplicationBatch, got {type(run).__name__}")


def orlicz_estimate(samples) -> float:
    """Plug-in Orlicz norm for psi(u) = exp(u^2) - 1: the a solving
    mean(psi(|Y_i| / a)) = 1."""
    y = np.abs(np.asarray(samples, dtype=float))
    if y.size < 2:
        raise ValueError("need at least 2 samples")
    top = float(y.max())
    if top == 0.0:
        return 0.0
    z = y / top
    log_R = math.log(z.size)

    # log mean exp(z^2 / a^2) - log 2, decreasing in a
    def g(a):
        return float(logsumexp((z / a) ** 2)) - log_R - math.log(2.0)

    hi = 1.0 / math.sqrt(math.log(2.0))
    lo = 1.0 / math.sqrt(math.log(2.0 * z.size))
    if g(hi) >= 0.0:
        return top * hi
    return top * bisect(g, lo, hi, xtol=1e-300, rtol=1e-12, maxiter=500)


def _log(x):
    return math.log(x) if x > 0 else -math.inf


def equicontinuity_sweep(model: FeynmanKacModel, F: FunctionClass, schedule: SpeedSchedule, delta_grid,
                         y: float, R: int, rng: RngSpec, n: int = 1, workers: int = 1,
                         batches: Optional[dict] = None) -> Report:
    """Frequency of ||W^N_n||_{F(delta)} > y sqrt(alpha(N)) for every (delta, N).

    A class whose members all vanish identically has sup-norm 0, so its
    exceedance probability is exactly 0 (``structural_zero``).  When no
    exceedance is observed otherwise, the Wilson upper bound stands in for
    the log-frequency (``log_is_upper_bound``).
    """
    model = model.truncated(n)
    flow = exact_flow(model)
    eta = flow.weights(n)
    classes = {float(d): delta_class(F, eta, d) for d in delta_grid}
    rows = []
    for N in schedule.grid:
        batch = batches[N] if batches and N in batches else replicate(model, N, R, rng, workers=workers)
        a = schedule.alpha(N)
        for delta, C in classes.items():
            H = C.members
            structural = H.shape[0] == 0 or not np.any(H != 0.0)
            sup = class_sup_norm(batch, flow, n, C, "W")
            k = int(np.sum(sup > y * math.sqrt(a)))
            low, high = wilson_interval(k, batch.R)
            if structural:
                log_value, upper = -math.inf, False
            elif k > 0:
                log_value, upper = _log(k / batch.R) / a, False
            else:
                log_value, upper = _log(high) / a, True
            rows.append({"N": N, "delta": delta, "members": len(C), "structural_zero": structural,
                         "exceed": k, "freq": k / batch.R, "wilson": [low, high],
                         "log_prob_over_alpha": log_value, "log_is_upper_bound": upper,
                         "mean_sup": mc_number(sup.mean(), sup.std(ddof=1) / math.sqrt(batch.R), batch.R, N,
                                               rng.seed)})
    N_max = schedule.grid[-1]
    last = sorted((r for r in rows if r["N"] == N_max), key=lambda r: r["delta"])
    logs = [r["log_prob_over_alpha"] for r in last]
    monotone = all(a <= b for a, b in zip(logs, logs[1:]))
    freq_monotone = all(
        all(a["freq"] <= b["freq"] for a, b in zip(group, group[1:]))
        for N in schedule.grid
        for group in [sorted((r for r in rows if r["N"] == N), key=lambda r: r["delta"])]
    )
    summary = {"time": n, "y": y, "deltas": sorted(classes), "log_nonincreasing_as_delta_decreases": monotone,
               "freq_nondecreasing_in_delta": freq_monotone}
    return Report("equicontinuity", rows, summary, monotone and freq_monotone)


def orlicz_entropy_ratio(batch: ReplicationBatch, flow: FlowTrajectory, n: int, classes: Sequence,
                         field: str = "W", quadrature_step: float = 0.05) -> Report:
    """Orlicz norm of the class sup-norm divided by the entropy integral, per class."""
    rows = []
    for C in classes:
        sup = class_sup_norm(batch, flow, n, C, field)
        orl = orlicz_estimate(sup)
        ent = entropy_integral(C, quadrature_step).value
        rows.append({"members": len(_members(C)), "orlicz": orl, "entropy": ent,
                     "ratio": orl / ent if ent > 0 else (0.0 if orl == 0 else math.inf)})
    ratios = [r["ratio"] for r in rows]
    return Report("orlicz-entropy-ratio", rows, {"max_ratio": max(ratios)}, bool(np.all(np.isfinite(ratios))))


def chaining_diagnostic(batch: ReplicationBatch, flow: FlowTrajectory, n: int, F: FunctionClass, delta_grid,
                        quadrature_step: float = 0.05, probs=(0.5, 0.9, 0.99)) -> Report:
    """Fit a_delta = c * int_0^delta sqrt(log N(F, eps)) d eps to the mean class
    sup-norm and a sub-Gaussian scale b_delta to its spread, then check the
    empirical upper quantiles against exp(-x^2 / (2 b^2)).

    The constants are fitted, not universal; the report gives the share of
    quantile checks that hold.
    """
    H = F.members
    grid = default_measure_grid(H.shape[1])
    eps = np.arange(quadrature_step, 2.0 + quadrature_step / 2, quadrature_step)
    profile = np.sqrt(np.log(np.maximum(_uniform_profile(H, eps, grid, "auto"), 1)))
    eta = flow.weights(n)
    rows, shapes, means = [], [], []
    for delta in delta_grid:
        C = delta_class(F, eta, delta)
        sup = class_sup_norm(batch, flow, n, C, "W")
        mask = eps <= delta
        shape = float(np.sum(profile[mask]) * quadrature_step)
        shapes.append(shape)
        means.append(sup.mean())
        rows.append({"delta": float(delta), "shape": shape, "sup": sup})
    shapes, means = np.array(shapes), np.array(means)
    c = float(shapes @ means / (shapes @ shapes)) if np.any(shapes > 0) else 0.0
    held = total = 0
    out = []
    for row in rows:
        sup = row.pop("sup")
        a = c * row["shape"]
        b = float(sup.std(ddof=1)) if sup.size > 1 else 0.0
        checks = []
        for p in probs:
            x = float(np.quantile(sup, p)) - a
            bound = 1.0 if x <= 0 or b == 0 else math.exp(-x * x / (2 * b * b))
            ok = (1.0 - p) <= bound + 1.0 / math.sqrt(sup.size)
            held += ok
            total += 1
            checks.append(ok)
        row.update(a_delta=a, b_delta=b, checks=checks)
        out.append(row)
    fit = held / total if total else 1.0
    return Report("chaining-diagnostic", out, {"c_fit": c, "share_held": fit}, fit == 1.0)
