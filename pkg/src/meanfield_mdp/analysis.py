"""Gaussian-limit covariances, rate functions and moderate-deviation diagnostics.

On a finite space every quadratic form is a matrix in the indicator basis.
The local field V_n has variance matrix

    Q_n = sum_x eta_{n-1}(x) (diag K_x - K_x K_x^T),   K = K_{n, eta_{n-1}},

(at time 0, Q_0 = diag eta_0 - eta_0 eta_0^T) and W_n = sum_p V_p D_{p,n}
has Q^W_n = sum_p D_{p,n}^T Q_p D_{p,n}.  The rate of a signed measure is
then the Legendre transform of half that form.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import binomtest

from .errors import ConvergenceNotReached, DegenerateBatch, SpaceMismatch
from .flow import FeynmanKacModel, FlowTrajectory, exact_flow, fk_constants, mckean_kernel, semigroup_d
from .measures import Observable, SignedMeasure
from .particles import ReplicationBatch, replicate
from .streams import RngSpec

__all__ = [
    "SpeedSchedule",
    "CovarianceMatrix",
    "RateEvaluation",
    "LaplaceResult",
    "Report",
    "cov_V",
    "cov_W",
    "variance_form",
    "covariance_matrix",
    "rate_quadratic",
    "rate_I_measure",
    "rate_variational_numeric",
    "rate_J",
    "laplace_from_samples",
    "laplace_estimate",
    "mdp_sweep",
    "remainder_tail_check",
    "bracket_drift_check",
    "wilson_interval",
    "mc_number",
]

# eigenvalues below PINV_CUTOFF * lambda_max count as null directions
PINV_CUTOFF = 1e-10
RANGE_TOL = 1e-9
SERIES_TOL = 1e-15
SERIES_CAP = 10**6


def _vals(f) -> np.ndarray:
    return f.values if isinstance(f, Observable) else np.asarray(f, dtype=float)


def _wts(mu) -> np.ndarray:
    return mu.weights if isinstance(mu, SignedMeasure) else np.asarray(mu, dtype=float)


@dataclass(frozen=True)
class SpeedSchedule:
    """alpha(N) = N**beta on an explicit, strictly increasing N grid."""

    beta: float = 0.5
    grid: tuple = (100, 1000, 10000)

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        grid = tuple(int(N) for N in self.grid)
        if not grid or any(N < 1 for N in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError(f"N grid must be positive and strictly increasing, got {self.grid}")
        object.__setattr__(self, "grid", grid)
        ratios = [self.alpha(N) / N for N in grid]
        alphas = [self.alpha(N) for N in grid]
        # alpha grows and alpha/N shrinks along the grid
        if len(grid) > 1 and not (np.all(np.diff(alphas) > 0) and np.all(np.diff(ratios) < 0)):
            raise ValueError("schedule does not satisfy alpha up, alpha/N down on the grid")

    def alpha(self, N) -> float:
        return float(N) ** self.beta


@dataclass(frozen=True, eq=False)
class CovarianceMatrix:
    functions: tuple
    matrix: np.ndarray
    field: str
    time: int

    def __post_init__(self):
        C = np.array(self.matrix, dtype=float)
        C = 0.5 * (C + C.T)
        C.setflags(write=False)
        object.__setattr__(self, "matrix", C)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix).min())


@dataclass(frozen=True)
class RateEvaluation:
    value: float
    method: str
    reason: Optional[str] = None
    meta: dict = field(default_factory=dict)

    @property
    def infinite(self) -> bool:
        return math.isinf(self.value)

    def to_json(self) -> dict:
        return {"value": "inf" if self.infinite else self.value, "method": self.method,
                "reason": self.reason, "meta": self.meta}


# -- exact covariances ----------------------------------------------------------

def variance_form(model: FeynmanKacModel, flow: FlowTrajectory, n: int, field: str = "V") -> np.ndarray:
    """Matrix Q with E[F_n(f) F_n(g)] = f^T Q g for F = V or W."""
    model._check_time(n)
    if field == "W":
        return sum(
            D.T @ variance_form(model, flow, p, "V") @ D
            for p in range(n + 1)
            for D in [semigroup_d(model, p, n, flow).matrix]
        )
    if field != "V":
        raise ValueError(f"field must be 'V' or 'W', got {field!r}")
    if n == 0:
        eta = model.initial.weights
        return np.diag(eta) - np.outer(eta, eta)
    eta_prev = flow.weights(n - 1)
    K = mckean_kernel(model, n - 1, eta_prev).rows
    return np.diag(eta_prev @ K) - (K.T * eta_prev) @ K


def _check_space(model, n, *fs):
    d = model.size(n)
    for f in fs:
        if _vals(f).shape != (d,):
            raise SpaceMismatch(f"observable of size {_vals(f).size} on space {n} of size {d}")


def cov_V(model: FeynmanKacModel, flow: FlowTrajectory, n: int, f, g) -> float:
    """eta_{n-1} K([f - Kf][g - Kg]); at n = 0 the eta_0-centred covariance."""
    _check_space(model, n, f, g)
    f, g = _vals(f), _vals(g)
    if n == 0:
        eta = model.initial.weights
        return float(eta @ ((f - eta @ f) * (g - eta @ g)))
    eta_prev = flow.weights(n - 1)
    K = mckean_kernel(model, n - 1, eta_prev).rows
    Kf, Kg = K @ f, K @ g
    # per source x: sum_y K(x,y)(f(y) - Kf(x))(g(y) - Kg(x))
    inner = K @ (f * g) - Kf * Kg
    return float(eta_prev @ inner)


def cov_W(model: FeynmanKacModel, flow: FlowTrajectory, n: int, f, g) -> float:
    """Sum over p of cov_V at time p of D_{p,n} f and D_{p,n} g."""
    _check_space(model, n, f, g)
    total = 0.0
    for p in range(n + 1):
        D = semigroup_d(model, p, n, flow)
        total += cov_V(model, flow, p, D.apply(f), D.apply(g))
    return total


def covariance_matrix(model, flow, n: int, functions: Sequence, field: str = "V") -> CovarianceMatrix:
    cov = cov_V if field == "V" else cov_W
    k = len(functions)
    C = np.zeros((k, k))
    for i in range(k):
        for j in range(i, k):
            C[i, j] = C[j, i] = cov(model, flow, n, functions[i], functions[j])
    return CovarianceMatrix(tuple(_vals(f) for f in functions), C, field, n)


# -- rate functions --------------------------------------------------------------

def _legendre_quadratic(C: np.ndarray, v: np.ndarray):
    """(value, reason) for sup_u <u,v> - u^T C u / 2."""
    lam, U = np.linalg.eigh(0.5 * (C + C.T))
    scale = max(float(lam.max()), 0.0)
    keep = lam > PINV_CUTOFF * scale if scale > 0 else np.zeros(lam.size, dtype=bool)
    coords = U.T @ v
    null_part = np.linalg.norm(coords[~keep])
    if null_part > RANGE_TOL * max(1.0, float(np.linalg.norm(v))):
        return math.inf, "outside-covariance-range"
    return 0.5 * float(np.sum(coords[keep] ** 2 / lam[keep])), None


def rate_quadratic(C, v) -> RateEvaluation:
    """1/2 v^T C^+ v when v lies in the range of C, +inf otherwise."""
    matrix = C.matrix if isinstance(C, CovarianceMatrix) else np.asarray(C, dtype=float)
    v = np.asarray(v, dtype=float)
    if v.shape != (matrix.shape[0],):
        raise SpaceMismatch(f"vector of size {v.size} for a {matrix.shape[0]}x{matrix.shape[0]} covariance")
    value, reason = _legendre_quadratic(matrix, v)
    return RateEvaluation(value, "quadratic", reason)


def rate_I_measure(model: FeynmanKacModel, flow: FlowTrajectory, n: int, mu) -> RateEvaluation:
    """Spectral series 1/2 sum_m <h, (K* K)^m h>_{eta_n} with h = d mu / d eta_n.

    K = K_{n, eta_{n-1}} and K* its adjoint under eta_{n-1}; at n = 0 the
    kernel is the constant kernel eta_0.  The operator A = K* K is
    self-adjoint in L2(eta_n) with spectrum in [0, 1]; its fixed space
    always contains the constants.
    """
    method = "spectral-series"
    w = _wts(mu)
    _check_space(model, n, np.zeros_like(w))
    eta = flow.weights(n)
    if abs(w.sum()) > 1e-12:
        return RateEvaluation(math.inf, method, "NonzeroTotalMass")
    support = eta > 0
    if np.any(np.abs(w[~support]) > 1e-15):
        return RateEvaluation(math.inf, method, "NotAbsolutelyContinuous")
    if not np.any(w != 0):
        return RateEvaluation(0.0, method, meta={"terms": 0})

    if n == 0:
        src = np.ones(1)
        K = eta[None, :]
    else:
        src = flow.weights(n - 1)
        K = mckean_kernel(model, n - 1, src).rows
    rows = src > 0
    src, K = src[rows], K[rows][:, support]
    eta_s = eta[support]
    h = w[support] / eta_s
    # K*(y, x) = src(x) K(x, y) / eta(y)
    K_adj = (K * src[:, None]).T / eta_s[:, None]
    A = K_adj @ K

    # symmetric version in L2(eta) coordinates, to read off the spectrum
    root = np.sqrt(eta_s)
    B = root[:, None] * A / root[None, :]
    lam, U = np.linalg.eigh(0.5 * (B + B.T))
    fixed = lam > 1.0 - 1e-10
    hc = U.T @ (root * h)
    pairing = float(np.max(np.abs(hc[fixed]))) if fixed.any() else 0.0
    if pairing > RANGE_TOL * max(1.0, float(np.linalg.norm(hc))):
        return RateEvaluation(math.inf, method, "fixed-space-pairing", {"pairing": pairing})
    rho = float(np.max(np.abs(lam[~fixed]))) if (~fixed).any() else 0.0
    # drop the (numerically zero) fixed-space component before iterating
    hc[fixed] = 0.0
    h = U @ hc / root

    total, term, m = 0.0, h.copy(), 0
    converged = False
    while m < SERIES_CAP:
        s = float(eta_s @ (h * term))
        total += s
        m += 1
        if abs(s) < SERIES_TOL * (1.0 - rho) * max(1.0, total) or rho == 0.0 and m > 1:
            converged = True
            break
        term = A @ term
    if not converged:
        warnings.warn(f"spectral series stopped at the {SERIES_CAP}-term cap (rho={rho:.6g})",
                      ConvergenceNotReached, stacklevel=2)
    return RateEvaluation(0.5 * total, method, None, {"terms": m, "rho": rho, "converged": converged})


def rate_variational_numeric(model: FeynmanKacModel, flow: FlowTrajectory, n: int, mu,
                             field: str = "V") -> RateEvaluation:
    """sup_f mu(f) - E[F_n(f)^2] / 2 by solving the stationarity equation Q f = mu."""
    method = "variational-numeric"
    w = _wts(mu)
    _check_space(model, n, w)
    if not np.any(w != 0):
        return RateEvaluation(0.0, method)
    Q = variance_form(model, flow, n, field)
    f, *_ = np.linalg.lstsq(Q, w, rcond=None)
    residual = float(np.linalg.norm(Q @ f - w))
    if residual > 1e-8 * max(1.0, float(np.linalg.norm(w))):
        # mu has a component along a direction where the variance vanishes,
        # so the objective grows linearly there
        return RateEvaluation(math.inf, method, "unbounded-direction", {"residual": residual})
    value = float(w @ f - 0.5 * f @ Q @ f)
    return RateEvaluation(value, method, None, {"residual": residual})


def rate_J(model: FeynmanKacModel, flow: FlowTrajectory, n: int, nu) -> RateEvaluation:
    """Legendre transform of the W_n variance form (indicator basis via cov_W)."""
    w = _wts(nu)
    _check_space(model, n, w)
    d = model.size(n)
    basis = np.eye(d)
    C = np.array([[cov_W(model, flow, n, basis[i], basis[j]) for j in range(d)] for i in range(d)])
    value, reason = _legendre_quadratic(C, w)
    return RateEvaluation(value, "legendre-W", reason)


# -- Monte Carlo estimators ----------------------------------------------------

def mc_number(estimate, stderr, R, N, seed) -> dict:
    return {"estimate": float(estimate), "stderr": float(stderr), "R": int(R),
            "N": None if N is None else int(N), "seed": None if seed is None else int(seed)}


@dataclass(frozen=True)
class LaplaceResult:
    estimate: float
    stderr: float
    R: int
    N: Optional[int]
    seed: Optional[int]
    alpha: float
    top_mass: float
    flagged: bool

    def to_json(self) -> dict:
        out = mc_number(self.estimate, self.stderr, self.R, self.N, self.seed)
        out.update(alpha=self.alpha, top_mass=self.top_mass, flagged=self.flagged)
        return out


def laplace_from_samples(samples, alpha: float, N=None, seed=None) -> LaplaceResult:
    """(1/alpha) log mean exp(sqrt(alpha) X) with a jackknife standard error.

    Flagged when the top 1% of replications carry more than half the
    exponential mass.
    """
    x = math.sqrt(alpha) * np.asarray(samples, dtype=float)
    R = x.size
    if R < 2:
        raise DegenerateBatch(f"need at least 2 replications, got {R}")
    top = x.max()
    w = np.exp(x - top)
    S = w.sum()
    est = (top + math.log(S / R)) / alpha
    loo = np.maximum(S - w, np.finfo(float).tiny * S)
    jack = (top + np.log(loo / (R - 1))) / alpha
    stderr = math.sqrt((R - 1) / R * np.sum((jack - jack.mean()) ** 2))
    k = max(1, math.ceil(0.01 * R))
    top_mass = float(np.sort(w)[-k:].sum() / S)
    return LaplaceResult(float(est), stderr, R, N, seed, float(alpha), top_mass, top_mass > 0.5)


def laplace_estimate(batch: ReplicationBatch, f_sequence, schedule: SpeedSchedule, N: Optional[int] = None,
                     field: str = "V", flow: Optional[FlowTrajectory] = None) -> LaplaceResult:
    """Field 'V' uses sum_p V^N_p(f_p) up to n = len(f_sequence) - 1; field 'W'
    uses W^N_n(f_n)."""
    N = batch.N if N is None else N
    n = len(f_sequence) - 1
    if field == "V":
        samples = batch.martingale(f_sequence, n)
    else:
        flow = exact_flow(batch.model) if flow is None else flow
        samples = batch.W(flow, n, f_sequence[-1])
    return laplace_from_samples(samples, schedule.alpha(N), N, batch.rng.seed)


def wilson_interval(k: int, R: int, level: float = 0.95):
    ci = binomtest(int(k), int(R)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def _log(x):
    return math.log(x) if x > 0 else -math.inf


# -- reports -------------------------------------------------------------------

@dataclass
class Report:
    kind: str
    rows: list
    summary: dict
    passed: Optional[bool] = None

    def to_json(self) -> dict:
        return {"kind": self.kind, "passed": self.passed, "summary": self.summary, "rows": self.rows}

    def dumps(self) -> str:
        return json.dumps(_jsonable(self.to_json()), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"# {self.kind}  passed={self.passed}"]
        for key, value in self.summary.items():
            lines.append(f"{key}: {_fmt(value)}")
        if self.rows:
            flat = [_flatten(r) for r in self.rows]
            cols = list(dict.fromkeys(c for r in flat for c in r))
            cells = [[_fmt(r[c]) if c in r else "-" for c in cols] for r in flat]
            widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
            lines.append("  ".join(c.rjust(wd) for c, wd in zip(cols, widths)))
            lines.extend("  ".join(v.rjust(wd) for v, wd in zip(row, widths)) for row in cells)
        return "\n".join(lines) + "\n"


def _flatten(row: dict, prefix="") -> dict:
    out = {}
    for key, value in row.items():
        if isinstance(value, dict):
            out.update(_flatten(value, f"{prefix}{key}."))
        else:
            out[prefix + key] = value
    return out


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    return str(value)


def _jsonable(obj):
    """JSON-safe copy; infinities become the strings 'inf' / '-inf'."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# -- sweeps and checks ----------------------------------------------------------

def _gap_nonincreasing(gaps, stderrs, k=2.0) -> bool:
    return all(gaps[i + 1] <= gaps[i] + k * math.hypot(stderrs[i], stderrs[i + 1]) for i in range(len(gaps) - 1))


def mdp_sweep(model: FeynmanKacModel, f, schedule: SpeedSchedule, R: int, rng: RngSpec, n: int = 0,
              workers: int = 1, batches: Optional[dict] = None) -> Report:
    """Laplace estimates for sum_p V^N_p(f) and for W^N_n(f) against their
    Gaussian targets, for every N of the schedule."""
    model = model.truncated(n)
    flow = exact_flow(model)
    f = _vals(f)
    f_seq = [f] * (n + 1)
    target_V = 0.5 * sum(cov_V(model, flow, p, f, f) for p in range(n + 1))
    target_W = 0.5 * cov_W(model, flow, n, f, f)
    rows = []
    for N in schedule.grid:
        batch = batches[N] if batches and N in batches else replicate(model, N, R, rng, workers=workers)
        lv = laplace_estimate(batch, f_seq, schedule, N, "V")
        lw = laplace_estimate(batch, f_seq, schedule, N, "W", flow)
        rows.append({"N": N, "alpha": schedule.alpha(N), "V": lv.to_json(), "W": lw.to_json(),
                     "gap_V": abs(lv.estimate - target_V), "gap_W": abs(lw.estimate - target_W)})
    gv = [r["gap_V"] for r in rows]
    gw = [r["gap_W"] for r in rows]
    sv = [r["V"]["stderr"] for r in rows]
    sw = [r["W"]["stderr"] for r in rows]
    summary = {
        "time": n, "beta": schedule.beta, "target_V": target_V, "target_W": target_W,
        "gap_V_nonincreasing": _gap_nonincreasing(gv, sv), "gap_W_nonincreasing": _gap_nonincreasing(gw, sw),
        "final_rel_gap_V": gv[-1] / target_V if target_V > 0 else gv[-1],
        "final_rel_gap_W": gw[-1] / target_W if target_W > 0 else gw[-1],
        "flagged": any(r["V"]["flagged"] or r["W"]["flagged"] for r in rows),
    }
    passed = (summary["gap_V_nonincreasing"] and summary["gap_W_nonincreasing"]
              and summary["final_rel_gap_V"] < 0.1 and summary["final_rel_gap_W"] < 0.1)
    return Report("mdp-sweep", rows, summary, passed)


def remainder_tail_check(model: FeynmanKacModel, f, schedule: SpeedSchedule, R: int, rng: RngSpec,
                         eps: float = 0.5, n: int = 1, workers: int = 1,
                         batches: Optional[dict] = None) -> Report:
    """Tail frequencies of |R^N_n(f)| >= eps sqrt(alpha(N)) and the exponential
    moment E exp(t sqrt(N) |R|) at t = 1/(4 r) against (1 - 2 r t)^(-1/2)."""
    model = model.truncated(n)
    flow = exact_flow(model)
    f = _vals(f)
    r_hat = fk_constants(model, flow).r_bound[n]
    t = 1.0 / (4.0 * r_hat) if r_hat > 0 else math.inf
    bound = (1.0 - 2.0 * r_hat * t) ** -0.5 if r_hat > 0 else 1.0
    rows = []
    for N in schedule.grid:
        batch = batches[N] if batches and N in batches else replicate(model, N, R, rng, workers=workers)
        rem = np.abs(batch.remainder(flow, n, f))
        a = schedule.alpha(N)
        k = int(np.sum(rem >= eps * math.sqrt(a)))
        low, high = wilson_interval(k, R)
        freq = k / R
        row = {"N": N, "alpha": a, "exceed": k, "freq": freq, "wilson": [low, high],
               "log_freq_over_alpha": _log(freq) / a, "wilson_upper_log_over_alpha": _log(high) / a,
               "mean_abs_R": mc_number(rem.mean(), rem.std(ddof=1) / math.sqrt(R), R, N, rng.seed)}
        if r_hat > 0:
            # log-space mean of exp(t sqrt(N) |R|) with a delta-method stderr
            x = t * math.sqrt(N) * rem
            lme = float(logsumexp(x) - math.log(R))
            e = np.exp(x - x.max())
            rel = e.std(ddof=1) / math.sqrt(R) / e.mean()
            row["exp_moment"] = mc_number(math.exp(lme) if lme < 700 else math.inf, math.exp(min(lme, 700)) * rel,
                                          R, N, rng.seed)
            row["log_exp_moment"] = lme
            y = t * rem
            row["exp_moment_unscaled"] = mc_number(np.exp(y).mean(), np.exp(y).std(ddof=1) / math.sqrt(R),
                                                   R, N, rng.seed)
        rows.append(row)
    logs = [r["log_freq_over_alpha"] for r in rows]
    summary = {"time": n, "eps": eps, "r_hat": r_hat, "t": t, "bound": bound,
               "log_freq_nonincreasing": all(b <= a for a, b in zip(logs, logs[1:]))}
    passed = summary["log_freq_nonincreasing"]
    return Report("remainder-tail", rows, summary, passed)


def bracket_drift_check(model: FeynmanKacModel, f_sequence, R: int, N_grid: Sequence[int], rng: RngSpec,
                        workers: int = 1, batches: Optional[dict] = None,
                        slope_range=(-0.65, -0.35)) -> Report:
    """E|<M^N(f)>_n - <M(f)>_n| per N and its fitted log-log slope."""
    n = len(f_sequence) - 1
    model = model.truncated(n)
    flow = exact_flow(model)
    f_sequence = [_vals(f) for f in f_sequence]
    exact = sum(cov_V(model, flow, p, f_sequence[p], f_sequence[p]) for p in range(n + 1))
    rows = []
    for N in N_grid:
        batch = batches[N] if batches and N in batches else replicate(model, N, R, rng, workers=workers)
        gap = np.abs(batch.bracket(f_sequence, n) - exact)
        rows.append({"N": int(N), "gap": mc_number(gap.mean(), gap.std(ddof=1) / math.sqrt(R), R, N, rng.seed)})
    means = np.array([r["gap"]["estimate"] for r in rows])
    if np.all(means > 0) and len(rows) > 1:
        slope = float(np.polyfit(np.log(np.asarray(N_grid, dtype=float)), np.log(means), 1)[0])
    else:
        slope = math.nan
    summary = {"time": n, "exact_bracket": exact, "slope": slope, "slope_range": list(slope_range)}
    passed = bool(np.all(means == 0)) or (slope_range[0] <= slope <= slope_range[1])
    return Report("bracket-drift", rows, summary, passed)
