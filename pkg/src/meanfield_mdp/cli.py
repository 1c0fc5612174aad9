"""Config-driven experiment runner.

    python -m meanfield_mdp run config.json [--workers K] [--out DIR] [--seed S]
    python -m meanfield_mdp validate config.json

Exit codes: 0 success, 2 invalid config or model, 3 failed check.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from .analysis import (
    Report,
    SpeedSchedule,
    _jsonable,
    bracket_drift_check,
    mdp_sweep,
    rate_I_measure,
    rate_J,
    rate_variational_numeric,
    remainder_tail_check,
)
from .empirical import (
    FunctionClass,
    covering_number,
    default_measure_grid,
    entropy_integral,
    equicontinuity_sweep,
    uniform_covering_number,
)
from .errors import ConfigError, MeanFieldError, ModelValidationError, PotentialOutOfRange
from .flow import FeynmanKacModel, exact_flow, fk_constants
from .particles import replicate, write_field_samples
from .streams import RngSpec

EXIT_OK, EXIT_INVALID, EXIT_CHECK_FAILED = 0, 2, 3

KINDS = ("exact-flow", "mdp-sweep", "rate-eval", "remainder-tail", "bracket-drift", "equicontinuity", "covering")

DEFAULTS = {
    "time": 1,
    "N_grid": [100, 1000, 10000],
    "R": 1000,
    "beta": 0.5,
    "eps": 0.5,
    "eps_grid": [0.25, 0.5, 1.0, 2.0],
    "delta_grid": [0.1, 1.0],
    "y": 1.0,
    "covering_method": "greedy",
    "quadrature_step": 0.05,
    "write_samples": False,
}


def load_schema() -> dict:
    text = resources.files("meanfield_mdp").joinpath("schema/experiment.schema.json").read_text()
    return json.loads(text)


@dataclass
class ExperimentConfig:
    model: FeynmanKacModel
    kind: str
    seed: int
    params: dict
    out: Path = Path("out")
    workers: int = 1
    check: bool = False
    document: dict = field(default_factory=dict)

    @property
    def schedule(self) -> SpeedSchedule:
        return SpeedSchedule(self.params["beta"], tuple(self.params["N_grid"]))

    def digest(self) -> str:
        """sha256 of the canonical config with the model inlined."""
        doc = dict(self.document)
        doc["model"] = self.model.to_json()
        doc["seed"] = self.seed
        doc.pop("out", None)
        doc.pop("workers", None)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _schema_error(err: jsonschema.ValidationError) -> ConfigError:
    key = ".".join(str(p) for p in err.absolute_path) or (
        err.message.split("'")[1] if err.validator == "required" else "<root>"
    )
    return ConfigError(key, err.instance if err.validator != "required" else None, err.message)


def parse_config(doc: dict, base: Path = Path("."), seed: Optional[int] = None) -> ExperimentConfig:
    """Schema check, then semantic checks; raises ConfigError or model errors."""
    if seed is not None:
        doc = dict(doc, seed=seed)
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise _schema_error(errors[0])
    spec = doc["model"]
    if isinstance(spec, str):
        path = Path(spec) if Path(spec).is_absolute() else base / spec
        try:
            spec = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError("model", doc["model"], f"cannot read model file: {exc}") from exc
    model = FeynmanKacModel.from_json(spec)
    params = dict(DEFAULTS, **doc.get("params", {}))
    grid = params["N_grid"]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("params.N_grid", grid, "N grid must be strictly increasing")
    if not 0.0 < params["beta"] < 1.0:
        raise ConfigError("params.beta", params["beta"], "beta must lie in (0, 1)")
    if params["R"] < 1:
        raise ConfigError("params.R", params["R"], "R must be >= 1")
    if not 0 <= params["time"] <= model.horizon:
        raise ConfigError("params.time", params["time"], f"time must lie in 0..{model.horizon}")
    for key in ("observable", "mu", "nu"):
        if key in params and len(params[key]) != model.size(params["time"]):
            raise ConfigError(f"params.{key}", params[key],
                              f"needs {model.size(params['time'])} entries for space {params['time']}")
    if doc["kind"] in ("equicontinuity", "covering") and isinstance(params.get("function_class"), str):
        params["function_class"] = str(base / params["function_class"])
    return ExperimentConfig(model=model, kind=doc["kind"], seed=int(doc["seed"]), params=params,
                            out=Path(doc.get("out", "out")), workers=int(doc.get("workers", 1)),
                            check=bool(doc.get("check", False)), document=doc)


def load_config(path, seed: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("<file>", str(path), f"cannot load config: {exc}") from exc
    return parse_config(doc, path.parent, seed)


def _function_class(params, d) -> FunctionClass:
    spec = params.get("function_class", "indicators")
    if spec == "indicators":
        return FunctionClass.indicators(d)
    if isinstance(spec, str):
        return FunctionClass.load(spec)
    return FunctionClass.from_json(spec)


def _observable(params, d):
    if "observable" in params:
        return np.asarray(params["observable"], dtype=float)
    f = np.zeros(d)
    f[0] = 1.0
    return f


# -- experiments -------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out: Path) -> tuple:
    """Returns (report, extra files written)."""
    model, p = cfg.model, cfg.params
    rng = RngSpec(cfg.seed)
    n = p["time"]
    extra = []
    if cfg.kind == "exact-flow":
        flow = exact_flow(model)
        rows = [{"time": t, "eta": flow.weights(t).tolist()} for t in range(flow.last + 1)]
        traj = out / "trajectory.csv"
        with open(traj, "w") as fh:
            fh.write("time," + ",".join(f"x{j}" for j in range(max(model.size(t) for t in range(model.horizon + 1))))
                     + "\n")
            for t in range(flow.last + 1):
                fh.write(f"{t}," + ",".join(f"{w:.17g}" for w in flow.weights(t)) + "\n")
        extra.append(traj)
        return Report("exact-flow", rows, {"horizon": model.horizon, "constants": fk_constants(model, flow).to_json()},
                      True), extra

    if cfg.kind == "rate-eval":
        flow = exact_flow(model)
        rows = []
        if "mu" in p:
            rows.append({"rate": "I", "spectral": rate_I_measure(model, flow, n, p["mu"]).to_json(),
                         "variational": rate_variational_numeric(model, flow, n, p["mu"], "V").to_json()})
        if "nu" in p:
            rows.append({"rate": "J", "legendre": rate_J(model, flow, n, p["nu"]).to_json(),
                         "variational": rate_variational_numeric(model, flow, n, p["nu"], "W").to_json()})
        if not rows:
            raise ConfigError("params.mu", None, "rate-eval needs params.mu or params.nu")
        agree = True
        for row in rows:
            a, b = [v["value"] for k, v in row.items() if k != "rate"]
            agree &= (a == b == "inf") or (a != "inf" and b != "inf" and abs(a - b) <= 1e-6 * max(1.0, abs(b)))
        return Report("rate-eval", rows, {"time": n, "methods_agree": bool(agree)}, bool(agree)), extra

    if cfg.kind == "covering":
        F = _function_class(p, model.size(n))
        grid = default_measure_grid(F.space.size)
        rows = []
        for eps in p["eps_grid"]:
            rows.append({"eps": eps,
                         "uniform_covering": uniform_covering_number(F, eps, grid, p["covering_method"]),
                         "covering_uniform_measure": covering_number(F, np.full(F.space.size, 1 / F.space.size),
                                                                     eps, p["covering_method"])})
        ent = entropy_integral(F, p["quadrature_step"], grid)
        counts = [r["uniform_covering"] for r in rows]
        ordered = sorted(zip(p["eps_grid"], counts))
        monotone = all(b[1] <= a[1] for a, b in zip(ordered, ordered[1:]))
        return Report("covering", rows, {"members": len(F), "entropy_integral": ent.to_json(),
                                         "nonincreasing_in_eps": monotone}, monotone), extra

    schedule = cfg.schedule
    f = _observable(p, model.size(n))
    truncated = model.truncated(n)
    batches = {N: replicate(truncated, N, p["R"], rng, workers=cfg.workers) for N in schedule.grid}
    if p["write_samples"]:
        flow = exact_flow(truncated)
        for N, batch in batches.items():
            path = out / f"samples_N{N}.csv"
            write_field_samples(path, batch, flow, {"f": f})
            extra.append(path)
    if cfg.kind == "mdp-sweep":
        report = mdp_sweep(model, f, schedule, p["R"], rng, n=n, batches=batches)
    elif cfg.kind == "remainder-tail":
        report = remainder_tail_check(model, f, schedule, p["R"], rng, eps=p["eps"], n=n, batches=batches)
    elif cfg.kind == "bracket-drift":
        report = bracket_drift_check(model, [f] * (n + 1), p["R"], schedule.grid, rng, batches=batches)
    elif cfg.kind == "equicontinuity":
        F = _function_class(p, model.size(n))
        report = equicontinuity_sweep(model, F, schedule, p["delta_grid"], p["y"], p["R"], rng, n=n,
                                      batches=batches)
    else:  # pragma: no cover - the schema rejects unknown kinds
        raise ConfigError("kind", cfg.kind, "unknown experiment kind")
    return report, extra


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(cfg: ExperimentConfig, out: Optional[Path] = None) -> tuple:
    """Run, write report.json / report.txt / manifest.json; returns (exit code, manifest)."""
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    report, extra = run_experiment(cfg, out)
    json_path, text_path = out / "report.json", out / "report.txt"
    summary = {"config_sha256": cfg.digest(), "seed": cfg.seed, **report.to_json()}
    json_path.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    text_path.write_text(report.to_text())
    outputs = [json_path, text_path, *extra]
    manifest = {
        "config_sha256": cfg.digest(),
        "tool_version": __version__,
        "seed": cfg.seed,
        "kind": cfg.kind,
        "wall_clock_seconds": time.perf_counter() - start,
        "checksums": {p.name: _sha256(p) for p in outputs},
        "passed": report.passed,
    }
    (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    code = EXIT_CHECK_FAILED if cfg.check and report.passed is False else EXIT_OK
    return code, manifest


def validate(path, seed: Optional[int] = None) -> dict:
    """Diagnostics without running: {'errors': [...], 'constants': {...}}."""
    diagnostics = {"errors": []}
    try:
        cfg = load_config(path, seed)
    except ConfigError as exc:
        diagnostics["errors"].append({"key": exc.key, "value": exc.value, "message": str(exc)})
        return diagnostics
    except PotentialOutOfRange as exc:
        diagnostics["errors"].append({"key": "model.potentials", "time": exc.time, "message": str(exc)})
        return diagnostics
    except (ModelValidationError, MeanFieldError, ValueError) as exc:
        diagnostics["errors"].append({"key": "model", "time": getattr(exc, "time", None), "message": str(exc)})
        return diagnostics
    try:
        cfg.schedule
    except ValueError as exc:
        diagnostics["errors"].append({"key": "params.N_grid", "value": cfg.params["N_grid"], "message": str(exc)})
    constants = fk_constants(cfg.model)
    diagnostics["constants"] = {"g": list(constants.g), "r_bound": list(constants.r_bound)}
    return diagnostics


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="meanfield-mdp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment")
    p_run.add_argument("config")
    p_run.add_argument("--workers", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config")
    p_val.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)

    if args.command == "validate":
        diagnostics = validate(args.config, args.seed)
        print(json.dumps(_jsonable(diagnostics), indent=2))
        return EXIT_INVALID if diagnostics["errors"] else EXIT_OK

    try:
        cfg = load_config(args.config, args.seed)
        cfg.schedule
    except (ConfigError, ModelValidationError, PotentialOutOfRange, MeanFieldError, ValueError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.workers is not None:
        if args.workers < 1:
            print(f"invalid config: workers={args.workers!r}: must be >= 1", file=sys.stderr)
            return EXIT_INVALID
        cfg.workers = args.workers
    code, manifest = run(cfg, Path(args.out) if args.out else None)
    print(json.dumps(_jsonable(manifest), indent=2))
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
