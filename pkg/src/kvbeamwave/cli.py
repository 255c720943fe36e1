"""Command line entry point: flat key=value configs, one experiment per run.

    kvbeamwave run --config run.cfg [--output DIR] [--seed N]
    kvbeamwave validate --config run.cfg

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy

from . import __version__
from .assembly import AssemblyError, DampingCoefficient, DiscreteOperator, ModelKind, assemble
from .decay import DecayFitError, default_window, fit_power_law, graph_norm
from .mesh import Geometry, GeometryError, build_grid
from .resolvent import ResolventError, blowup_probe, bt_scan
from .spectral import EigensolveError, eigensolve, strong_stability_check
from .time_evolution import State, TimeStepError, project_initial, simulate, smooth_profile

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

EXPERIMENTS = ("simulate", "spectrum", "resolvent_scan", "blowup_probe")
NUMERIC_ERRORS = (AssemblyError, TimeStepError, EigensolveError, ResolventError,
                  DecayFitError, np.linalg.LinAlgError, ArithmeticError, RuntimeError)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def _pos_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise ValueError("must be a positive integer")
    return v


def _pos_float(s: str) -> float:
    v = float(s)
    if not (np.isfinite(v) and v > 0):
        raise ValueError("must be a positive number")
    return v


def _float(s: str) -> float:
    v = float(s)
    if not np.isfinite(v):
        raise ValueError("must be finite")
    return v


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("must be true or false")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return s
    return parse


def _table(s: str) -> tuple[tuple[float, float], ...]:
    # "x0:a0, x1:a1, ..."
    rows = []
    for item in s.split(","):
        x, _, v = item.partition(":")
        if not _:
            raise ValueError("rows must look like x:value")
        rows.append((float(x), float(v)))
    return tuple(rows)


def _count(s: str) -> int | None:
    return None if s.strip() == "all" else _pos_int(s)


# key -> (parser, default); keys in REQUIRED have no default
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "model": (_choice(*(m.value for m in ModelKind)), None),
    "experiment": (_choice(*EXPERIMENTS), "simulate"),
    "l": (_pos_float, 1.0),
    "L": (_pos_float, 2.0),
    "alpha": (_pos_float, 0.25),
    "beta": (_pos_float, 0.75),
    "damping": (_float, 1.0),
    "damping_table": (_table, None),
    "n_left": (_pos_int, 64),
    "n_right": (_pos_int, 64),
    "output_dir": (str, "output"),
    "seed": (int, 0),
    # simulate
    "dt": (_pos_float, None),
    "T": (_pos_float, 50.0),
    "initial": (_choice("smooth", "zero"), "smooth"),
    "record_every": (_pos_int, 1),
    "fit_decay": (_bool, True),
    # spectrum
    "count": (_count, None),
    "shift": (_float, 0.0),
    "residual_tol": (_pos_float, 1e-8),
    # resolvent_scan
    "lambda_min": (_pos_float, 1.0),
    "lambda_max": (_pos_float, 100.0),
    "lambda_count": (_pos_int, 50),
    "lambda_spacing": (_choice("log", "linear"), "log"),
    "refine_peaks": (_bool, False),
    "workers": (_pos_int, 1),
    # blowup_probe
    "n_max": (_pos_int, 5),
}
REQUIRED = ("model",)


@dataclass
class ExperimentConfig:
    model: ModelKind
    geometry: Geometry
    coefficient: DampingCoefficient
    mesh: tuple[int, int]
    experiment: str
    params: dict[str, Any]
    output_dir: Path
    seed: int
    raw: dict[str, str] = field(default_factory=dict)

    def digest(self) -> str:
        text = "\n".join(f"{k}={self.raw[k]}" for k in sorted(self.raw))
        return hashlib.sha256(text.encode()).hexdigest()


def _tokenize(text: str) -> tuple[dict[str, str], list[str]]:
    raw, problems = {}, []
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            problems.append(f"line {no}: expected key=value")
        elif key in raw:
            problems.append(f"line {no}: duplicate key {key!r}")
        else:
            raw[key] = value
    return raw, problems


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a config document; every violation is reported at once."""
    raw, problems = _tokenize(text)
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        problems.append("unknown keys: " + ", ".join(unknown))
    vals: dict[str, Any] = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            try:
                vals[key] = parse(raw[key])
            except ValueError as exc:
                problems.append(f"{key}={raw[key]!r}: {exc}")
        elif key in REQUIRED:
            problems.append(f"missing required key {key!r}")
        else:
            vals[key] = default

    geom = None
    if all(k in vals for k in ("l", "L", "alpha", "beta")):
        a, b, l_, L_ = vals["alpha"], vals["beta"], vals["l"], vals["L"]
        if not a < b:
            problems.append(f"alpha ({a}) must be smaller than beta ({b})")
        if not b < l_:
            problems.append(f"beta ({b}) must be smaller than l ({l_})")
        if not l_ < L_:
            problems.append(f"l ({l_}) must be smaller than L ({L_})")
        if a < b < l_ < L_:
            geom = Geometry(l_, L_, a, b)

    coeff = None
    if "damping" in raw and "damping_table" in raw:
        problems.append("give either damping or damping_table, not both")
    elif geom is not None and "damping" in vals and "damping_table" in vals:
        try:
            if vals["damping_table"] is not None:
                coeff = DampingCoefficient((geom.alpha, geom.beta), table=vals["damping_table"])
            else:
                coeff = DampingCoefficient.constant(vals["damping"], (geom.alpha, geom.beta))
        except AssemblyError as exc:
            problems.append(f"damping: {exc}")

    if vals.get("n_left") is not None and vals["n_left"] < 4:
        problems.append("n_left must be at least 4")
    if vals.get("n_right") is not None and vals["n_right"] < 2:
        problems.append("n_right must be at least 2")
    if "lambda_min" in vals and "lambda_max" in vals and not vals["lambda_min"] < vals["lambda_max"]:
        problems.append("lambda_min must be smaller than lambda_max")
    if geom is not None and not problems:
        try:
            build_grid(geom, vals["n_left"], vals["n_right"])
        except GeometryError as exc:
            problems.append(f"mesh: {exc}")

    if problems:
        raise ConfigError(problems)
    params = {k: vals[k] for k in vals if k not in
              ("model", "experiment", "l", "L", "alpha", "beta", "damping",
               "damping_table", "n_left", "n_right", "output_dir", "seed")}
    return ExperimentConfig(
        model=ModelKind(vals["model"]), geometry=geom, coefficient=coeff,
        mesh=(vals["n_left"], vals["n_right"]), experiment=vals["experiment"],
        params=params, output_dir=Path(vals["output_dir"]), seed=vals["seed"], raw=raw,
    )


# --- experiments ------------------------------------------------------------

def _dump(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _initial_state(op: DiscreteOperator, kind: str) -> State:
    if kind == "zero":
        return State.zeros(op)
    disp, slope = smooth_profile(op)
    s = project_initial(op, disp, displacement_slope=slope)
    return s.scaled(1.0 / graph_norm(op, s))


def _run_simulate(cfg, op, out, notes):
    p = cfg.params
    dt = p["dt"] if p["dt"] is not None else op.grid.element_lengths.min() ** 2 / 4
    s0 = _initial_state(op, p["initial"])
    trace = simulate(op, s0, dt, p["T"], record_every=p["record_every"])
    files = [trace.to_csv(out / "energy.csv")]
    notes["max_step_defect"] = float(trace.step_defect.max())
    if p["fit_decay"] and p["initial"] != "zero":
        try:
            win = default_window(op, trace)
            fit = fit_power_law(trace, win, graph_norm_initial=1.0)
            fit.to_json(out / "decay.json")
            files.append(out / "decay.json")
        except DecayFitError as exc:
            notes["warnings"].append(f"decay fit skipped: {exc}")
    return files


def _run_spectrum(cfg, op, out, notes):
    p = cfg.params
    rep = eigensolve(op, count=p["count"], shift=p["shift"], residual_tol=p["residual_tol"])
    rep.to_json(op, out / "spectrum.json")
    stab = strong_stability_check(rep)
    notes["abscissa"] = rep.abscissa
    notes["resolved_abscissa"] = stab.abscissa
    notes["strongly_stable"] = stab.passed
    if not rep.converged:
        notes["warnings"].append("some eigenpairs miss the residual threshold")
    return [out / "spectrum.json"]


def _run_scan(cfg, op, out, notes):
    p = cfg.params
    if p["lambda_spacing"] == "log":
        grid = np.geomspace(p["lambda_min"], p["lambda_max"], p["lambda_count"])
    else:
        grid = np.linspace(p["lambda_min"], p["lambda_max"], p["lambda_count"])
    res = bt_scan(op, grid, workers=p["workers"], seed=cfg.seed, refine_peaks=p["refine_peaks"])
    notes["max_bt"] = res.max_bt
    if any(not s.resolved for s in res.samples):
        notes["warnings"].append("scan includes frequencies above the resolution limit")
    if any(not s.converged for s in res.samples):
        notes["warnings"].append("some resolvent norms are unconverged lower bounds")
    return [res.to_csv(out / "resolvent_scan.csv")]


def _run_probe(cfg, op, out, notes):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = blowup_probe(op, cfg.params["n_max"])
    notes["warnings"].extend(str(w.message) for w in caught)
    notes["truncated"] = res.truncated
    return [res.to_csv(out / "blowup_probe.csv")]


RUNNERS = {
    "simulate": _run_simulate,
    "spectrum": _run_spectrum,
    "resolvent_scan": _run_scan,
    "blowup_probe": _run_probe,
}


def _manifest(cfg: ExperimentConfig, status: str, files: list[Path], notes: dict) -> dict:
    return {
        "schema_version": 1,
        "status": status,
        "experiment": cfg.experiment,
        "model": cfg.model.value,
        "config": dict(sorted(cfg.raw.items())),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": {
            "kvbeamwave": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
        },
        "files": sorted(f.name for f in files),
        "warnings": list(notes.get("warnings", [])),
        "summary": {k: v for k, v in notes.items() if k != "warnings"},
    }


def run(cfg: ExperimentConfig) -> int:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    notes: dict[str, Any] = {"warnings": []}
    # the manifest goes first so a crashed run is recognizable
    _dump(out / "manifest.json", _manifest(cfg, "running", [], notes))
    try:
        grid = build_grid(cfg.geometry, *cfg.mesh)
        op = assemble(cfg.model, grid, cfg.coefficient)
        files = RUNNERS[cfg.experiment](cfg, op, out, notes)
    except NUMERIC_ERRORS as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": EXIT_NUMERIC}
        _dump(out / "error.json", err)
        notes["warnings"].append(f"failed: {exc}")
        _dump(out / "manifest.json", _manifest(cfg, "failed", [out / "error.json"], notes))
        print(json.dumps(err), file=sys.stderr)
        return EXIT_NUMERIC
    _dump(out / "manifest.json", _manifest(cfg, "complete", files, notes))
    return EXIT_OK


# --- entry point ------------------------------------------------------------

def _load(path: str, overrides: dict[str, str]) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config: {exc}"]) from exc
    cfg = parse_config(text)
    if "output_dir" in overrides:
        cfg.output_dir = Path(overrides["output_dir"])
    if "seed" in overrides:
        cfg.seed = int(overrides["seed"])
        cfg.raw["seed"] = str(cfg.seed)
    return cfg


def _config_failure(exc: ConfigError, out: Path | None) -> int:
    err = {"error": "ConfigError", "problems": exc.problems, "exit_code": EXIT_CONFIG}
    print(json.dumps(err, indent=1), file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            _dump(out / "error.json", err)
        except OSError:
            pass
    return EXIT_CONFIG


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="kvbeamwave", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--output", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("--config", required=True)
    args = parser.parse_args(argv)

    overrides = {}
    if getattr(args, "output", None) is not None:
        overrides["output_dir"] = args.output
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    try:
        cfg = _load(args.config, overrides)
    except ConfigError as exc:
        out = Path(args.output) if getattr(args, "output", None) else None
        return _config_failure(exc, out)
    if args.command == "validate":
        print(json.dumps({"valid": True, "config_sha256": cfg.digest()}))
        return EXIT_OK
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
