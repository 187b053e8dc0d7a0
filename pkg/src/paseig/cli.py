"""Command-line front end: config parsing, experiment runs, CSV/JSON output."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .driver import (
    DEFAULT_DENSE_CAP,
    ConfigError,
    DenseCapError,
    RunReport,
    SolverConfig,
    analytic_eigenvalues,
    oracle_fine_solve,
    prepare,
    solve,
)
from .linalg import NumericalError
from .mesh import MeshError
from .multigrid import MgConfig

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

DENSE_CAP_ENV = "PASEIG_DENSE_CAP"
REFERENCES = ("analytic", "oracle", "none")
SWEEPS = ("none", "levels", "correction_steps")
ANALYTIC_PROBLEMS = ("laplace2d", "laplace3d", "harmonic_box")

CSV_SCHEMAS = {
    "eigenvalues.csv": ["sweep_value", "index", "eigenvalue", "reference", "abs_error"],
    "convergence.csv": ["sweep_value", "index", "level", "iteration", "eigenvalue", "residual"],
    "orthogonality.csv": ["sweep_value", "max_normalized_inner_product"],
    "timing.csv": ["sweep_value", "index", "wall_seconds", "matvecs", "matvec_rows", "cg_steps"],
}

# --quick preset; see README for why divisions differs from the 4-division grid.
QUICK_PRESET = {"problem": "laplace2d", "divisions": 16, "levels": 3, "eigenpairs": 10}


class SpecError(ValueError):
    """Configuration error carrying an optional line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class ExperimentSpec:
    solver: SolverConfig
    reference: str = "analytic"
    sweep: str = "none"
    sweep_values: tuple[int, ...] = ()
    output: str = "paseig-output"
    seed: int = 0

    def validate(self) -> None:
        try:
            self.solver.validate()
        except ConfigError as exc:
            raise SpecError(str(exc)) from exc
        if self.reference not in REFERENCES:
            raise SpecError(f"reference must be one of {', '.join(REFERENCES)}")
        if self.sweep not in SWEEPS:
            raise SpecError(f"sweep must be one of {', '.join(SWEEPS)}")
        if self.reference == "analytic" and self.solver.problem not in ANALYTIC_PROBLEMS:
            raise SpecError(f"analytic reference is unavailable for {self.solver.problem}")
        if self.sweep != "none" and not self.sweep_values:
            raise SpecError("sweep_values must be given when sweep is not none")
        if self.sweep == "levels" and min(self.sweep_values) < 1:
            raise SpecError("level sweep values must be >= 1")
        if self.sweep == "correction_steps" and min(self.sweep_values) < 1:
            raise SpecError("correction_steps sweep values must be >= 1")
        for cfg in self.configs():
            try:
                cfg.validate()
            except ConfigError as exc:
                raise SpecError(f"sweep value: {exc}") from exc
            if self.reference == "oracle":
                finest = _finest_dofs(cfg)
                if finest > cfg.dense_cap:
                    raise SpecError(
                        f"oracle reference needs the finest level ({finest} DOFs) under the dense cap {cfg.dense_cap}"
                    )

    def configs(self) -> list[SolverConfig]:
        if self.sweep == "none":
            return [self.solver]
        key = "levels" if self.sweep == "levels" else "finest_steps"
        return [dataclasses.replace(self.solver, **{key: int(v)}) for v in self.sweep_values]

    def sweep_labels(self) -> list[int]:
        if self.sweep == "none":
            return [self.solver.finest_steps]
        return [int(v) for v in self.sweep_values]


def _finest_dofs(cfg: SolverConfig) -> int:
    return (cfg.divisions * 2 ** (cfg.levels - 1) - 1) ** cfg.dim


def _parse_int(raw: str) -> int:
    return int(raw)


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_box(raw: str) -> tuple:
    """``lo,hi; lo,hi[; lo,hi]``"""
    axes = []
    for part in raw.split(";"):
        bounds = [float(x) for x in part.split(",")]
        if len(bounds) != 2:
            raise ValueError(f"each box axis needs 'lo,hi', got {part.strip()!r}")
        axes.append(tuple(bounds))
    return tuple(axes)


def _parse_int_list(raw: str) -> tuple[int, ...]:
    """Comma list, or an inclusive range ``a..b``."""
    raw = raw.strip()
    if ".." in raw:
        lo, hi = (int(x) for x in raw.split(".."))
        if hi < lo:
            raise ValueError(f"empty range {raw!r}")
        return tuple(range(lo, hi + 1))
    return tuple(int(x) for x in raw.split(","))


def _parse_choice(choices):
    def parse(raw: str) -> str:
        if raw not in choices:
            raise ValueError(f"expected one of {', '.join(choices)}, got {raw!r}")
        return raw

    return parse


# key -> (parser, target). Targets: "solver", "mg", "experiment"; "beta" is fixed.
KEYS = {
    "problem": (str, "solver"),
    "box": (_parse_box, "solver"),
    "divisions": (_parse_int, "solver"),
    "levels": (_parse_int, "solver"),
    "eigenpairs": (_parse_int, "solver"),
    "coarse_steps": (_parse_int, "solver"),
    "finest_steps": (_parse_int, "solver"),
    "workers": (_parse_int, "solver"),
    "max_dofs": (_parse_int, "solver"),
    "dense_cap": (_parse_int, "solver"),
    "first_level": (_parse_int, "solver"),
    "shift_invert": (_parse_bool, "solver"),
    "pre_smooth": (_parse_int, "mg"),
    "post_smooth": (_parse_int, "mg"),
    "cycles": (_parse_int, "mg"),
    "coarsest_tol": (float, "mg"),
    "beta": (_parse_int, "beta"),
    "reference": (_parse_choice(REFERENCES), "experiment"),
    "sweep": (_parse_choice(SWEEPS), "experiment"),
    "sweep_values": (_parse_int_list, "experiment"),
    "output": (str, "experiment"),
    "seed": (_parse_int, "experiment"),
}
_MG_FIELDS = {"pre_smooth": "pre_smooth_steps", "post_smooth": "post_smooth_steps",
              "cycles": "cycles_per_solve", "coarsest_tol": "coarsest_rel_tol"}
# Keys whose value may trigger a config-level error; used to point at a line.
_SOLVER_KEY_FOR_ERROR = {
    "eigenpairs": "eigenpairs", "divisions": "divisions", "levels": "levels",
    "coarse_steps": "coarse_steps", "finest_steps": "finest_steps", "problem": "problem",
    "box": "box", "cycles": "cycles", "workers": "workers", "first_level": "first_level",
    "shift_invert": "shift_invert", "dense_cap": "dense", "reference": "reference",
}


def env_dense_cap() -> int:
    raw = os.environ.get(DENSE_CAP_ENV)
    if raw is None:
        return DEFAULT_DENSE_CAP
    try:
        cap = int(raw)
    except ValueError:
        raise SpecError(f"{DENSE_CAP_ENV} must be an integer, got {raw!r}") from None
    if cap < 1:
        raise SpecError(f"{DENSE_CAP_ENV} must be positive")
    return cap


def parse_config(text: str, overrides: dict | None = None) -> ExperimentSpec:
    """Parse ``key = value`` lines into a validated :class:`ExperimentSpec`.

    ``overrides`` are applied after the file, before validation.
    """
    values: dict[str, tuple[object, int | None]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise SpecError(f"expected 'key = value', got {stripped!r}", lineno)
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in KEYS:
            raise SpecError(f"unknown key {key!r}", lineno)
        if key in values:
            raise SpecError(f"duplicate key {key!r}", lineno)
        parser, _ = KEYS[key]
        try:
            values[key] = (parser(raw), lineno)
        except ValueError as exc:
            raise SpecError(f"invalid value for {key}: {exc}", lineno) from None
    for key, value in (overrides or {}).items():
        values[key] = (value, None)

    if "beta" in values and values["beta"][0] != 2:
        raise SpecError("only beta = 2 (red refinement) is supported", values["beta"][1])

    solver_kw = {"dense_cap": env_dense_cap()}
    mg_kw, spec_kw = {}, {}
    for key, (value, _) in values.items():
        target = KEYS[key][1]
        if target == "solver":
            solver_kw[key] = value
        elif target == "mg":
            mg_kw[_MG_FIELDS[key]] = value
        elif target == "experiment":
            spec_kw[key] = value
    try:
        mg = MgConfig(**mg_kw)
    except ValueError as exc:
        raise SpecError(str(exc), _first_line(values, _MG_FIELDS)) from None
    spec = ExperimentSpec(solver=SolverConfig(mg=mg, **solver_kw), **spec_kw)
    if "reference" not in values and spec.solver.problem not in ANALYTIC_PROBLEMS:
        spec.reference = "none"
    try:
        spec.validate()
    except SpecError as exc:
        line = _blame_line(str(exc), values)
        raise SpecError(str(exc), line) from None
    return spec


def _first_line(values, keys) -> int | None:
    lines = [values[k][1] for k in keys if k in values and values[k][1] is not None]
    return min(lines) if lines else None


def _blame_line(message: str, values) -> int | None:
    for key, needle in _SOLVER_KEY_FOR_ERROR.items():
        if needle in message and key in values:
            return values[key][1]
    return None


def fmt(x) -> str:
    """17-significant-digit round-trip formatting."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def _reference(spec: ExperimentSpec, cfg: SolverConfig, setup) -> np.ndarray | None:
    m = cfg.eigenpairs
    if spec.reference == "analytic":
        return analytic_eigenvalues(cfg.problem, cfg.box, m)
    if spec.reference == "oracle":
        return oracle_fine_solve(setup.ops, setup.finest, m, cfg.dense_cap).eigenvalues
    return None


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _config_echo(cfg: SolverConfig) -> dict:
    echo = dataclasses.asdict(cfg)
    echo["box"] = [list(axis) for axis in cfg.box]
    return echo


def run_experiment(spec: ExperimentSpec, workers: int | None = None) -> int:
    """Run every configuration of the sweep and write the report files.

    Files are staged in a scratch directory inside the output directory and
    moved into place only when the whole run succeeds.
    """
    out = Path(spec.output)
    out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".partial-", dir=out))
    try:
        code = _run_into(spec, stage, workers)
        if code == EXIT_OK:
            for name in list(CSV_SCHEMAS) + ["report.json"]:
                os.replace(stage / name, out / name)
        return code
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def _run_into(spec: ExperimentSpec, stage: Path, workers: int | None) -> int:
    rows = {name: [] for name in CSV_SCHEMAS}
    runs = []
    for label, cfg in zip(spec.sweep_labels(), spec.configs()):
        try:
            setup = prepare(cfg)
            report: RunReport = solve(cfg, workers=workers, setup=setup, diagnostics=True, seed=spec.seed)
            reference = _reference(spec, cfg, setup)
        except (NumericalError, DenseCapError) as exc:
            log.error("numerical failure: %s", exc)
            return EXIT_NUMERICAL
        if report.failed:
            for p in report.pairs:
                if p.failed:
                    log.error("eigenpair %d failed: %s", p.index, p.error)
            return EXIT_NUMERICAL

        for j, p in enumerate(report.pairs):
            ref = None if reference is None else float(reference[j])
            err = None if ref is None else abs(p.eigenvalue - ref)
            rows["eigenvalues.csv"].append([label, j, fmt(p.eigenvalue), fmt(ref), fmt(err)])
            for level, it, lam, res in p.history:
                rows["convergence.csv"].append([label, j, level, it, fmt(lam), fmt(res)])
            rows["timing.csv"].append([label, j, fmt(p.wall_time), p.counter.matvecs,
                                       p.counter.matvec_rows, p.counter.cg_steps])
        rows["orthogonality.csv"].append([label, fmt(report.orthogonality)])
        runs.append({
            "sweep_value": label,
            "finest_dofs": report.finest_dofs,
            "theta_hat": report.theta,
            "gamma_hat": report.gamma,
            "gamma_condition": None if report.gamma is None
            else bool(report.gamma ** cfg.coarse_steps * 2 < 1.0),
            "orthogonality": report.orthogonality,
            "eigenvalues": [p.eigenvalue for p in report.pairs],
        })

    for name, header in CSV_SCHEMAS.items():
        _write_rows(stage / name, header, rows[name])
    summary = {
        "config": _config_echo(spec.solver),
        "reference": spec.reference,
        "sweep": spec.sweep,
        "sweep_values": list(spec.sweep_labels()),
        "seed": spec.seed,
        "runs": runs,
    }
    (stage / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


HELP_EPILOG = "output files (all floats use 17 significant digits):\n" + "\n".join(
    f"  {name}: {', '.join(cols)}" for name, cols in CSV_SCHEMAS.items()
) + (
    "\n  report.json: config echo, reference mode, sweep, and per run theta_hat,"
    " gamma_hat, orthogonality, eigenvalues"
    "\n\nconfig keys: " + ", ".join(KEYS) +
    f"\n\nenvironment: {DENSE_CAP_ENV} overrides the dense solver size cap (default {DEFAULT_DENSE_CAP})"
    "\nexit codes: 0 success, 2 configuration error, 3 numerical failure"
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paseig", description="Eigenwise parallel augmented subspace eigensolver.",
        epilog=HELP_EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment", epilog=HELP_EPILOG,
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    run.add_argument("--config", help="config file (optional with --quick)")
    run.add_argument("--output", help="output directory (overrides the config)")
    run.add_argument("--workers", type=int, help="worker threads (default: min(m, CPUs))")
    run.add_argument("--quick", action="store_true",
                     help="small laplace2d preset that finishes in seconds")
    check = sub.add_parser("check", help="validate a config without running")
    check.add_argument("--config", required=True)
    return parser


def _load(path: str | None, overrides: dict) -> ExperimentSpec:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise SpecError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    if args.command == "run":
        if args.quick:
            overrides.update(QUICK_PRESET)
        elif args.config is None:
            print("error: run needs --config or --quick", file=sys.stderr)
            return EXIT_CONFIG
        if args.output is not None:
            overrides["output"] = args.output
        if args.workers is not None:
            if args.workers < 1:
                print("error: --workers must be >= 1", file=sys.stderr)
                return EXIT_CONFIG
            overrides["workers"] = args.workers
    try:
        spec = _load(args.config, overrides)
    except (SpecError, MeshError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "check":
        print("config ok")
        return EXIT_OK
    try:
        code = run_experiment(spec)
    except (SpecError, MeshError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if code == EXIT_OK:
        print(f"wrote results to {spec.output}")
    else:
        print("numerical failure; no results written", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
