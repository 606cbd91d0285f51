#!/usr/bin/env python3
"""
Covariance-on-covariance regression from the command line
Usage: python main.py <command> [options]

Commands:
- fit: fit components on a dataset directory and choose how many to keep by DfD
- bootstrap: percentile intervals for the coefficients of an earlier fit
- simulate: Monte-Carlo study on a preset or a scenario file
- dfd: deviation from diagonality for the loadings of an earlier fit
- baseline: CPCA-Reg on a dataset directory
- check: validate a dataset and report common-eigenvector shares

Every command accepts --config FILE.json with the same option names; command-line
flags win over the file. COCREG_SEED overrides the file's seed but not --seed.
"""
import argparse
import itertools
import json
import logging
import logging.config
import sys
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from baseline import best_pair, fit_cpca_reg
from components import dfd_trace, fit_sequence, projection_alignment, select_count
from config import COCREG_LOG_CONFIG, DEFAULT_SEED, env_seed, env_threads
from covariance import common_eigenvector_share, estimate_covariances
from errors import EXIT_INPUT_ERROR, EXIT_OK, CocregException, InputValidationError
from inference import asymptotic_covariance, bootstrap
from models import Cohort, ConstraintMode, CovariancePair, FitSequence, MonteCarloConfig, SimScenario, SolverConfig
from simgen import LONG_PRESETS, PRESETS, generate_cohort, get_preset, replicate_seed, run_monte_carlo
from solver import projected_log_variances
from storage import (
    check_dataset,
    load_cohort,
    load_fit,
    print_error,
    print_ok,
    print_warning,
    read_table,
    write_cohort,
    write_json,
    write_matrix,
    write_table,
)

logger = logging.getLogger("cocreg.cli")

PROG = "cocreg"
LOG_FORMAT = "%(levelname)-5.5s [%(name)s] %(message)s"
# Parsed arguments that are not run-config fields
CLI_ONLY_ARGS = {"command", "config", "verbose", "quiet"}


# RUN CONFIGS
class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    out: Path = Field(Path("."), description="Directory for every file the command writes")
    seed: Optional[int] = Field(None, ge=0, lt=2**64, description="Unsigned 64-bit seed")
    threads: Optional[int] = Field(None, description="Worker cap; -1 uses every core")

    @field_validator("threads")
    @classmethod
    def validate_threads(cls, v):
        if v == 0:
            raise ValueError("threads cannot be 0")
        return v

    @property
    def n_jobs(self) -> int:
        return self.threads if self.threads is not None else env_threads()


class SolverOptions(RunConfig):
    tol: float = Field(1e-8, gt=0, description="Relative objective-change threshold")
    max_iter: int = Field(500, ge=1)
    restarts: int = Field(20, ge=1, description="Random starts in addition to eigen starts")
    constraint: ConstraintMode = Field(ConstraintMode.IDENTITY, description="identity or pooled H matrices")
    eigen_init: bool = True
    eigen_starts: int = Field(10, ge=1, description="Leading pooled eigenvectors per block paired as starts")
    grad_tol: float = Field(1e-6, gt=0, description="Projected-gradient norm for convergence")
    rho: float = Field(2.0, gt=0, description="DfD threshold for the component count")

    def solver_config(self, seed: int, n_jobs: int) -> SolverConfig:
        return SolverConfig(
            tol=self.tol,
            max_iter=self.max_iter,
            n_restarts=self.restarts,
            seed=seed,
            constraint_mode=self.constraint,
            eigen_init=self.eigen_init,
            eigen_starts=self.eigen_starts,
            grad_tol=self.grad_tol,
            n_jobs=n_jobs,
        )


class FitRunConfig(SolverOptions):
    data: Path
    max_k: int = Field(1, ge=1, description="Components to fit")


class BootstrapRunConfig(RunConfig):
    data: Path
    fit: Path = Field(..., description="fit.json from the fit command")
    B: int = Field(500, ge=100, description="Bootstrap replicates")
    level: float = Field(0.95, gt=0, lt=1)
    draws: bool = Field(True, description="Also write draws.csv.gz")


class SimulateRunConfig(SolverOptions):
    preset: Optional[str] = None
    scenario: Optional[Path] = Field(None, description="JSON file with SimScenario fields")
    replicates: int = Field(100, ge=2)
    long: bool = Field(False, description="Allow long-running presets")
    grid: Optional[Dict[Literal["n", "u", "v", "nuv"], List[int]]] = None
    baseline: Optional[Literal["cpca-reg"]] = None
    bootstrap_B: int = Field(0, ge=0, description="Bootstrap replicates per dataset for coverage; 0 skips")
    level: float = Field(0.95, gt=0, lt=1)
    n_components: Optional[int] = Field(None, ge=1)
    variance_fraction: float = Field(0.85, gt=0, lt=1)
    streaming: Optional[bool] = Field(None, description="Defaults to on for long presets")
    export_data: bool = Field(False, description="Write the first replicate's cohort under data/")

    @model_validator(mode="after")
    def validate_source(self):
        if (self.preset is None) == (self.scenario is None):
            raise ValueError("Give exactly one of preset or scenario")
        if 0 < self.bootstrap_B < 100:
            raise ValueError("bootstrap_B must be 0 or at least 100")
        return self


class DfdRunConfig(RunConfig):
    data: Path
    loadings: Path = Field(..., description="loadings.csv from the fit command")
    rho: float = Field(2.0, gt=0)


class BaselineRunConfig(RunConfig):
    data: Path
    fraction: float = Field(0.85, gt=0, lt=1, description="Share of the trace the selected components must exceed")


class CheckRunConfig(RunConfig):
    data: Path
    threshold: float = Field(0.5, gt=0, lt=1, description="|correlation| cut for a shared eigenvector")


def _read_config_file(path: Path) -> dict:
    if not path.is_file():
        raise InputValidationError(f"Missing config file {path}")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputValidationError(f"Malformed config file {path}: {e}")
    if not isinstance(values, dict):
        raise InputValidationError("Config file must hold a JSON object")
    return values


def build_run_config(model_cls, args: argparse.Namespace) -> RunConfig:
    values = _read_config_file(args.config) if args.config is not None else {}
    seed = env_seed()
    if seed is not None:
        values["seed"] = seed
    flags = {k: v for k, v in vars(args).items() if k not in CLI_ONLY_ARGS}
    if "grid" in flags:
        flags["grid"] = dict(flags["grid"])
    values.update(flags)
    return model_cls.model_validate(values)


# REPORT TABLES
def coefficient_names(r: int) -> List[str]:
    return ["alpha"] + [f"beta_{j + 1}" for j in range(r)]


def loadings_frame(sequence: FitSequence) -> pd.DataFrame:
    rows = []
    for k, c in enumerate(sequence.components, start=1):
        for block, vec in (("gamma", c.gamma), ("theta", c.theta)):
            rows.extend({"component": k, "block": block, "index": j, "value": x} for j, x in enumerate(vec.tolist()))
    return pd.DataFrame(rows, columns=["component", "block", "index", "value"])


def read_loadings(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    frame = read_table(path)
    if set(frame.columns) != {"component", "block", "index", "value"}:
        raise InputValidationError(f"{path} must have columns component, block, index, value")
    bases = {}
    for block in ("gamma", "theta"):
        part = frame[frame["block"] == block]
        columns = [g.sort_values("index")["value"].to_numpy() for _, g in part.groupby("component", sort=True)]
        if not columns or len({c.size for c in columns}) != 1:
            raise InputValidationError(f"{path}: {block} loadings are missing or ragged")
        bases[block] = np.column_stack(columns)
    return bases["gamma"], bases["theta"]


def coefficients_frame(sequence: FitSequence) -> pd.DataFrame:
    rows = []
    for k, c in enumerate(sequence.components, start=1):
        alignment = projection_alignment(c)
        estimates = [c.alpha, *c.beta.tolist()]
        for name, value in zip(coefficient_names(c.beta.size), estimates):
            row = {"component": k, "coefficient": name, "estimate": value}
            if alignment is not None:
                row["projection_alignment"] = alignment
            rows.append(row)
    return pd.DataFrame(rows)


def scores_frame(sequence: FitSequence, cohort: Cohort, pairs: List[CovariancePair]) -> pd.DataFrame:
    """Per-subject projected log-variances, plot-ready"""
    W = cohort.covariates
    frames = []
    for k, c in enumerate(sequence.components, start=1):
        log_y, log_x = projected_log_variances(c.gamma, c.theta, pairs)
        frames.append(
            pd.DataFrame(
                {
                    "subject_id": cohort.subject_ids,
                    "component": k,
                    "log_outcome": log_y,
                    "log_predictor": log_x,
                    "fitted": c.alpha * log_x + W @ c.beta,
                    # Outcome with the non-intercept covariate effects removed
                    "adjusted_outcome": log_y - W[:, 1:] @ c.beta[1:],
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


# COMMANDS
def cmd_fit(config: FitRunConfig) -> None:
    cohort = load_cohort(config.data)
    pairs = estimate_covariances(cohort, n_jobs=config.n_jobs)
    seed = config.seed if config.seed is not None else DEFAULT_SEED
    solver = config.solver_config(seed, config.n_jobs)
    sequence = fit_sequence(cohort, solver, max_k=config.max_k, threshold=config.rho, pairs=pairs)

    write_json(config.out / "fit.json", sequence)
    write_table(config.out / "loadings.csv", loadings_frame(sequence))
    if sequence.components:
        # Headerless q x k and p x k bases, one column per component
        write_matrix(config.out / "gamma.csv", sequence.gamma_basis)
        write_matrix(config.out / "theta.csv", sequence.theta_basis)
    write_table(config.out / "coefficients.csv", coefficients_frame(sequence))
    write_table(config.out / "scores.csv", scores_frame(sequence, cohort, pairs))
    if sequence.status != "complete":
        print_warning(f"Deflation stopped after {len(sequence.components)} of {config.max_k} components")
    print_ok(f"Fitted {len(sequence.components)} components, selected k={sequence.selected_k} at DfD <= {config.rho}")


def cmd_bootstrap(config: BootstrapRunConfig) -> None:
    cohort = load_cohort(config.data)
    sequence = load_fit(config.fit)
    if not sequence.components:
        raise InputValidationError(f"{config.fit} holds no components")
    for c in sequence.components:
        if c.gamma.size != cohort.q or c.theta.size != cohort.p or c.beta.size != cohort.r:
            raise InputValidationError(f"{config.fit} does not match the dataset dimensions")

    pairs = estimate_covariances(cohort, n_jobs=config.n_jobs)
    seed = config.seed if config.seed is not None else DEFAULT_SEED
    names = coefficient_names(cohort.r)
    report, draw_frames = [], []
    for k, c in enumerate(sequence.components, start=1):
        result = bootstrap(cohort, c, B=config.B, level=config.level, seed=seed, n_jobs=config.n_jobs, pairs=pairs)
        try:
            standard_errors = asymptotic_covariance(c.gamma, c.theta, cohort, pairs=pairs).standard_errors.tolist()
        except CocregException as e:
            logger.warning("Component %d: no asymptotic standard errors: %s", k, e.detail)
            standard_errors = [None] * len(names)
        report.append(
            {
                "component": k,
                "projection_alignment": projection_alignment(c),
                "n_failed": result.n_failed,
                "coefficients": [
                    {"name": name, "estimate": est, "lower": lo, "upper": hi, "asymptotic_se": se}
                    for name, est, (lo, hi), se in zip(
                        names, result.estimate.tolist(), result.intervals, standard_errors
                    )
                ],
            }
        )
        frame = pd.DataFrame(result.draws, columns=names)
        frame.insert(0, "replicate", np.arange(1, config.B + 1))
        frame.insert(0, "component", k)
        draw_frames.append(frame)

    write_json(config.out / "ci.json", {"B": config.B, "level": config.level, "seed": seed, "components": report})
    if config.draws:
        write_table(config.out / "draws.csv.gz", pd.concat(draw_frames, ignore_index=True))
    print_ok(f"Bootstrap intervals for {len(report)} components at level {config.level}")


def _load_scenario(path: Path) -> SimScenario:
    if not path.is_file():
        raise InputValidationError(f"Missing scenario file {path}")
    return SimScenario.model_validate_json(path.read_text())


def grid_scenarios(base: SimScenario, grid: Optional[Dict[str, List[int]]]) -> List[SimScenario]:
    if not grid:
        return [base]
    keys = list(grid)
    scenarios = []
    for values in itertools.product(*(grid[k] for k in keys)):
        update = {}
        for key, value in zip(keys, values):
            update.update({"n": value, "u": value, "v": value} if key == "nuv" else {key: value})
        scenarios.append(SimScenario.model_validate({**base.model_dump(), **update}))
    return scenarios


def cmd_simulate(config: SimulateRunConfig) -> None:
    if config.preset is not None:
        base = get_preset(config.preset, long=config.long)
    else:
        base = _load_scenario(config.scenario)
    streaming = config.streaming if config.streaming is not None else base.name in LONG_PRESETS
    seed = config.seed if config.seed is not None else base.seed
    mc = MonteCarloConfig(
        solver=config.solver_config(seed, 1),
        n_components=config.n_components,
        threshold=config.rho,
        bootstrap_B=config.bootstrap_B,
        level=config.level,
        baseline=config.baseline is not None,
        variance_fraction=config.variance_fraction,
        streaming=streaming,
        n_jobs=config.n_jobs,
    )
    reports = []
    for scenario in grid_scenarios(base, config.grid):
        logger.info("Running %s at (n, u, v)=(%d, %d, %d)", scenario.name, scenario.n, scenario.u, scenario.v)
        reports.append(run_monte_carlo(scenario, mc, replicates=config.replicates, seed=seed))

    write_table(config.out / "metrics.csv", pd.concat([r.to_frame() for r in reports], ignore_index=True))
    write_json(config.out / "metrics.json", {"seed": seed, "reports": [r.model_dump(mode="json") for r in reports]})
    if config.export_data:
        cohort, _ = generate_cohort(reports[0].scenario, replicate_seed(seed, 0))
        write_cohort(cohort, config.out / "data")
    failed = sum(r.n_failed for r in reports)
    if failed:
        print_warning(f"{failed} replicates failed and were left out of the metrics")
    print_ok(f"Simulated {len(reports)} scenario(s) x {config.replicates} replicates")


def cmd_dfd(config: DfdRunConfig) -> None:
    cohort = load_cohort(config.data)
    pairs = estimate_covariances(cohort, n_jobs=config.n_jobs)
    gamma_basis, theta_basis = read_loadings(config.loadings)
    trace = dfd_trace(gamma_basis, theta_basis, pairs)
    selected = select_count(trace, config.rho)
    write_json(
        config.out / "dfd.json",
        {"threshold": config.rho, "selected_k": selected, "trace": [{"k": k, "dfd": v} for k, v in trace]},
    )
    print_ok(f"DfD evaluated for k=1..{len(trace)}, selected k={selected}")


def cmd_baseline(config: BaselineRunConfig) -> None:
    cohort = load_cohort(config.data)
    pairs = estimate_covariances(cohort, n_jobs=config.n_jobs)
    model = fit_cpca_reg(pairs, cohort.covariates, fraction=config.fraction, n_jobs=config.n_jobs)
    names = coefficient_names(cohort.r)
    rows = []
    for reg in model.regressions:
        row = {"x_index": reg.x_index, "y_index": reg.y_index, "r_squared": reg.r_squared, "failed": reg.failed}
        estimates = [reg.alpha, *reg.beta] if not reg.failed else [None] * len(names)
        row.update(zip(names, estimates))
        rows.append(row)
    write_json(config.out / "baseline.json", model)
    write_table(config.out / "baseline.csv", pd.DataFrame(rows))
    best = best_pair(model)
    if best is None:
        print_warning("No CPCA-Reg pair regression succeeded")
    else:
        print_ok(f"CPCA-Reg best pair (x={best.x_index}, y={best.y_index}) with R² {best.r_squared:.4f}")


def cmd_check(config: CheckRunConfig) -> None:
    if not check_dataset(config.data):
        raise InputValidationError(f"{config.data} is not a valid dataset")
    cohort = load_cohort(config.data)
    pairs = estimate_covariances(cohort, n_jobs=config.n_jobs)
    predictor = common_eigenvector_share([c.delta_hat for c in pairs], [c.u_i for c in pairs], config.threshold)
    outcome = common_eigenvector_share([c.sigma_hat for c in pairs], [c.v_i for c in pairs], config.threshold)
    write_json(
        config.out / "check.json",
        {
            "n": cohort.n,
            "p": cohort.p,
            "q": cohort.q,
            "r": cohort.r,
            "threshold": config.threshold,
            "predictor_share": predictor.tolist(),
            "outcome_share": outcome.tolist(),
        },
    )
    print_ok(f"Leading eigenvector shared by {predictor[0]:.0%} (predictor) and {outcome[0]:.0%} (outcome) of subjects")


COMMANDS = {
    "fit": (FitRunConfig, cmd_fit),
    "bootstrap": (BootstrapRunConfig, cmd_bootstrap),
    "simulate": (SimulateRunConfig, cmd_simulate),
    "dfd": (DfdRunConfig, cmd_dfd),
    "baseline": (BaselineRunConfig, cmd_baseline),
    "check": (CheckRunConfig, cmd_check),
}


# PARSER
def _grid_item(text: str) -> Tuple[str, List[int]]:
    key, sep, values = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("expected KEY=V1,V2,... with KEY one of n, u, v, nuv")
    try:
        return key.strip(), [int(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid values must be integers: {values!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, default=None, help="JSON file with option defaults")
    common.add_argument("--out", type=Path, help="Output directory (default: current directory)")
    common.add_argument("--seed", type=int, help="Seed; overrides COCREG_SEED and the config file")
    common.add_argument("--threads", type=int, help="Worker cap, -1 for all cores (default: COCREG_THREADS or -1)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="More logging")
    common.add_argument("-q", "--quiet", action="count", default=0, help="Less logging")

    solver = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    solver.add_argument("--tol", type=float, help="Relative objective-change threshold (default 1e-8)")
    solver.add_argument("--max-iter", type=int, help="Coordinate-descent cycles per start (default 500)")
    solver.add_argument("--restarts", type=int, help="Random starts besides the eigen starts (default 20)")
    solver.add_argument("--constraint", choices=[m.value for m in ConstraintMode], help="Normalization matrices")
    solver.add_argument("--no-eigen-init", dest="eigen_init", action="store_false", help="Random starts only")
    solver.add_argument("--eigen-starts", type=int, help="Pooled eigenvectors per block paired as starts (default 10)")
    solver.add_argument("--grad-tol", type=float, help="Projected-gradient norm for convergence (default 1e-6)")
    solver.add_argument("--rho", type=float, help="DfD threshold for the component count (default 2)")

    parser = argparse.ArgumentParser(prog=PROG, description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, parents) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=parents, help=help_text, argument_default=argparse.SUPPRESS)

    p = add("fit", "Fit components on a dataset", [common, solver])
    p.add_argument("--data", type=Path, help="Dataset directory with manifest.json")
    p.add_argument("--max-k", type=int, help="Components to fit (default 1)")

    p = add("bootstrap", "Bootstrap intervals for a fitted model", [common])
    p.add_argument("--data", type=Path, help="Dataset directory with manifest.json")
    p.add_argument("--fit", type=Path, help="fit.json from the fit command")
    p.add_argument("-B", dest="B", type=int, help="Bootstrap replicates (default 500)")
    p.add_argument("--level", type=float, help="Confidence level (default 0.95)")
    p.add_argument("--no-draws", dest="draws", action="store_false", help="Skip draws.csv.gz")

    p = add("simulate", "Monte-Carlo study", [common, solver])
    p.add_argument("--preset", choices=sorted(PRESETS), help="Built-in scenario")
    p.add_argument("--scenario", type=Path, help="Scenario JSON file")
    p.add_argument("--replicates", type=int, help="Datasets per scenario (default 100)")
    p.add_argument("--long", action="store_true", help="Allow long-running presets")
    p.add_argument("--grid", type=_grid_item, action="append", help="KEY=V1,V2,... with KEY in n, u, v, nuv")
    p.add_argument("--baseline", choices=["cpca-reg"], help="Also score a baseline method")
    p.add_argument("--bootstrap-B", dest="bootstrap_B", type=int, help="Bootstrap replicates for coverage (0 skips)")
    p.add_argument("--level", type=float, help="Coverage level (default 0.95)")
    p.add_argument("--n-components", type=int, help="Components to fit (default: planted count)")
    p.add_argument("--variance-fraction", type=float, help="CPCA-Reg trace share (default 0.85)")
    p.add_argument("--streaming", action=argparse.BooleanOptionalAction, help="Keep only covariance pairs")
    p.add_argument("--export-data", action="store_true", help="Write the first replicate's cohort")

    p = add("dfd", "Deviation from diagonality for fitted loadings", [common])
    p.add_argument("--data", type=Path, help="Dataset directory with manifest.json")
    p.add_argument("--loadings", type=Path, help="loadings.csv from the fit command")
    p.add_argument("--rho", type=float, help="DfD threshold (default 2)")

    p = add("baseline", "CPCA-Reg on a dataset", [common])
    p.add_argument("--data", type=Path, help="Dataset directory with manifest.json")
    p.add_argument("--fraction", type=float, help="Trace share for component selection (default 0.85)")

    p = add("check", "Validate a dataset and report shared eigenvectors", [common])
    p.add_argument("--data", type=Path, help="Dataset directory with manifest.json")
    p.add_argument("--threshold", type=float, help="|correlation| cut (default 0.5)")
    return parser


def setup_logging(verbosity: int) -> None:
    if Path(COCREG_LOG_CONFIG).is_file():
        logging.config.fileConfig(COCREG_LOG_CONFIG, disable_existing_loggers=False)
    else:
        logging.basicConfig(format=LOG_FORMAT)
        logging.getLogger("cocreg").setLevel(logging.INFO)
    if verbosity > 0:
        logging.getLogger("cocreg").setLevel(logging.DEBUG)
    elif verbosity < 0:
        logging.getLogger("cocreg").setLevel(logging.WARNING)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose - args.quiet)
    model_cls, handler = COMMANDS[args.command]
    try:
        config = build_run_config(model_cls, args)
        config.out.mkdir(parents=True, exist_ok=True)
        handler(config)
    except ValidationError as e:
        print_error(f"Invalid options for {args.command}")
        print(e, file=sys.stderr)
        return EXIT_INPUT_ERROR
    except CocregException as e:
        print_error(e.detail)
        logger.debug("%s failed", args.command, exc_info=True)
        return e.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
