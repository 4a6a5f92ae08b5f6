#!/usr/bin/env python3
"""
LQ Team Toolkit - Main Entry Point

Batch front end: loads a problem file, runs the solvers, simulations and verification
checks, and writes CSV trajectories plus JSON reports into an output directory.

    python -m src.main.python.core.main solve --config problem.json [--mode centralized]
    python -m src.main.python.core.main simulate --config problem.json --seed 7 --n-paths 10000
    python -m src.main.python.core.main verify --config problem.json
    python -m src.main.python.core.main compare --config sweep.json
"""

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator

from ..models.problem import AnyProblem, NfProblem, scale_coupling
from ..models.schema import PicardOptions, ProblemFile, SweepOptions, VerifyOptions, load_problem
from ..services.centralized_solver import centralized_gain, solve_nf, solve_riccati_lqf
from ..services.decentralized_solver import (
    detuned_riccati, make_strategy, solve_dm_riccati_set, solve_mean_field,
)
from ..services.report_writer import ReportWriter
from ..services.simulation import cost_report, simulate_closed_loop
from ..services.verification import (
    VerificationReport, check_pbp_optimality, check_stationarity_closed_form,
    check_stationarity_regression, compare_information_structures, mean_field_residuals,
)
from ..utils.config import get_settings, setup_logger, validate_config
from ..utils.errors import ConfigurationError, LqTeamError, UsageError

logger = logging.getLogger(__name__)

COMMANDS = ("solve", "simulate", "verify", "compare")


class RunConfig(BaseModel):
    """Options of one CLI run: flags override the problem file's "run" section, which overrides Settings"""

    command: Literal["solve", "simulate", "verify", "compare"]
    config: Path
    out: Optional[Path] = None
    force: bool = False
    mode: Literal["centralized", "decentralized"] = "decentralized"
    seed: int = Field(ge=0)
    n_paths: int = Field(ge=1)
    scheme: Literal["euler", "rk4"] = "euler"
    picard: PicardOptions = PicardOptions()
    verify: VerifyOptions = VerifyOptions()
    sweep: SweepOptions = SweepOptions()

    @field_validator("config")
    @classmethod
    def _config_exists(cls, value: Path) -> Path:
        if not value.is_file():
            raise ValueError(f"problem file not found: {value}")
        return value

    def mean_field_options(self) -> Dict[str, Any]:
        return self.picard.model_dump()


def build_run_config(args: argparse.Namespace, problem_file: ProblemFile) -> RunConfig:
    settings = get_settings()
    run = problem_file.run

    def pick(flag, from_file, default):
        if flag is not None:
            return flag
        return from_file if from_file is not None else default

    try:
        return RunConfig(
            command=args.command, config=Path(args.config), out=Path(args.out) if args.out else None,
            force=args.force, mode=pick(args.mode, run.mode, "decentralized"),
            seed=pick(args.seed, run.seed, settings.MC_SEED),
            n_paths=pick(args.n_paths, run.n_paths, settings.MC_N_PATHS),
            scheme=pick(args.scheme, run.scheme, settings.MC_SCHEME),
            picard=run.picard, verify=run.verify, sweep=run.sweep)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid run options: {e}", kind="invalid_config") from e


def resolve_output_dir(run: RunConfig) -> Path:
    """--out (refused when non-empty unless --force) or a fresh timestamped directory"""
    if run.out is not None:
        if run.out.exists() and any(run.out.iterdir()) and not run.force:
            raise UsageError(f"Output directory {run.out} is not empty; pass --force to write into it")
        run.out.mkdir(parents=True, exist_ok=True)
        return run.out

    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = Path(get_settings().OUTPUT_DIR) / f"{run.command}-{stamp}"
    candidate, k = base, 1
    while candidate.exists():
        candidate = base.with_name(f"{base.name}-{k}")
        k += 1
    candidate.mkdir(parents=True)
    return candidate


def _has_nf_extras(problem: AnyProblem) -> bool:
    if not isinstance(problem, NfProblem):
        return False
    extras = [problem.b, problem.F, problem.E, problem.m_lin, *problem.kappa, *problem.s_coef]
    return any(t is not None and t.values.any() for t in extras) or (
        problem.N_T is not None and bool(problem.N_T.any()))


def _strategy(run: RunConfig, problem: AnyProblem):
    if run.mode == "centralized":
        return centralized_gain(solve_riccati_lqf(problem), problem)
    riccati = solve_dm_riccati_set(problem)
    mean_field = solve_mean_field(problem, riccati, **run.mean_field_options())
    return make_strategy(problem, riccati, mean_field)


def cmd_solve(run: RunConfig, problem: AnyProblem, writer: ReportWriter) -> Dict[str, Any]:
    """K / K^i, r^i, x_bar, u_bar as CSV and solver diagnostics as JSON"""
    files: List[str] = []
    if run.mode == "centralized":
        solution = solve_nf(problem) if _has_nf_extras(problem) else solve_riccati_lqf(problem)
        files.append(writer.write_centralized(solution).name)
        diagnostics = {"mode": "centralized", "nf": _has_nf_extras(problem)}
        if hasattr(solution, "residual_max"):
            diagnostics["riccati_residual"] = solution.residual_max
        else:
            diagnostics["inner_min_eigenvalue"] = solution.inner_min_eigenvalue
    else:
        riccati = solve_dm_riccati_set(problem)
        mean_field = solve_mean_field(problem, riccati, **run.mean_field_options())
        files.extend(writer.write_dm_riccati(riccati))
        files.append(writer.write_mean_field(mean_field).name)
        diagnostics = {
            "mode": "decentralized",
            "riccati_residuals": list(riccati.residuals),
            "mean_field": {
                "method": mean_field.method,
                "iterations": mean_field.iterations,
                "final_residual": mean_field.final_residual,
                "damping": mean_field.damping,
                "converged": mean_field.converged,
                "residual_history": list(mean_field.residual_history),
            },
            "certificate": mean_field_residuals(problem, riccati, mean_field),
        }
    files.append(writer.write_json(diagnostics, "diagnostics.json").name)
    return {"status": "success", "command": "solve", "mode": run.mode, "files": sorted(files)}


def cmd_simulate(run: RunConfig, problem: AnyProblem, writer: ReportWriter) -> Dict[str, Any]:
    """Ensemble CSV and a cost report with j_mc, j_se and j_exact"""
    strategy = _strategy(run, problem)
    ensemble = simulate_closed_loop(problem, strategy, n_paths=run.n_paths, seed=run.seed, scheme=run.scheme)
    report = cost_report(problem, strategy, ensemble)
    writer.write_ensemble(ensemble)
    document = dict(report.model_dump(), mode=run.mode, seed=run.seed, scheme=run.scheme,
                    mc_consistent=report.mc_consistent())
    writer.write_json(document, "cost_report.json")
    return {"status": "success", "command": "simulate", "mode": run.mode, "j_mc": report.j_mc,
            "j_se": report.j_se, "j_exact": report.j_exact, "files": ["cost_report.json", "ensemble.csv"]}


def cmd_verify(run: RunConfig, problem: AnyProblem, writer: ReportWriter) -> Dict[str, Any]:
    """Stationarity, person-by-person and cost-ordering checks; failed checks still write the report"""
    options = run.verify
    mean_field_info = None
    if run.mode == "centralized":
        strategy = centralized_gain(solve_riccati_lqf(problem), problem)
    else:
        riccati = solve_dm_riccati_set(problem)
        mean_field = solve_mean_field(problem, riccati, **run.mean_field_options())
        mean_field_info = mean_field_residuals(problem, riccati, mean_field)
        if options.detune is not None:
            logger.warning(f"Detuning K^{options.detune.dm} (shift={options.detune.shift}, "
                           f"scale={options.detune.scale})")
            riccati = detuned_riccati(riccati, options.detune.dm, options.detune.shift, options.detune.scale)
        strategy = make_strategy(problem, riccati, mean_field)

    n_paths = options.n_paths or get_settings().VERIFY_N_PATHS
    ensemble = simulate_closed_loop(problem, strategy, n_paths=n_paths, seed=run.seed, scheme=run.scheme)
    stationarity = check_stationarity_closed_form(problem, strategy, ensemble=ensemble)
    regression = check_stationarity_regression(problem, strategy, ensemble=ensemble) if options.regression else None
    pbp = check_pbp_optimality(problem, strategy, eps_list=options.eps_list, n_directions=options.n_directions,
                               seed=run.seed)
    comparison = compare_information_structures(problem, strict=False, **run.mean_field_options())

    passed = bool(stationarity.passed and pbp.passed and comparison.ordered)
    report = VerificationReport(stationarity=stationarity, regression=regression, pbp=pbp,
                                comparison=comparison, mean_field=mean_field_info, passed=passed)
    writer.write_json(report, "verification.json")
    return {"status": "success" if passed else "failed", "command": "verify", "mode": run.mode,
            "stationarity_residual": stationarity.max_residual, "pbp_max_first": pbp.max_abs_first,
            "cost_gap": comparison.gap, "files": ["verification.json"]}


def cmd_compare(run: RunConfig, problem: AnyProblem, writer: ReportWriter) -> Dict[str, Any]:
    """J_centralized vs J_decentralized across the coupling sweep of the run section"""
    sweep = run.sweep
    if not sweep.values:
        raise UsageError("compare needs a non-empty run.sweep.values list")

    rows = []
    for rho in sweep.values:
        logger.info(f"Comparing information structures at rho={rho}")
        scaled = scale_coupling(problem, rho, sweep.target)
        comparison = compare_information_structures(scaled, strict=True, rho=rho, **run.mean_field_options())
        rows.append(comparison.model_dump())

    table = pd.DataFrame(rows)[["rho", "j_centralized", "j_decentralized", "gap", "gap_relative"]]
    writer.write_frame(table, "comparison.csv")
    writer.write_json({"target": sweep.target, "rows": rows}, "comparison.json")
    return {"status": "success", "command": "compare", "rows": len(rows),
            "files": ["comparison.csv", "comparison.json"]}


HANDLERS = {"solve": cmd_solve, "simulate": cmd_simulate, "verify": cmd_verify, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lq-team", description="Centralized and decentralized LQ team solver")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="problem file (JSON)")
    parser.add_argument("--out", help="output directory (default: OUTPUT_DIR/<command>-<timestamp>)")
    parser.add_argument("--force", action="store_true", help="write into a non-empty --out directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--mode", choices=("centralized", "decentralized"))
    parser.add_argument("--n-paths", dest="n_paths", type=int)
    parser.add_argument("--scheme", choices=("euler", "rk4"))
    parser.add_argument("--log-level", dest="log_level", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    return parser


def _emit(document: Dict[str, Any], out_dir: Optional[Path], filename: Optional[str] = None) -> None:
    text = json.dumps(document, sort_keys=True, indent=2)
    print(text)
    if out_dir is not None and filename is not None:
        (out_dir / filename).write_text(text + "\n", encoding="utf-8")


def run_command(argv: Optional[List[str]] = None) -> Tuple[int, Dict[str, Any]]:
    """Parse, run and report; returns the exit code and the printed document"""
    args = build_parser().parse_args(argv)
    setup_logger(level=args.log_level)
    out_dir: Optional[Path] = None
    try:
        validate_config()
        problem, problem_file = load_problem(args.config)
        run = build_run_config(args, problem_file)
        out_dir = resolve_output_dir(run)
        writer = ReportWriter(get_settings(), out_dir)
        result = HANDLERS[run.command](run, problem, writer)
        result["out_dir"] = str(out_dir)
        _emit(result, None)
        return (0 if result["status"] == "success" else 1), result
    except LqTeamError as e:
        logger.error(f"{args.command} failed: {e}")
        document = e.to_dict()
        _emit(document, out_dir, "error.json")
        return e.exit_code, document
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly: {e}")
        document = {"kind": "internal_error", "message": str(e)}
        _emit(document, out_dir, "error.json")
        return 1, document


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    code, _ = run_command(argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
