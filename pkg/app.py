"""
Command-line entry point.

    python app.py check      problems/linear_flat.qp
    python app.py solve      problems/linear_flat.qp --seed 7
    python app.py verify     problems/linear_flat.qp --window 100
    python app.py dichotomy  problems/linear_flat.qp
    python app.py all        problems/linear_flat.qp --out runs/flat --format both

Exit codes: 0 every verdict passed, 2 a verdict failed, 3 inconclusive, 1 execution error.
"""

import argparse
import sys
import time
from dataclasses import asdict
from typing import Dict, Optional, Tuple

import pandas as pd

from analysis.dichotomy import analyze_solution
from config import cfg
from core.conditions import ConditionReport, Verdict, check_all
from core.errors import QPError
from core.problem import ProblemSpec
from core.torusfield import FourierField, resize
from problems.loader import load_problem, problem_hash
from solver.engine import GalerkinConfig, SolveReport, minimize
from utils import artifacts
from utils.logger import logger
from verification.residuals import d1_distance, uniqueness_probe, verify_solution

VERSION = "0.3.0"
COMMANDS = ("check", "solve", "verify", "dichotomy", "all")

EXIT_PASS = 0
EXIT_ERROR = 1
EXIT_FAIL = 2
EXIT_INCONCLUSIVE = 3

RESIDUAL_TOL = 1e-6
SPEED_DRIFT_TOL = 1e-3
UNIQUENESS_TOL = 1e-6
UNIQUENESS_TRIALS = 5


def run_settings(problem: ProblemSpec, seed=None, trunc=None, grid=None, window=None) -> Dict:
    """CLI flag > problem-file config section > environment"""
    settings = {k: v for k, v in asdict(cfg).items() if k not in ("log_dir", "out_dir")}
    settings.update(problem.overrides)
    flags = {"seed": seed, "trunc": trunc, "grid": grid, "window": window}
    settings.update({k: v for k, v in flags.items() if v is not None})
    return settings


def galerkin_config(settings: Dict) -> GalerkinConfig:
    return GalerkinConfig(
        N=int(settings["trunc"]),
        P=int(settings["grid"]),
        pad_factor=int(settings["pad_factor"]),
        g_tol=float(settings["g_tol"]),
        max_iter=int(settings["max_iter"]),
        history=int(settings["lbfgs_history"]),
        armijo_c1=float(settings["armijo_c1"]),
        backtrack=float(settings["backtrack"]),
        max_backtracks=int(settings["max_backtracks"]),
        barrier_beta0=float(settings["barrier_beta0"]),
        barrier_factor=float(settings["barrier_factor"]),
        barrier_min=float(settings["barrier_min"]),
        tail_ratio=float(settings["tail_ratio"]),
    )


def conditions_frame(report: ConditionReport) -> pd.DataFrame:
    rows = []
    for name, frag in report.fragments.items():
        row = {"fragment": name, "verdict": frag.verdict.value, "margin": frag.margin, "samples": frag.samples}
        for j, value in enumerate(frag.argmin or []):
            row[f"argmin{j + 1}"] = value
        rows.append(row)
    return pd.DataFrame(rows)


def _verify_verdict(section: Dict, conditions_failed: bool) -> Verdict:
    residual_ok = section["torus_l2"] <= RESIDUAL_TOL and section["line_sup"] <= RESIDUAL_TOL
    speed_ok = abs(section["sup_speed_2T"] - section["sup_speed"]) <= SPEED_DRIFT_TOL
    verdict = Verdict.PASS if residual_ok and speed_ok else Verdict.FAIL
    probe = section.get("uniqueness")
    if probe and not conditions_failed:
        if probe["max_coeff_distance"] > UNIQUENESS_TOL:
            verdict = Verdict.FAIL
        elif probe["inconclusive"] and verdict == Verdict.PASS:
            verdict = Verdict.INCONCLUSIVE
    return verdict


def exit_code(verdicts: Dict[str, Verdict]) -> int:
    worst = Verdict.worst(verdicts.values())
    if worst == Verdict.FAIL:
        return EXIT_FAIL
    if worst == Verdict.INCONCLUSIVE:
        return EXIT_INCONCLUSIVE
    return EXIT_PASS


class Run:
    """One CLI invocation: stages run in order and fill the report"""

    def __init__(self, command: str, problem: ProblemSpec, settings: Dict, out_dir: str, fmt: str):
        self.command = command
        self.problem = problem
        self.settings = settings
        self.out_dir = out_dir
        self.fmt = fmt
        self.hash = problem_hash(problem)
        self.seed = int(settings["seed"])
        self.config = galerkin_config(settings)
        self.verdicts: Dict[str, Verdict] = {}
        self.timings: Dict[str, float] = {}
        self.conditions: Optional[ConditionReport] = None
        self.solution: Optional[FourierField] = None
        self.report: Dict = {
            "tool": "qpsolve",
            "version": VERSION,
            "command": command,
            "problem": problem.name,
            "problem_hash": self.hash,
            "seed": self.seed,
            "settings": settings,
        }

    def _timed(self, stage: str, fn, *args, **kwargs):
        started = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.timings[stage] = time.perf_counter() - started

    def check(self):
        self.conditions = self._timed(
            "conditions",
            check_all,
            self.problem,
            resolution=int(self.settings["cond_resolution"]),
            seed=self.seed,
            torus_points=int(self.settings["cond_torus_grid"]),
        )
        self.report["conditions"] = self.conditions.to_dict()
        self.verdicts["conditions"] = self.conditions.verdict

    def solve(self):
        result: SolveReport = self._timed("solve", minimize, self.problem, self.config, conditions=self.conditions)
        self.solution = result.u
        self.report["solve"] = result.to_dict()
        self.verdicts["solve"] = Verdict.PASS if result.converged else Verdict.FAIL
        artifacts.save_solution(result.u, result.to_dict(), self.hash, self.out_dir)

    def _field(self) -> FourierField:
        """Solution of this run, else the stored one, else a fresh solve"""
        if self.solution is None:
            self.solution = artifacts.load_solution(self.hash, self.out_dir)
            if self.solution is not None:
                logger.info("Using stored solution", module="app", problem=self.problem.name)
        if self.solution is None:
            self.solve()
        return self.solution

    def verify(self):
        u = self._field()
        window, dt = float(self.settings["window"]), float(self.settings["dt"])
        residuals = self._timed("verify", verify_solution, self.problem, u, None, window, dt)
        failed = self.conditions is not None and self.conditions.verdict == Verdict.FAIL
        probe = self._timed(
            "uniqueness",
            uniqueness_probe,
            self.problem,
            self.config,
            trials=UNIQUENESS_TRIALS,
            seed=self.seed,
            conditions_failed=failed,
        )
        residuals.uniqueness = probe.__dict__.copy()
        if self.problem.reference is not None:
            ref = resize(self.problem.reference, u.N)
            estimate = d1_distance(self.problem, u, ref, T=min(window, 10.0), dt=dt)
            residuals.d1 = {**estimate.__dict__, "drift": estimate.drift}
        section = residuals.to_dict()
        self.report["verify"] = section
        self.verdicts["verify"] = _verify_verdict(section, failed)
        if self.fmt in ("csv", "both"):
            artifacts.write_csv("line_residual.csv", residuals.series.to_frame(), self.out_dir)

    def dichotomy(self):
        u = self._field()
        result = self._timed(
            "dichotomy",
            analyze_solution,
            self.problem,
            u,
            T=float(self.settings["dichotomy_window"]),
            seed=self.seed,
        )
        self.report["dichotomy"] = result.to_dict()
        self.verdicts["dichotomy"] = result.verdict
        if self.fmt in ("csv", "both"):
            artifacts.write_csv("exponents.csv", result.series_frame(), self.out_dir)

    def execute(self) -> int:
        stages = {
            "check": ("check",),
            "solve": ("check", "solve"),
            "verify": ("verify",),
            "dichotomy": ("dichotomy",),
            "all": ("check", "solve", "verify", "dichotomy"),
        }[self.command]
        for stage in stages:
            getattr(self, stage)()

        code = exit_code(self.verdicts)
        self.report["verdicts"] = {name: v.value for name, v in self.verdicts.items()}
        self.report["exit_code"] = code
        if self.fmt in ("report", "both"):
            artifacts.put_document(artifacts.REPORT, self.report, self.out_dir)
        artifacts.put_document(artifacts.TIMINGS, self.timings, self.out_dir)
        if self.fmt in ("csv", "both") and self.conditions is not None:
            artifacts.write_csv("conditions.csv", conditions_frame(self.conditions), self.out_dir)
        logger.info("Stage timings", module="app", **self.timings)
        return code


def run(command: str, problem_path: str, seed=None, trunc=None, grid=None, window=None, out=None, fmt: str = "report") -> Tuple[Dict, int]:
    """Execute one subcommand; returns (report, exit code)"""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    problem = load_problem(problem_path)
    settings = run_settings(problem, seed, trunc, grid, window)
    job = Run(command, problem, settings, out or cfg.out_dir, fmt)
    code = job.execute()
    logger.log_run(command, problem.name, code, job.verdicts)
    return job.report, code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qpsolve", description="Quasiperiodic solutions of natural Lagrangian systems")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("problem", help="problem file (.qp)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trunc", type=int, default=None, metavar="N")
    p.add_argument("--grid", type=int, default=None, metavar="P")
    p.add_argument("--window", type=float, default=None, metavar="T")
    p.add_argument("--out", default=None, help=f"output directory (default {cfg.out_dir})")
    p.add_argument("--format", dest="fmt", choices=("report", "csv", "both"), default="report")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        report, code = run(args.command, args.problem, args.seed, args.trunc, args.grid, args.window, args.out, args.fmt)
    except (QPError, OSError, ValueError) as err:
        logger.error(f"{args.command} failed: {err}", module="app", problem=args.problem)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR
    print(f"{args.command} {report['problem']}: {report['verdicts']} -> exit {code}")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
