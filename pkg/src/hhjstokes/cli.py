"""Convergence studies and invariant checks.

    python3 -m hhjstokes study --dim 2 --order 2 --levels 4 8 16 32 64
    python3 -m hhjstokes check --dim 3 --order 2

``study`` prints one row per mesh level (CSV or a markdown table with
"error (eoc)" cells); ``check`` runs the invariant suite and exits nonzero
if any check fails.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import dataclass, field, fields

import numpy as np
from threadpoolctl import threadpool_limits

from . import assembly as asm
from .cases import default_theta, reference_case
from .fespace import MAX_ORDER, FEFunction
from .mesh import build_structured
from .postprocess import (ErrorReport, divergence_defect, error_norms, gradient_l2_norm, load_norm, nt_jump,
                          recover_pressure)
from .solver import DEFAULT_TOL, SolverError, solve

CSV_COLUMNS = ("level", "nT", "ndof_sigma", "ndof_stream", "ndof_multiplier",
               "err_h1semi_u", "eoc_h1semi_u", "err_l2_sigma", "eoc_l2_sigma",
               "err_l2_p", "eoc_l2_p", "err_l2_u", "eoc_l2_u", "solver_residual", "wall_time_s")
TABLE_ERRORS = ("h1semi_u", "l2_sigma", "l2_p", "l2_u")
DEFAULT_LEVELS = {(2, 2): (4, 8, 16, 32, 64), (2, 3): (4, 8, 16, 32), (2, 4): (2, 4, 8, 16),
                  (3, 2): (1, 2, 4), (3, 3): (1, 2)}


@dataclass
class StudyConfig:
    dim: int = 2
    order: int = 2
    levels: tuple = ()
    nu: float = 1e-6
    tol: float = DEFAULT_TOL
    format: str = "csv"
    pressure_check: bool = True
    seed: int = 0
    threads: int = 1
    method: str = "direct"
    representation: str = "primal"
    record_time: bool = True

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        top = MAX_ORDER[("lagrange_h1", 2)] if self.dim == 2 else MAX_ORDER[("nedelec_hcurl", 3)]
        if not 2 <= self.order <= top:
            raise ValueError(f"order must lie in [2, {top}] for dim {self.dim}")
        if not self.levels:
            self.levels = DEFAULT_LEVELS.get((self.dim, self.order), (1, 2) if self.dim == 3 else (2, 4, 8))
        self.levels = tuple(int(n) for n in self.levels)
        if any(n < 1 for n in self.levels) or any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("levels must be positive and strictly increasing")
        if self.nu <= 0:
            raise ValueError("nu must be positive")
        if not 1e-14 <= self.tol <= 1e-6:
            raise ValueError("tol must lie in [1e-14, 1e-6]")
        if self.format not in ("csv", "markdown"):
            raise ValueError("format must be csv or markdown")
        if self.method not in ("direct", "iterative"):
            raise ValueError("method must be direct or iterative")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "StudyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


# ----------------------------------------------------------------- solving
@dataclass
class Solution:
    system: asm.LinearSystem
    sigma_h: FEFunction
    psi_h: FEFunction
    lam_h: FEFunction | None
    residual: float
    wall_time: float


def solve_case(case, mesh, k: int, tol: float = DEFAULT_TOL, method: str = "direct",
               representation: str = "primal", spaces: dict | None = None) -> Solution:
    """Assemble and solve one discrete problem (viscosity-scaled unknowns)."""
    t0 = time.perf_counter()
    system = asm.assemble_system(case, mesh, k, representation, spaces, nu_scaled=True)
    rep = solve(system, tol=tol, method=method)
    parts = system.split(rep.solution)
    sp = system.spaces
    lam = FEFunction(sp["lam"], parts["lam"]) if "lam" in sp else None
    return Solution(system, FEFunction(sp["sigma"], parts["sigma"]), FEFunction(sp["psi"], parts["psi"]),
                    lam, rep.residual, time.perf_counter() - t0)


@dataclass
class LevelResult:
    n: int
    report: ErrorReport
    residual: float
    wall_time: float
    w_relative: float
    div_defect: float
    lam_relative: float = 0.0


class StudyAborted(RuntimeError):
    def __init__(self, message: str, partial: list, table: str):
        super().__init__(message)
        self.partial = partial
        self.table = table


def run_level(config: StudyConfig, n: int, previous: ErrorReport | None = None, case=None) -> LevelResult:
    t0 = time.perf_counter()
    case = case or reference_case(config.dim, config.nu)
    mesh = build_structured(config.dim, n)
    sol = solve_case(case, mesh, config.order, config.tol, config.method, config.representation)
    pressure = recover_pressure(sol.sigma_h, case, config.order, tol=config.tol)
    extra = {"lam": sol.lam_h.space.ndofs if sol.lam_h is not None else 0}
    report = error_norms(case, sol.sigma_h, sol.psi_h, pressure.p_h, previous, extra_dofs=extra)
    lam_rel = 0.0
    if sol.lam_h is not None:
        lam_rel = gradient_l2_norm(sol.lam_h) / max(load_norm(case, mesh), 1e-300)
    return LevelResult(n, report, sol.residual, time.perf_counter() - t0, pressure.w_relative,
                       divergence_defect(sol.psi_h), lam_rel)


def _row(level: int, res: LevelResult, record_time: bool) -> dict:
    rep = res.report
    row = {"level": str(level), "nT": str(rep.num_elements), "ndof_sigma": str(rep.ndofs["sigma"]),
           "ndof_stream": str(rep.ndofs["psi"]), "ndof_multiplier": str(rep.ndofs.get("lam", 0))}
    for key in TABLE_ERRORS:
        row[f"err_{key}"] = f"{rep.errors[key]:.6e}"
        row[f"eoc_{key}"] = f"{rep.eoc[key]:.4f}" if key in rep.eoc else ""
    row["solver_residual"] = f"{res.residual:.3e}"
    row["wall_time_s"] = f"{res.wall_time:.3f}" if record_time else ""
    return row


def format_table(rows: list[dict], fmt: str = "csv") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()
    head = ["level", "|T|", "ndof", "grad u", "sigma", "p", "u", "residual", "time [s]"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = [r["level"], r["nT"],
                 str(int(r["ndof_sigma"]) + int(r["ndof_stream"]) + int(r["ndof_multiplier"]))]
        for key in TABLE_ERRORS:
            eoc = r[f"eoc_{key}"]
            cells.append(r[f"err_{key}"] + (f" ({eoc})" if eoc else " (-)"))
        cells += [r["solver_residual"], r["wall_time_s"] or "-"]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def run_study(config: StudyConfig, out=None) -> tuple[list[LevelResult], str]:
    """Run every level of ``config``; returns the results and the rendered table.

    On a solver failure the partial table is written to ``out`` (if given)
    and :class:`StudyAborted` is raised carrying it.
    """
    case = reference_case(config.dim, config.nu)
    results, rows = [], []
    with _thread_limit(config.threads):
        for level, n in enumerate(config.levels):
            try:
                res = run_level(config, n, results[-1].report if results else None, case)
            except SolverError as exc:
                table = format_table(rows, config.format)
                if out is not None:
                    out.write(table)
                raise StudyAborted(f"level {level} (n={n}): {exc}", results, table) from exc
            results.append(res)
            rows.append(_row(level, res, config.record_time))
    table = format_table(rows, config.format)
    if out is not None:
        out.write(table)
    return results, table


class _thread_limit:
    def __init__(self, n: int):
        self.n = n

    def __enter__(self):
        asm.set_threads(self.n)
        self._ctl = threadpool_limits(self.n)
        return self

    def __exit__(self, *exc):
        self._ctl.unregister()
        asm.set_threads(1)
        return False


# ------------------------------------------------------------------ checks
@dataclass
class Check:
    name: str
    value: float
    limit: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<24} {self.value:.3e} <= {self.limit:.1e}{extra}"


@dataclass
class CheckReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name, value, limit, detail=""):
        value = float(value)
        self.checks.append(Check(name, value, limit, bool(np.isfinite(value) and value <= limit), detail))

    def text(self) -> str:
        return "\n".join(c.line() for c in self.checks) + "\n"


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def run_checks(config: StudyConfig, n: int | None = None) -> CheckReport:
    """Invariant suite on one mesh (default: the first study level, at most 4 / 2)."""
    d, k = config.dim, config.order
    n = n or min(config.levels[0], 4 if d == 2 else 2)
    report = CheckReport()
    mesh = build_structured(d, n)
    case = reference_case(d, config.nu)
    with _thread_limit(config.threads):
        spaces = asm.build_spaces(mesh, k)
        base = solve_case(case, mesh, k, config.tol, config.method, spaces=spaces)
        report.add("solver_residual", base.residual, config.tol)
        report.add("exact_sequence", divergence_defect(base.psi_h), 1e-12, "max |div curl psi_h|")

        Bp = asm.assemble_b(spaces["sigma"], spaces["psi"], "primal")
        Bd = asm.assemble_b(spaces["sigma"], spaces["psi"], "dual")
        report.add("representation", abs(Bp - Bd).max() / max(abs(Bp).max(), 1e-300), 1e-12,
                   "primal vs dual b")

        rng = np.random.default_rng(config.seed)
        rand_sigma = FEFunction(spaces["sigma"], rng.standard_normal(spaces["sigma"].ndofs))
        report.add("nt_continuity", nt_jump(rand_sigma), 1e-12, f"random sigma_h, seed {config.seed}")

        if base.lam_h is not None:
            report.add("multiplier_zero", gradient_l2_norm(base.lam_h) / load_norm(case, mesh), 1e-8,
                       "|grad lam_h| / |f|")

        if config.pressure_check:
            pert = solve_case(case.with_gradient(default_theta(d)), mesh, k, config.tol, config.method,
                              spaces=spaces)
            report.add("pressure_robustness", _rel(pert.psi_h.coefficients, base.psi_h.coefficients), 1e-8,
                       "psi_h change under f + grad(theta)")

        other_nu = 1.0 if config.nu != 1.0 else 1e-6
        alt = solve_case(case.with_nu(other_nu), mesh, k, config.tol, config.method, spaces=spaces)
        report.add("nu_independence_psi", _rel(alt.psi_h.coefficients, base.psi_h.coefficients), 1e-8,
                   f"nu = {config.nu:g} vs {other_nu:g}")
        ratio = config.nu / other_nu
        report.add("nu_scaling_sigma", _rel(ratio * alt.sigma_h.coefficients, base.sigma_h.coefficients), 1e-8,
                   f"sigma_h ratio {ratio:g}")

        pressure = recover_pressure(base.sigma_h, case, k, tol=config.tol, check=None)
        report.add("pressure_recovery_w", pressure.w_relative, 1e-8, "|w_h|_1h relative")
    return report


# --------------------------------------------------------------------- cli
def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with StudyConfig fields (flags override it)")
    common.add_argument("--dim", type=int)
    common.add_argument("--order", type=int, help="stream order k (stress k-1, pressure k-2)")
    common.add_argument("--levels", type=int, nargs="+", help="mesh divisions n per level")
    common.add_argument("--nu", type=float)
    common.add_argument("--tol", type=float)
    common.add_argument("--out", help="output file (default stdout)")
    common.add_argument("--format", choices=("csv", "markdown"))
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--method", choices=("direct", "iterative"))

    parser = argparse.ArgumentParser(prog="hhjstokes", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    study = sub.add_parser("study", parents=[common], help="convergence table")
    study.add_argument("--reproducible", action="store_true",
                       help="single thread and no wall-clock column values (byte-identical output)")
    check = sub.add_parser("check", parents=[common], help="invariant suite")
    check.add_argument("--no-pressure-check", dest="pressure_check", action="store_false", default=None)
    return parser


def config_from_args(args) -> StudyConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    for name in ("dim", "order", "levels", "nu", "tol", "format", "seed", "threads", "method", "pressure_check"):
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if getattr(args, "reproducible", False):
        data["threads"] = 1
        data["record_time"] = False
    return StudyConfig.from_dict(data)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = config_from_args(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        if args.command == "study":
            try:
                run_study(config, out)
            except StudyAborted as exc:
                print(f"study aborted: {exc}", file=sys.stderr)
                return 1
            return 0
        report = run_checks(config)
        out.write(report.text())
        return 0 if report.passed else 1
    finally:
        if out is not sys.stdout:
            out.close()


__all__ = ["StudyConfig", "Solution", "LevelResult", "StudyAborted", "Check", "CheckReport",
           "solve_case", "run_level", "run_study", "run_checks", "format_table", "main", "CSV_COLUMNS"]
