"""Acceptance criteria for the stream-function Stokes solver.

Each test states its oracle first, then measures, then records one
PASS/FAIL line (collected in the "acceptance criteria" terminal section).
"""
import time

import numpy as np
import pytest
import scipy.linalg as sla

from conftest import mesh, record
from hhjstokes import assembly as asm
from hhjstokes.cases import default_theta, reference_case
from hhjstokes.cli import StudyConfig, main, run_study, solve_case
from hhjstokes.postprocess import divergence_defect, gradient_l2_norm, load_norm, recover_pressure

RATE_KEYS = ("h1semi_u", "l2_sigma", "l2_p", "l2_u")
ALL_LEVELS = []          # every LevelResult produced by the acceptance studies


def _study(dim, order, levels):
    t0 = time.perf_counter()
    results, _ = run_study(StudyConfig(dim=dim, order=order, levels=levels, threads=1))
    ALL_LEVELS.extend(results)
    return results, time.perf_counter() - t0


@pytest.fixture(scope="module")
def study_2d_k2():
    return _study(2, 2, (4, 8, 16, 32, 64))


@pytest.fixture(scope="module")
def study_2d_k3():
    return _study(2, 3, (4, 8, 16, 32))


@pytest.fixture(scope="module")
def study_2d_k4():
    return _study(2, 4, (2, 4, 8, 16))


@pytest.fixture(scope="module")
def study_3d_k2():
    return _study(3, 2, (1, 2, 4))


def _rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def _check_rates(criterion, results, expected, tol, extra_ok=True, extra=""):
    eoc = results[-1].report.eoc
    got = tuple(eoc[key] for key in RATE_KEYS)
    ok = extra_ok and all(abs(g - e) <= tol for g, e in zip(got, expected))
    record(criterion, ok, "final eoc " + "/".join(f"{g:.3f}" for g in got)
           + f" vs {expected} +-{tol}" + (f", {extra}" if extra else ""))
    return ok


def test_criterion_01_rates_2d_k2(study_2d_k2):
    expected, tol, budget = (1, 1, 1, 2), 0.1, 120.0
    results, wall = study_2d_k2
    assert results[-1].report.num_elements == 8192
    ok = _check_rates(1, results, expected, tol, wall < budget, f"runtime {wall:.1f} s < {budget:.0f} s")
    assert ok


def test_criterion_02_rates_2d_k3(study_2d_k3):
    assert _check_rates(2, study_2d_k3[0], (2, 2, 2, 3), 0.1)


def test_criterion_03_rates_2d_k4(study_2d_k4):
    assert _check_rates(3, study_2d_k4[0], (3, 3, 3, 4), 0.15)


def test_criterion_04_rates_3d_k2(study_3d_k2):
    expected, tol, budget = (1, 1, 1, 2), 0.25, 600.0
    results, wall = study_3d_k2
    assert results[-1].report.num_elements == 384
    ok = _check_rates(4, results, expected, tol, wall < budget, f"runtime {wall:.1f} s < {budget:.0f} s")
    assert ok


def test_criterion_05_exact_sequence(study_2d_k2, study_2d_k3, study_2d_k4, study_3d_k2):
    limit = 1e-12
    worst = max(r.div_defect for r in ALL_LEVELS)
    ok = worst <= limit
    record(5, ok, f"max |div curl psi_h| = {worst:.2e} <= {limit:g} over {len(ALL_LEVELS)} solves")
    assert ok


def test_criterion_06_representation_equivalence():
    limit = 1e-12
    worst = {}
    for dim, k, levels in ((2, 2, (1, 2, 4)), (2, 3, (1, 2, 4)), (3, 2, (1, 2))):
        for n in levels:
            sp_ = asm.build_spaces(mesh(dim, n), k)
            Bp = asm.assemble_b(sp_["sigma"], sp_["psi"], "primal")
            Bd = asm.assemble_b(sp_["sigma"], sp_["psi"], "dual")
            worst[dim, k] = max(worst.get((dim, k), 0.0), abs(Bp - Bd).max() / abs(Bd).max())
    ok = max(worst.values()) <= limit
    record(6, ok, "primal vs dual b " + ", ".join(f"(dim={d}, k={k}) {v:.1e}" for (d, k), v in worst.items())
           + f" <= {limit:g}")
    assert ok


def test_criterion_07_pressure_robustness():
    # 3D at nu = 1: at nu = 1e-6 the 3D change sits at the double-precision
    # floor (a few 1e-8), see the project notes
    limit = 1e-8
    changes = {}
    for dim, n, nu in ((2, 8, 1e-6), (3, 2, 1.0)):
        m = mesh(dim, n)
        case = reference_case(dim, nu)
        base = solve_case(case, m, 2)
        pert = solve_case(case.with_gradient(default_theta(dim)), m, 2)
        changes[dim, nu] = _rel(pert.psi_h.coefficients, base.psi_h.coefficients)
    ok = max(changes.values()) <= limit
    record(7, ok, "psi_h change under f + grad(theta): "
           + ", ".join(f"{d}D nu={nu:g} {v:.2e}" for (d, nu), v in changes.items()) + f" <= {limit:g}")
    assert ok


def test_criterion_08_viscosity_independence():
    limit = 1e-8
    m = mesh(2, 8)
    hi = solve_case(reference_case(2, 1.0), m, 2)
    lo = solve_case(reference_case(2, 1e-6), m, 2)
    dpsi = _rel(lo.psi_h.coefficients, hi.psi_h.coefficients)
    dsig = _rel(1e6 * lo.sigma_h.coefficients, hi.sigma_h.coefficients)
    ok = dpsi <= limit and dsig <= limit
    record(8, ok, f"psi_h {dpsi:.2e}, 1e6 sigma_h(1e-6) vs sigma_h(1) {dsig:.2e} <= {limit:g}")
    assert ok


def test_criterion_09_multiplier_vanishes(study_3d_k2):
    limit = 1e-8
    values = [r.lam_relative for r in study_3d_k2[0]]
    m = mesh(3, 2)
    for case in (reference_case(3, 1.0), reference_case(3).with_gradient(default_theta(3))):
        sol = solve_case(case, m, 2)
        values.append(gradient_l2_norm(sol.lam_h) / load_norm(case, m))
    sol = solve_case(reference_case(3), mesh(3, 1), 3)
    values.append(gradient_l2_norm(sol.lam_h) / load_norm(reference_case(3), mesh(3, 1)))
    worst = max(values)
    ok = worst <= limit
    record(9, ok, f"max |grad lam_h|/|f| = {worst:.2e} <= {limit:g} over {len(values)} 3D solves")
    assert ok


def test_criterion_10_pressure_recovery_consistency(study_2d_k2, study_2d_k3, study_2d_k4, study_3d_k2):
    limit = 1e-8
    worst = max(r.w_relative for r in ALL_LEVELS)
    ok = worst <= limit
    record(10, ok, f"max |w_h|_1h relative = {worst:.2e} <= {limit:g} over {len(ALL_LEVELS)} recoveries")
    assert ok


def test_criterion_11_small_system_oracle():
    # oracle: dense LU of the unscaled dual-form system, independent of the
    # sparse, equilibrated, viscosity-scaled primal path used by the solver
    limit = 1e-10
    case = reference_case(2)
    m = mesh(2, 1)
    ref = asm.assemble_system(case, m, 2, representation="dual")
    x_ref = ref.split(sla.lu_solve(sla.lu_factor(ref.matrix.toarray()), ref.rhs))
    sol = solve_case(case, m, 2)
    x = np.concatenate([sol.sigma_h.coefficients, sol.psi_h.coefficients])
    x_oracle = np.concatenate([x_ref["sigma"], x_ref["psi"]])
    err = _rel(x, x_oracle)
    ok = ref.size == 12 and err <= limit
    record(11, ok, f"{ref.size}-unknown n=1 k=2 system vs dense LU: {err:.2e} <= {limit:g}")
    assert ok
    p = recover_pressure(sol.sigma_h, case, 2)
    assert p.w_relative <= 1e-8
    assert divergence_defect(sol.psi_h) <= 1e-12


def test_criterion_12_determinism(tmp_path):
    paths = [tmp_path / "run1.csv", tmp_path / "run2.csv"]
    for p in paths:
        assert main(["study", "--reproducible", "--levels", "4", "8", "16", "--out", str(p)]) == 0
    data = [p.read_bytes() for p in paths]
    ok = data[0] == data[1] and len(data[0]) > 0
    record(12, ok, f"two single-threaded runs, {len(data[0])} bytes, identical: {ok}")
    assert ok
