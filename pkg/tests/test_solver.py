import numpy as np
import pytest
import scipy.sparse as sps

from conftest import mesh
from hhjstokes.assembly import assemble_system
from hhjstokes.cases import reference_case
from hhjstokes.fespace import FEFunction
from hhjstokes.postprocess import gradient_l2_norm, load_norm
from hhjstokes.solver import SolverError, relative_residual, solve


def test_identity():
    b = np.arange(1.0, 6.0)
    rep = solve((sps.identity(5), b))
    assert np.array_equal(rep.solution, b)
    assert rep.residual == 0.0


def test_small_saddle_point():
    A = sps.csr_matrix(np.array([[1.0, 1.0], [1.0, 0.0]]))
    rep = solve((A, np.array([0.0, 1.0])))
    assert np.allclose(rep.solution, [1.0, -1.0], atol=1e-15)


@pytest.mark.parametrize("tol", [1e-15, 1e-5, 0.0])
def test_tolerance_range(tol):
    with pytest.raises(ValueError):
        solve((sps.identity(2), np.ones(2)), tol=tol)


def test_unknown_method():
    with pytest.raises(ValueError):
        solve((sps.identity(2), np.ones(2)), method="cg")


def test_singular_matrix_raises():
    A = sps.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SolverError):
        solve((A, np.array([1.0, 0.0])))


def test_iteration_cap_raises():
    sys_ = assemble_system(reference_case(2), mesh(2, 4), 2, nu_scaled=True)
    with pytest.raises(SolverError) as info:
        solve(sys_, method="iterative", maxiter=1)
    assert info.value.residual > 1e-10


def test_zero_rhs_residual_definition():
    A = sps.identity(3, format="csr")
    assert relative_residual(A, np.zeros(3), np.zeros(3)) == 0.0


@pytest.mark.parametrize("dim,k,n", [(2, 2, 2), (2, 2, 8), (2, 3, 4), (3, 2, 1), (3, 2, 2)])
def test_minres_matches_direct(dim, k, n):
    case = reference_case(dim)
    sys_ = assemble_system(case, mesh(dim, n), k, nu_scaled=True)
    d = solve(sys_, method="direct")
    it = solve(sys_, method="iterative")
    assert d.residual <= 1e-10 and it.residual <= 1e-10
    sd, si = sys_.split(d.solution), sys_.split(it.solution)
    for key in ("sigma", "psi"):
        assert np.abs(si[key] - sd[key]).max() <= 1e-8 * np.abs(sd[key]).max()
    if "lam" in sd:
        # the multiplier vanishes up to roundoff, measured against the data
        f = load_norm(case, sys_.spaces["psi"].mesh)
        for x in (sd, si):
            assert gradient_l2_norm(FEFunction(sys_.spaces["lam"], x["lam"])) <= 1e-8 * f
