import numpy as np
import pytest
import scipy.sparse as sps

from conftest import mesh, space
from hhjstokes import assembly as asm
from hhjstokes.cases import ManufacturedCase, default_theta, gradient_case, reference_case
from hhjstokes.fespace import FEFunction, FESpace, interpolate_l2_local
from hhjstokes.postprocess import gradient_l2_norm


def _rel_max(a, b):
    return abs(a - b).max() / max(abs(b).max(), 1e-300)


# ---------------------------------------------------------------------- a
def test_a_gram_diagonal_and_nu_scaling():
    S = space(2, 2, "stress_nt", 1)
    A1 = asm.assemble_a(S, 1.0)
    A2 = asm.assemble_a(S, 2.0)
    assert np.all(A1.diagonal() > 0)
    assert _rel_max(A2, 0.5 * A1) <= 1e-15
    # diagonal entry equals the squared L2 norm of the basis function
    for i in (0, 5):
        e = np.zeros(S.ndofs)
        e[i] = 1.0
        pts, w = asm.volume_rule(S.mesh, 6)
        v = FEFunction(S, e).evaluate(pts)[0]
        norm2 = np.einsum("q,e,eqc,eqc->", w, np.abs(S.mesh.det), v, v)
        assert A1[i, i] == pytest.approx(norm2, rel=1e-13)


def test_a_positive_definite_on_unit_square():
    A = asm.assemble_a(space(2, 1, "stress_nt", 1), 1.0).toarray()
    assert A.shape == (11, 11)
    assert np.allclose(A, A.T, atol=1e-15)
    assert np.linalg.eigvalsh(A).min() > 0


def test_a_rejects_bad_input():
    with pytest.raises(ValueError):
        asm.assemble_a(space(2, 1, "stress_nt", 1), 0.0)
    with pytest.raises(ValueError):
        asm.assemble_a(space(2, 1, "bdm_hdiv", 1), 1.0)


# ---------------------------------------------------------------------- b
@pytest.mark.parametrize("dim,k,n", [(2, 2, 1), (2, 2, 2), (2, 2, 4), (2, 3, 1), (2, 3, 2), (2, 3, 4),
                                     (3, 2, 1), (3, 2, 2), (3, 3, 1)])
def test_primal_dual_agree(dim, k, n):
    spaces = asm.build_spaces(mesh(dim, n), k)
    Bp = asm.assemble_b(spaces["sigma"], spaces["psi"], "primal")
    Bd = asm.assemble_b(spaces["sigma"], spaces["psi"], "dual")
    assert _rel_max(Bp, Bd) <= 1e-12


def test_b_rejects_incompatible_orders():
    m = mesh(2, 1)
    with pytest.raises(ValueError):
        asm.assemble_b(FESpace(m, "stress_nt", 2), FESpace(m, "lagrange_h1", 2))
    with pytest.raises(ValueError):
        asm.assemble_b(FESpace(m, "stress_nt", 1), FESpace(m, "bdm_hdiv", 2))
    with pytest.raises(ValueError):
        asm.assemble_b(FESpace(m, "stress_nt", 1), FESpace(m, "lagrange_h1", 2), "other")


def _gradient_in_stream_space(W, L, lam):
    """Coefficients of grad(lam_h) in the Nedelec space (exact: grad S^{k+1} is in W^k)."""
    lam_h = FEFunction(L, lam)
    m = W.mesh

    def field(x):
        ref = np.einsum("eij,eqj->eqi", m.Jinv, x - m.b[:, None, :])
        assert np.allclose(ref, ref[0])
        return lam_h.evaluate(ref[0], derivs=1)[1][..., 0, :]

    return interpolate_l2_local(W, field).coefficients


@pytest.mark.parametrize("k", [2, 3])
def test_gradient_fields_in_kernel_of_b_and_gauge_gram(k, rng):
    sp_ = asm.build_spaces(mesh(3, 1 if k == 3 else 2), k)
    W, L = sp_["psi"], sp_["lam"]
    lam = rng.standard_normal(L.ndofs)
    c = _gradient_in_stream_space(W, L, lam)
    B = asm.assemble_b(sp_["sigma"], W)
    assert np.abs(c @ B).max() <= 1e-11 * max(1.0, np.abs(c).max())
    G = asm.assemble_gauge(W, L)
    energy = c @ (G @ lam)
    assert energy == pytest.approx(gradient_l2_norm(FEFunction(L, lam)) ** 2, rel=1e-11)
    assert energy > 0


def test_gauge_rejects_wrong_spaces():
    m = mesh(3, 1)
    with pytest.raises(ValueError):
        asm.assemble_gauge(FESpace(m, "nedelec_hcurl", 2), FESpace(m, "lagrange_h1", 2))
    with pytest.raises(ValueError):
        asm.assemble_gauge(FESpace(mesh(2, 1), "lagrange_h1", 2), FESpace(mesh(2, 1), "lagrange_h1", 3))


# ------------------------------------------------------------------- load
@pytest.mark.parametrize("dim,k,n", [(2, 2, 4), (2, 4, 2), (3, 2, 2)])
def test_gradient_load_vanishes(dim, k, n):
    P = asm.build_spaces(mesh(dim, n), k)["psi"]
    load = asm.assemble_load(gradient_case(dim, default_theta(dim)), P)
    assert np.abs(load).max() <= 1e-12


def test_zero_load_and_determinism():
    P = space(2, 2, "lagrange_h1", 2)
    zero = ManufacturedCase(2, 0, 0, 1.0)
    assert np.all(asm.assemble_load(zero, P) == 0)
    l1 = asm.assemble_load(reference_case(2), P)
    l2 = asm.assemble_load(reference_case(2), P)
    assert np.linalg.norm(l1) > 0
    assert l1.tobytes() == l2.tobytes()
    with pytest.raises(ValueError):
        asm.assemble_load(reference_case(2), P, degree=10)


@pytest.mark.parametrize("dim", [2, 3])
def test_pressure_perturbation_changes_load_only_by_roundoff(dim):
    P = asm.build_spaces(mesh(dim, 2), 2)["psi"]
    case = reference_case(dim, nu=1.0)
    diff = asm.assemble_load(case.with_gradient(default_theta(dim)), P) - asm.assemble_load(case, P)
    assert np.abs(diff).max() <= 1e-12


# ----------------------------------------------------------------- system
def test_unit_square_system_layout():
    sys_ = asm.assemble_system(reference_case(2), mesh(2, 1), 2)
    assert sys_.size == 12                       # 11 stress + 1 stream
    assert sys_.offsets == {"sigma": 0, "psi": 11}
    assert sys_.symmetry_defect() <= 1e-12
    assert np.all(sys_.rhs[:11] == 0)


def test_3d_system_layout():
    sys_ = asm.assemble_system(reference_case(3), mesh(3, 1), 2)
    sp_ = sys_.spaces
    assert sys_.size == sp_["sigma"].ndofs + sp_["psi"].ndofs + sp_["lam"].ndofs
    assert set(sys_.blocks) == {"A", "B", "G"}
    assert sys_.symmetry_defect() <= 1e-12
    o = sys_.offsets
    assert np.all(sys_.rhs[:o["psi"]] == 0) and np.all(sys_.rhs[o["lam"]:] == 0)
    M = sys_.matrix
    assert M[o["sigma"]:o["psi"], o["lam"]:].nnz == 0


def test_nu_scaled_system_is_equivalent():
    case = reference_case(2, nu=1e-3)
    plain = asm.assemble_system(case, mesh(2, 2), 2)
    scaled = asm.assemble_system(case, mesh(2, 2), 2, nu_scaled=True)
    x1 = plain.split(sps.linalg.spsolve(plain.matrix.tocsc(), plain.rhs))
    x2 = scaled.split(sps.linalg.spsolve(scaled.matrix.tocsc(), scaled.rhs))
    for key in x1:
        assert np.allclose(x1[key], x2[key], rtol=1e-9, atol=1e-14 * np.abs(x1[key]).max())


def test_case_mesh_dimension_mismatch():
    with pytest.raises(ValueError):
        asm.assemble_system(reference_case(3), mesh(2, 1), 2)
    with pytest.raises(ValueError):
        asm.build_spaces(mesh(2, 1), 1)


# --------------------------------------------------------- recovery forms
def test_h1h_inner_symmetric_positive_definite():
    V = space(2, 2, "bdm_hdiv", 2)
    K = asm.assemble_h1h_inner(V).toarray()
    assert np.allclose(K, K.T, atol=1e-13)
    assert np.linalg.eigvalsh(K).min() > 0


def test_divergence_of_bdm_matches_mean_identity(rng):
    V = space(2, 2, "bdm_hdiv", 2)
    Q = space(2, 2, "dg_l2_zeromean", 1)
    D = asm.assemble_divergence(V, Q)
    const = np.zeros(Q.ndofs)
    const[Q.cell_dofs[:, 0]] = 1.0
    # int div v = 0 for v with zero normal trace
    assert np.abs(const @ D).max() <= 1e-13
    m = asm.assemble_mean(Q)
    assert m @ const == pytest.approx(1.0, rel=1e-14)
