"""Assembly of the stream-function saddle-point systems.

Unknowns are ordered (stress, stream[, multiplier]).  The 2D system is

    [ A   B^T ] [sigma]   [0]
    [ B   0   ] [psi  ] = [l]

and in 3D a gauge multiplier in the next-higher Lagrange space is added,

    [ A   B^T  0 ]
    [ B   0    G ]
    [ 0   G^T  0 ]

with A = (1/nu)(sigma, tau), B the discrete duality pairing
b(sigma, curl phi), G = (phi, grad mu) and l = -(f, curl phi).  Homogeneous
essential conditions are eliminated from the DOF numbering, so every matrix
here acts on free DOFs only.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps

from .cases import ManufacturedCase
from .fespace import FESpace, entity_points
from .mesh import Mesh, local_entities
from .quadrature import simplex_rule

LOAD_DEGREE = 18
CHUNK = 512
_threads = 1

_LEVI_CIVITA = np.zeros((3, 3, 3))
for _i, _j, _k in [(0, 1, 2), (1, 2, 0), (2, 0, 1)]:
    _LEVI_CIVITA[_i, _j, _k], _LEVI_CIVITA[_i, _k, _j] = 1.0, -1.0
_ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


def set_threads(n: int) -> None:
    """Number of worker threads for element loops (1 = fully sequential)."""
    global _threads
    if n < 1:
        raise ValueError("threads must be >= 1")
    _threads = int(n)


def element_chunks(ne: int, size: int = CHUNK):
    return [np.arange(s, min(s + size, ne)) for s in range(0, ne, size)]


def map_chunks(fn, ne: int, size: int = CHUNK):
    """Apply ``fn`` to element chunks; results come back in chunk order."""
    chunks = element_chunks(ne, size)
    if _threads == 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(_threads) as pool:
        return list(pool.map(fn, chunks))


def scatter(local: list[np.ndarray], rows: np.ndarray, cols: np.ndarray, shape) -> sps.csr_matrix:
    """Sum element matrices (ne, nr, nc) into a sparse matrix, skipping DOFs marked -1."""
    A = np.concatenate(local) if isinstance(local, list) else local
    ne, nr, nc = A.shape
    R = np.broadcast_to(rows[:, :, None], (ne, nr, nc)).ravel()
    C = np.broadcast_to(cols[:, None, :], (ne, nr, nc)).ravel()
    V = A.ravel()
    keep = (R >= 0) & (C >= 0)
    M = sps.coo_matrix((V[keep], (R[keep], C[keep])), shape=shape).tocsr()
    M.sum_duplicates()
    M.sort_indices()
    return M


def scatter_vector(local: list[np.ndarray], dofs: np.ndarray, n: int) -> np.ndarray:
    A = np.concatenate(local) if isinstance(local, list) else local
    keep = dofs >= 0
    out = np.zeros(n)
    np.add.at(out, dofs[keep], A[keep])
    return out


def volume_rule(mesh: Mesh, degree: int):
    rule = simplex_rule(mesh.dim, min(degree, 20))
    return rule.points, rule.weights


def facet_rule(mesh: Mesh, degree: int):
    """Parameter points and weights on the reference facet (weights sum to 1)."""
    rule = simplex_rule(mesh.dim - 1, min(degree, 20))
    return rule.points, rule.weights / rule.weights.sum()


# ----------------------------------------------------------------- velocity
def velocity_tabulation(space: FESpace, ref_points, elems, mode: str):
    """Velocity test functions and their gradients.

    ``mode='curl'`` tabulates curl(phi) for a stream space (scalar Lagrange in
    2D, Nedelec in 3D); ``mode='value'`` tabulates an H(div) space directly.
    Returns values (ne, nq, n, d) and gradients (ne, nq, n, d, d) with
    ``grad[..., i, j] = d_j v_i``.
    """
    d = space.dim
    if mode == "value":
        vals, grads = space.tabulate(ref_points, elems, derivs=1)
        return vals, grads
    _, g, H = space.tabulate(ref_points, elems, derivs=2)
    if d == 2:
        v = np.einsum("ik,eqjk->eqji", _ROT, g[:, :, :, 0, :])
        gv = np.einsum("ik,eqjkl->eqjil", _ROT, H[:, :, :, 0, :, :])
    else:
        v = np.einsum("ikc,eqjck->eqji", _LEVI_CIVITA, g)
        gv = np.einsum("ikc,eqjckl->eqjil", _LEVI_CIVITA, H)
    return v, gv


def _check_stream(space: FESpace):
    expected = "lagrange_h1" if space.dim == 2 else "nedelec_hcurl"
    if space.family != expected:
        raise ValueError(f"stream space in {space.dim}D must be {expected}, got {space.family}")


# ------------------------------------------------------------------- forms
def assemble_a(space_sigma: FESpace, nu: float) -> sps.csr_matrix:
    """(1/nu) * (sigma, tau) on the stress space."""
    if space_sigma.family != "stress_nt":
        raise ValueError("assemble_a expects a stress_nt space")
    if not nu > 0:
        raise ValueError("viscosity must be positive")
    mesh = space_sigma.mesh
    pts, w = volume_rule(mesh, 2 * space_sigma.order + 2)

    def local(elems):
        v = space_sigma.tabulate(pts, elems)[0]
        jw = np.abs(mesh.det[elems])[:, None] * w[None, :]
        return np.einsum("eq,eqic,eqjc->eij", jw, v, v, optimize=True) / nu

    cd = space_sigma.cell_dofs
    n = space_sigma.ndofs
    return scatter(map_chunks(local, mesh.num_elements), cd, cd, (n, n))


def _b_local(space_sigma: FESpace, space_v: FESpace, mode: str, representation: str, degree: int):
    """Element matrices of b(sigma, v): shape (ne, nloc_v, nloc_sigma)."""
    mesh = space_sigma.mesh
    d = mesh.dim
    pts, w = volume_rule(mesh, degree)
    s, ws = facet_rule(mesh, degree)
    combos = local_entities(d, d - 1)
    fent = mesh.cell_entities[d - 1]

    def local(elems):
        jw = np.abs(mesh.det[elems])[:, None] * w[None, :]
        if representation == "primal":
            sig = space_sigma.tabulate(pts, elems)[0].reshape(len(elems), len(w), -1, d, d)
            _, gv = velocity_tabulation(space_v, pts, elems, mode)
            out = -np.einsum("eq,eqsab,eqvab->evs", jw, sig, gv, optimize=True)
        else:
            _, gsig = space_sigma.tabulate(pts, elems, derivs=1)
            gsig = gsig.reshape(len(elems), len(w), -1, d, d, d)
            divs = np.einsum("eqsabb->eqsa", gsig)
            v, _ = velocity_tabulation(space_v, pts, elems, mode)
            out = np.einsum("eq,eqsa,eqva->evs", jw, divs, v, optimize=True)
        for f, combo in enumerate(combos):
            fp = entity_points(d, combo, s)
            g = fent[elems, f]
            n = mesh.facet_normals[g]
            sw = (mesh.facet_signs[elems, f] * mesh.facet_measures[g])[:, None] * ws[None, :]
            sig = space_sigma.tabulate(fp, elems)[0].reshape(len(elems), len(ws), -1, d, d)
            v, _ = velocity_tabulation(space_v, fp, elems, mode)
            sn = np.einsum("eqsab,eb->eqsa", sig, n)
            snn = np.einsum("eqsa,ea->eqs", sn, n)
            vn = np.einsum("eqva,ea->eqv", v, n)
            if representation == "primal":
                # (sigma n_T)_t . v_t with n_T = sign * n
                term = np.einsum("eqsa,eqva->eqvs", sn, v) - np.einsum("eqs,eqv->eqvs", snn, vn)
                out += np.einsum("eq,eqvs->evs", sw, term)
            else:
                out -= np.einsum("eq,eqs,eqv->evs", sw, snn, vn)
        return out

    return local


def assemble_b(space_sigma: FESpace, space_stream: FESpace, representation: str = "primal") -> sps.csr_matrix:
    """b(sigma, curl phi), rows indexed by stream DOFs and columns by stress DOFs.

    ``primal``: -sum_T (sigma, grad curl phi)_T + sum_F (sigma_nt, [[curl(phi)_t]])_F
    ``dual``:    sum_T (div sigma, curl phi)_T - sum_F ([[sigma_nn]], curl(phi)_n)_F
    Facet terms are summed over element boundaries with the owner sign, which
    equals the facet-jump form because sigma_nt and curl(phi)_n are single valued.
    """
    _check_stream(space_stream)
    if space_sigma.family != "stress_nt":
        raise ValueError("first argument must be a stress_nt space")
    if space_sigma.order != space_stream.order - 1:
        raise ValueError("stress order must be stream order - 1")
    if representation not in ("primal", "dual"):
        raise ValueError(f"unknown representation {representation!r}")
    return _assemble_b(space_sigma, space_stream, "curl", representation)


def assemble_b_velocity(space_sigma: FESpace, space_v: FESpace, representation: str = "primal") -> sps.csr_matrix:
    """b(sigma, v) for v in an H(div) space (used by the pressure recovery)."""
    if space_v.family != "bdm_hdiv":
        raise ValueError("velocity space must be bdm_hdiv")
    return _assemble_b(space_sigma, space_v, "value", representation)


def _assemble_b(space_sigma, space_v, mode, representation):
    mesh = space_sigma.mesh
    degree = 2 * max(space_sigma.order, space_v.order) + 2
    local = _b_local(space_sigma, space_v, mode, representation, degree)
    return scatter(map_chunks(local, mesh.num_elements), space_v.cell_dofs, space_sigma.cell_dofs,
                   (space_v.ndofs, space_sigma.ndofs))


def assemble_gauge(space_stream: FESpace, space_multiplier: FESpace) -> sps.csr_matrix:
    """b^g(phi, mu) = (phi, grad mu); rows stream DOFs, columns multiplier DOFs."""
    if space_stream.dim != 3 or space_stream.family != "nedelec_hcurl":
        raise ValueError("gauge form needs a 3D Nedelec stream space")
    if space_multiplier.family != "lagrange_h1" or space_multiplier.order != space_stream.order + 1:
        raise ValueError("multiplier must be lagrange_h1 of order stream order + 1")
    if space_multiplier.mesh is not space_stream.mesh:
        raise ValueError("spaces live on different meshes")
    mesh = space_stream.mesh
    pts, w = volume_rule(mesh, 2 * space_multiplier.order + 2)

    def local(elems):
        phi = space_stream.tabulate(pts, elems)[0]
        _, gl = space_multiplier.tabulate(pts, elems, derivs=1)
        jw = np.abs(mesh.det[elems])[:, None] * w[None, :]
        return np.einsum("eq,eqic,eqjc->eij", jw, phi, gl[:, :, :, 0, :], optimize=True)

    return scatter(map_chunks(local, mesh.num_elements), space_stream.cell_dofs,
                   space_multiplier.cell_dofs, (space_stream.ndofs, space_multiplier.ndofs))


def assemble_load(case, space_stream: FESpace, degree: int = LOAD_DEGREE, mode: str = "curl") -> np.ndarray:
    """-(f, curl phi) for every free stream DOF (or -(f, v) with ``mode='value'``).

    ``case`` is a :class:`ManufacturedCase` or any callable f(x).
    """
    if degree < LOAD_DEGREE:
        raise ValueError(f"load quadrature degree must be >= {LOAD_DEGREE}")
    if mode == "curl":
        _check_stream(space_stream)
    f = case.f if isinstance(case, ManufacturedCase) else case
    mesh = space_stream.mesh
    pts, w = volume_rule(mesh, degree)

    def local(elems):
        v, _ = velocity_tabulation(space_stream, pts, elems, mode) if mode == "curl" else \
            (space_stream.tabulate(pts, elems)[0], None)
        fx = f(mesh.to_physical(pts, elems))
        jw = np.abs(mesh.det[elems])[:, None] * w[None, :]
        return -np.einsum("eq,eqc,eqjc->ej", jw, fx, v, optimize=True)

    return scatter_vector(map_chunks(local, mesh.num_elements, 128), space_stream.cell_dofs, space_stream.ndofs)


# ------------------------------------------------------------------ system
@dataclass
class LinearSystem:
    """Assembled symmetric block system with its spaces and block offsets.

    ``unknown_scale`` maps a field to the factor that turns the solved block
    into the physical coefficients (used by the viscosity-scaled variant).
    """
    matrix: sps.csr_matrix
    rhs: np.ndarray
    spaces: dict
    offsets: dict
    blocks: dict = field(default_factory=dict)
    unknown_scale: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def split(self, x: np.ndarray) -> dict:
        names = list(self.offsets)
        bounds = [self.offsets[n] for n in names] + [self.size]
        return {n: x[bounds[i]:bounds[i + 1]] * self.unknown_scale.get(n, 1.0) for i, n in enumerate(names)}

    def symmetry_defect(self) -> float:
        M = self.matrix
        diff = abs(M - M.T).max()
        return float(diff / max(abs(M).max(), 1e-300))


def build_spaces(mesh: Mesh, k: int) -> dict:
    """Stress, stream (and multiplier in 3D) spaces for stream order ``k``."""
    if k < 2:
        raise ValueError("stream order k must be >= 2")
    spaces = {"sigma": FESpace(mesh, "stress_nt", k - 1)}
    if mesh.dim == 2:
        spaces["psi"] = FESpace(mesh, "lagrange_h1", k)
    else:
        spaces["psi"] = FESpace(mesh, "nedelec_hcurl", k)
        spaces["lam"] = FESpace(mesh, "lagrange_h1", k + 1)
    return spaces


def assemble_system(case: ManufacturedCase, mesh: Mesh, k: int, representation: str = "primal",
                    spaces: dict | None = None, nu_scaled: bool = False) -> LinearSystem:
    """Block system for stream order ``k``.

    With ``nu_scaled`` the unknowns are (sigma/nu, psi, lam/nu): A becomes the
    plain stress mass matrix and the load is divided by nu.  The solution is
    the same, but the relative residual is no longer polluted by the 1/nu
    spread between the stress rows and the load (at nu = 1e-6 the unscaled
    system cannot be solved below ~eps/nu relative residual in double).
    ``split`` returns physical coefficients either way.
    """
    if case.dim != mesh.dim:
        raise ValueError("case and mesh dimensions differ")
    spaces = spaces or build_spaces(mesh, k)
    S, P = spaces["sigma"], spaces["psi"]
    A = assemble_a(S, 1.0 if nu_scaled else case.nu)
    B = assemble_b(S, P, representation)
    load = assemble_load(case, P)
    scale = {}
    if nu_scaled:
        load = load / case.nu
        scale = {"sigma": case.nu, "lam": case.nu}
    blocks = {"A": A, "B": B}
    if mesh.dim == 2:
        M = sps.bmat([[A, B.T], [B, None]], format="csr")
        rhs = np.concatenate([np.zeros(S.ndofs), load])
        offsets = {"sigma": 0, "psi": S.ndofs}
    else:
        L = spaces["lam"]
        G = assemble_gauge(P, L)
        blocks["G"] = G
        Z = sps.csr_matrix((S.ndofs, L.ndofs))
        M = sps.bmat([[A, B.T, Z], [B, None, G], [Z.T, G.T, None]], format="csr")
        rhs = np.concatenate([np.zeros(S.ndofs), load, np.zeros(L.ndofs)])
        offsets = {"sigma": 0, "psi": S.ndofs, "lam": S.ndofs + P.ndofs}
    M.sum_duplicates()
    M.sort_indices()
    return LinearSystem(M, rhs, spaces, offsets, blocks, scale)


def jump_weight_factor(mesh: Mesh) -> float:
    """Penalty weight 1/h of the discrete H1 norm (global h)."""
    return 1.0 / mesh.h


def facet_groups(mesh: Mesh):
    """Interior facets grouped by the local facet index seen from each owner.

    Yields (facets, elems0, lf0, elems1, lf1).  Boundary facets are yielded
    with ``elems1 = None``.
    """
    own = mesh.facet_owners
    interior = np.flatnonzero(mesh.facet_owner_count == 2)
    boundary = np.flatnonzero(mesh.facet_owner_count == 1)
    d = mesh.dim
    for lf0 in range(d + 1):
        sel = boundary[own[boundary, 0, 1] == lf0]
        if len(sel):
            yield sel, own[sel, 0, 0], lf0, None, None
    for lf0 in range(d + 1):
        for lf1 in range(d + 1):
            sel = interior[(own[interior, 0, 1] == lf0) & (own[interior, 1, 1] == lf1)]
            if len(sel):
                yield sel, own[sel, 0, 0], lf0, own[sel, 1, 0], lf1


def assemble_h1h_inner(space_v: FESpace) -> sps.csr_matrix:
    """(w, v)_{1,h} = sum_T (grad w, grad v)_T + sum_F (1/h) ([[w_t]], [[v_t]])_F."""
    mesh = space_v.mesh
    d = mesh.dim
    pts, w = volume_rule(mesh, 2 * space_v.order + 2)

    def local(elems):
        _, g = space_v.tabulate(pts, elems, derivs=1)
        jw = np.abs(mesh.det[elems])[:, None] * w[None, :]
        return np.einsum("eq,eqicj,eqkcj->eik", jw, g, g, optimize=True)

    cd = space_v.cell_dofs
    n = space_v.ndofs
    K = scatter(map_chunks(local, mesh.num_elements), cd, cd, (n, n))
    s, ws = facet_rule(mesh, 2 * space_v.order + 2)
    combos = local_entities(d, d - 1)
    pen = jump_weight_factor(mesh)
    for facets, e0, lf0, e1, lf1 in facet_groups(mesh):
        nrm = mesh.facet_normals[facets]
        fw = (mesh.facet_measures[facets] * pen)[:, None] * ws[None, :]

        def tangential(elems, lf):
            v = space_v.tabulate(entity_points(d, combos[lf], s), elems)[0]
            return v - np.einsum("eqia,ea,eb->eqib", v, nrm, nrm)

        t0 = tangential(e0, lf0)
        if e1 is None:
            jump, dofs = t0, cd[e0]
        else:
            jump = np.concatenate([t0, -tangential(e1, lf1)], axis=2)
            dofs = np.concatenate([cd[e0], cd[e1]], axis=1)
        loc = np.einsum("eq,eqia,eqja->eij", fw, jump, jump, optimize=True)
        K = K + scatter(loc, dofs, dofs, (n, n))
    K.sum_duplicates()
    return K


def assemble_divergence(space_v: FESpace, space_q: FESpace) -> sps.csr_matrix:
    """(div v, q): rows pressure DOFs, columns velocity DOFs."""
    mesh = space_v.mesh
    pts, w = volume_rule(mesh, space_v.order + space_q.order + 2)

    def local(elems):
        _, g = space_v.tabulate(pts, elems, derivs=1)
        q = space_q.tabulate(pts, elems)[0][..., 0]
        div = np.einsum("eqjcc->eqj", g)
        jw = np.abs(mesh.det[elems])[:, None] * w[None, :]
        return np.einsum("eq,eqi,eqj->eij", jw, q, div, optimize=True)

    return scatter(map_chunks(local, mesh.num_elements), space_q.cell_dofs, space_v.cell_dofs,
                   (space_q.ndofs, space_v.ndofs))


def assemble_mean(space_q: FESpace) -> np.ndarray:
    """Integrals of the basis functions of a scalar space."""
    mesh = space_q.mesh
    pts, w = volume_rule(mesh, space_q.order)

    def local(elems):
        q = space_q.tabulate(pts, elems)[0][..., 0]
        return np.einsum("q,e,eqi->ei", w, np.abs(mesh.det[elems]), q)

    return scatter_vector(map_chunks(local, mesh.num_elements), space_q.cell_dofs, space_q.ndofs)


__all__ = [
    "LinearSystem", "assemble_a", "assemble_b", "assemble_b_velocity", "assemble_gauge",
    "assemble_load", "assemble_system", "build_spaces", "assemble_h1h_inner",
    "assemble_divergence", "assemble_mean", "set_threads",
]
