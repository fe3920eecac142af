"""Finite element spaces: Lagrange, Nedelec (second kind), BDM, the trace-free
normal-tangential continuous stress space, and discontinuous pressures.

Every element-local basis is the dual basis of the element's degrees of
freedom, computed on the physical element by inverting a small generalized
Vandermonde matrix.  Vector and matrix valued functions are expanded in
physical components, ``v = sum_g sum_a c_{g,a} G_g psi_a(xhat)`` where ``G_g``
is a constant generator (unit vector or trace-free unit matrix) and
``psi_a`` the reference scalar basis.  No Piola maps are involved.

Shared degrees of freedom are moments on a facet or edge taken in the
canonical frame of that entity (ascending global vertices), so every owner
addresses the identical functional.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import polynomials as poly
from .mesh import Mesh, local_entities
from .quadrature import simplex_rule

FAMILIES = ("lagrange_h1", "nedelec_hcurl", "bdm_hdiv", "stress_nt", "dg_l2_zeromean")

# highest supported order per (family, dim)
MAX_ORDER = {
    ("lagrange_h1", 2): 4, ("lagrange_h1", 3): 4,
    ("bdm_hdiv", 2): 4, ("bdm_hdiv", 3): 3,
    ("stress_nt", 2): 4, ("stress_nt", 3): 3,
    ("dg_l2_zeromean", 2): 4, ("dg_l2_zeromean", 3): 3,
    ("nedelec_hcurl", 3): 3,
}
MIN_ORDER = {"lagrange_h1": 1, "nedelec_hcurl": 1, "bdm_hdiv": 1, "stress_nt": 1,
             "dg_l2_zeromean": 0}


class UnisolvenceError(RuntimeError):
    """A set of local degrees of freedom is not unisolvent on some element."""


def _reference_vertices(dim: int) -> np.ndarray:
    return np.vstack([np.zeros(dim), np.eye(dim)])


def entity_points(dim: int, combo, s: np.ndarray) -> np.ndarray:
    """Map parameter points ``s`` of a local sub-simplex into reference coordinates."""
    v = _reference_vertices(dim)[list(combo)]
    s = np.asarray(s, dtype=float).reshape(len(s), -1)
    return v[0] + s @ (v[1:] - v[0]) if len(combo) > 1 else np.repeat(v[:1], len(s), axis=0)


def trace_free_generators(dim: int) -> np.ndarray:
    gens = []
    for i in range(dim):
        for j in range(dim):
            if i != j:
                E = np.zeros((dim, dim))
                E[i, j] = 1.0
                gens.append(E)
    for i in range(dim - 1):
        E = np.zeros((dim, dim))
        E[i, i], E[-1, -1] = 1.0, -1.0
        gens.append(E)
    return np.array(gens).reshape(len(gens), dim * dim)


def _null_space(M: np.ndarray, rank: int, what: str) -> np.ndarray:
    """Batched orthonormal null space of (ne, r, n) matrices of known rank."""
    _, s, vt = np.linalg.svd(M, full_matrices=True)
    scale = np.maximum(s[:, :1], 1e-300)
    if rank and (s[:, rank - 1:rank] / scale).min() < 1e-10:
        bad = int(np.argmin(s[:, rank - 1] / scale[:, 0]))
        raise UnisolvenceError(f"{what}: rank deficient on element {bad}")
    return np.transpose(vt[:, rank:, :], (0, 2, 1))


@dataclass
class _Group:
    """Moment functionals ``sum_q sum_c W[e, f, q, c] v_c(x_q)`` on one local entity."""
    ref_points: np.ndarray     # (nq, dim)
    weights: np.ndarray        # (ne, nfunc, nq, ncomp) or broadcastable


class FESpace:
    """A finite element space on a :class:`Mesh`.

    Attributes of interest: ``ndofs`` (free DOFs), ``cell_dofs`` (element to
    free-DOF map, ``-1`` for eliminated boundary DOFs), ``nloc`` and
    ``value_shape``.
    """

    def __init__(self, mesh: Mesh, family: str, order: int):
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r}")
        d = mesh.dim
        if (family, d) not in MAX_ORDER:
            raise ValueError(f"{family} is not available in {d}D")
        if not MIN_ORDER[family] <= order <= MAX_ORDER[family, d]:
            raise ValueError(f"order {order} unsupported for {family} in {d}D")
        self.mesh = mesh
        self.family = family
        self.order = int(order)
        self.dim = d
        self.zero_mean = family == "dg_l2_zeromean"
        self._setup_layout()
        self._setup_basis()
        self._number_dofs()

    # ------------------------------------------------------------------ layout
    def _setup_layout(self):
        d, p, fam = self.dim, self.order, self.family
        nd = {m: 0 for m in range(d + 1)}
        constrained = ()
        if fam == "lagrange_h1":
            for m in range(d + 1):
                nd[m] = len(poly.lattice(m, p, interior_only=True))
            constrained = tuple(range(d))
            self.gens, self.pdeg = np.ones((1, 1)), p
        elif fam == "dg_l2_zeromean":
            nd[d] = poly.dim_poly(d, p)
            self.gens, self.pdeg = np.ones((1, 1)), p
        elif fam == "bdm_hdiv":
            nd[d - 1] = poly.dim_poly(d - 1, p)
            constrained = (d - 1,)
            self.gens, self.pdeg = np.eye(d), p
        elif fam == "nedelec_hcurl":
            nd[1] = p + 1
            nd[2] = (p + 1) * (p - 1)
            constrained = (1, 2)
            self.gens, self.pdeg = np.eye(d), p
        elif fam == "stress_nt":
            nd[d - 1] = (d - 1) * poly.dim_poly(d - 1, p - 1)
            self.gens, self.pdeg = trace_free_generators(d), p
        self.ncomp = self.gens.shape[1]
        self.value_shape = {1: (), d: (d,), d * d: (d, d)}[self.ncomp]
        self.N = poly.dim_poly(d, self.pdeg)
        self.nfull = len(self.gens) * self.N
        ncons = 0
        if fam == "stress_nt":
            ncons = (d + 1) * (d - 1) * (poly.dim_poly(d - 1, p) - poly.dim_poly(d - 1, p - 1))
        self.ncons = ncons
        nent = sum(nd[m] * len(local_entities(d, m)) for m in range(d))
        if fam in ("lagrange_h1", "dg_l2_zeromean"):
            nent += nd[d]
        else:
            nd[d] = self.nfull - ncons - nent
        if nd[d] < 0:
            raise UnisolvenceError("more entity functionals than local dimension")
        self.entity_dofs = nd
        self.constrained_dims = constrained
        self.nloc = self.nfull - ncons

    @cached_property
    def local_dof_entities(self) -> list[tuple[int, int, int]]:
        """(entity dim, local entity, index within entity) of every local DOF."""
        d = self.dim
        out = []
        for m in range(d + 1):
            for le in range(len(local_entities(d, m))):
                out += [(m, le, j) for j in range(self.entity_dofs[m])]
        return out

    # ----------------------------------------------------------- functionals
    def _component_tab(self, points: np.ndarray) -> np.ndarray:
        """Full basis at reference points: (nq, ngen*N, ncomp)."""
        psi = poly.tabulate(self.dim, self.pdeg, points)[0]
        return np.einsum("gc,qa->qgac", self.gens, psi).reshape(len(points), self.nfull, self.ncomp)

    def _moments(self, group: _Group) -> np.ndarray:
        tab = self._component_tab(group.ref_points)
        return np.einsum("efqc,qnc->efn", group.weights, tab, optimize=True)

    def _entity_rule(self, m: int, degree: int):
        rule = simplex_rule(m, degree) if m > 0 else None
        if rule is None:
            return np.zeros((1, 0)), np.ones(1)
        return rule.points, rule.weights / rule.weights.sum()

    def _groups(self, kind: str = "dofs"):
        """Yield moment groups.  ``kind`` is 'dofs' (entity DOFs) or 'constraints'."""
        mesh, d, p, fam = self.mesh, self.dim, self.order, self.family
        ne = mesh.num_elements
        if fam == "dg_l2_zeromean":
            return
        if fam == "lagrange_h1":
            if kind != "dofs":
                return
            for m in range(d + 1):
                lat = poly.lattice(m, p, interior_only=True)
                if not len(lat):
                    continue
                for combo in local_entities(d, m):
                    s = lat[:, 1:] / p
                    pts = entity_points(d, combo, s)
                    W = np.broadcast_to(np.eye(len(pts))[None, :, :, None], (ne, len(pts), len(pts), 1))
                    yield _Group(pts, W)
            return
        if fam == "bdm_hdiv":
            if kind != "dofs":
                return
            s, w = self._entity_rule(d - 1, 2 * p)
            test = poly.orthonormal_tabulate(d - 1, p, s)               # (nq, nf)
            for f, combo in enumerate(local_entities(d, d - 1)):
                n = mesh.facet_normals[mesh.cell_entities[d - 1][:, f]]  # (ne, d)
                W = np.einsum("q,qj,ec->ejqc", w, test, n)
                yield _Group(entity_points(d, combo, s), W)
            return
        if fam == "nedelec_hcurl":
            if kind != "dofs":
                return
            s, w = self._entity_rule(1, 2 * p)
            test = poly.orthonormal_tabulate(1, p, s)
            X = mesh.vertices
            for le, combo in enumerate(local_entities(d, 1)):
                E = mesh.edges[mesh.cell_entities[1][:, le]]
                t = X[E[:, 1]] - X[E[:, 0]]
                t /= np.linalg.norm(t, axis=1)[:, None]
                yield _Group(entity_points(d, combo, s), np.einsum("q,qj,ec->ejqc", w, test, t))
            if self.entity_dofs[2]:
                s, w = self._entity_rule(2, 2 * p)
                a = _face_bubbles(p, s)                                  # (2, nq, nb)
                for lf, combo in enumerate(local_entities(d, 2)):
                    F = mesh.entities[2][mesh.cell_entities[2][:, lf]]
                    JF = np.stack([X[F[:, 1]] - X[F[:, 0]], X[F[:, 2]] - X[F[:, 0]]], axis=2)
                    G = JF @ np.linalg.inv(np.transpose(JF, (0, 2, 1)) @ JF)   # (ne, 3, 2)
                    W = np.einsum("q,kqj,eck->ejqc", w, a, G)
                    yield _Group(entity_points(d, combo, s), W)
            return
        if fam == "stress_nt":
            s, w = self._entity_rule(d - 1, 2 * p)
            test = poly.orthonormal_tabulate(d - 1, p, s)
            nlow = poly.dim_poly(d - 1, p - 1)
            test = test[:, :nlow] if kind == "dofs" else test[:, nlow:]
            for f, combo in enumerate(local_entities(d, d - 1)):
                g = mesh.cell_entities[d - 1][:, f]
                n = mesh.facet_normals[g]
                t = mesh.facet_tangents[g]                               # (ne, d-1, d)
                tn = np.einsum("eia,eb->eiab", t, n).reshape(ne, d - 1, d * d)
                W = np.einsum("q,qj,eic->eijqc", w, test, tn).reshape(ne, -1, len(w), d * d)
                yield _Group(entity_points(d, combo, s), W)
            return

    # ---------------------------------------------------------------- basis
    def _setup_basis(self):
        d, ne = self.dim, self.mesh.num_elements
        if self.family == "dg_l2_zeromean":
            C = np.eye(self.nfull)
            self._coeffs = np.broadcast_to(C, (ne,) + C.shape)
            self._interior_tests = None
            self._set_component_coeffs()
            return
        rule = simplex_rule(d, 2 * self.pdeg)
        tab = self._component_tab(rule.points)
        w = rule.weights / rule.weights.sum()
        self._ref_mass = np.einsum("q,qnc,qmc->nm", w, tab, tab)        # unit-volume mass

        if self.family == "lagrange_h1":
            # functionals do not depend on the element: invert once
            L = np.concatenate([self._moments(_Group(g.ref_points, g.weights[:1])) for g in self._groups()], axis=1)[0]
            if abs(np.linalg.det(L)) < 1e-12:
                raise UnisolvenceError("Lagrange nodes not unisolvent")
            C = np.linalg.inv(L)
            self._coeffs = np.broadcast_to(C, (ne,) + C.shape)
            self._interior_tests = None
            self._set_component_coeffs()
            return

        if self.ncons:
            cons = np.concatenate([self._moments(g) for g in self._groups("constraints")], axis=1)
            R = _null_space(cons, self.ncons, f"{self.family} trace constraints")
        else:
            R = np.broadcast_to(np.eye(self.nfull), (ne, self.nfull, self.nfull))
        L = np.concatenate([self._moments(g) for g in self._groups("dofs")], axis=1)
        nent = L.shape[1]
        LR = L @ R
        if self.entity_dofs[d]:
            K = _null_space(LR, nent, f"{self.family} entity functionals")
            B = R @ K                                                    # interior test fields
            # L2-orthonormal bubbles keep the dual basis well scaled
            G = np.transpose(B, (0, 2, 1)) @ self._ref_mass @ B
            Lc = np.linalg.cholesky(G)
            B = np.transpose(np.linalg.solve(Lc, np.transpose(B, (0, 2, 1))), (0, 2, 1))
            Mb = np.transpose(B, (0, 2, 1)) @ self._ref_mass @ R
            V = np.concatenate([LR, Mb], axis=1)
            self._interior_tests = B
        else:
            V = LR
            self._interior_tests = None
        cond = np.linalg.cond(V)
        if not np.all(np.isfinite(cond)) or cond.max() > 1e12:
            bad = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
            raise UnisolvenceError(f"{self.family} order {self.order}: singular local Vandermonde on element {bad}")
        self._coeffs = R @ _refined_inverse(V)
        self._set_component_coeffs()

    def _set_component_coeffs(self):
        ne = self.mesh.num_elements
        ngen = len(self.gens)
        C = self._coeffs.reshape(ne if self._coeffs.shape[0] == ne else 1, ngen, self.N, self.nloc)
        if self.family in ("lagrange_h1", "dg_l2_zeromean"):
            comp = C[:1].reshape(1, 1, self.N, self.nloc)
            self.component_coeffs = np.broadcast_to(comp, (ne, 1, self.N, self.nloc))
        else:
            self.component_coeffs = np.einsum("gc,egaj->ecaj", self.gens, C)

    # ------------------------------------------------------------- numbering
    def _number_dofs(self):
        mesh, d = self.mesh, self.dim
        offsets, total = {}, 0
        for m in range(d):
            offsets[m] = total
            total += self.entity_dofs[m] * len(mesh.entities[m])
        offsets[d] = total
        total += self.entity_dofs[d] * mesh.num_elements
        glob = np.empty((mesh.num_elements, self.nloc), dtype=np.int64)
        for j, (m, le, k) in enumerate(self.local_dof_entities):
            ent = mesh.cell_entities[m][:, le] if m < d else np.arange(mesh.num_elements)
            glob[:, j] = offsets[m] + ent * self.entity_dofs[m] + k
        constrained = np.zeros(total, dtype=bool)
        for m in self.constrained_dims:
            nd = self.entity_dofs[m]
            if nd == 0:
                continue
            ents = np.flatnonzero(mesh.boundary_entities[m])
            idx = offsets[m] + ents[:, None] * nd + np.arange(nd)
            constrained[idx.ravel()] = True
        free = np.cumsum(~constrained) - 1
        free[constrained] = -1
        self.num_all_dofs = total
        self.constrained_dofs = np.flatnonzero(constrained)
        self.ndofs = int((~constrained).sum())
        self.cell_dofs = free[glob]

    # ------------------------------------------------------------ tabulation
    def tabulate(self, ref_points: np.ndarray, elems=None, derivs: int = 0):
        """Basis values (ne, nq, nloc, ncomp), physical gradients
        (..., ncomp, d) and Hessians (..., ncomp, d, d) on ``elems``."""
        if elems is None:
            elems = np.arange(self.mesh.num_elements)
        elems = np.asarray(elems)
        ref = poly.tabulate(self.dim, self.pdeg, ref_points, derivs)
        C = self.component_coeffs[elems]
        out = [np.einsum("qa,ecaj->eqjc", ref[0], C, optimize=True)]
        if derivs >= 1:
            Jinv = self.mesh.Jinv[elems]
            g = np.einsum("qak,eki->eqai", ref[1], Jinv, optimize=True)
            out.append(np.einsum("eqai,ecaj->eqjci", g, C, optimize=True))
        if derivs >= 2:
            H = np.einsum("qakm,eki,eml->eqail", ref[2], Jinv, Jinv, optimize=True)
            out.append(np.einsum("eqail,ecaj->eqjcil", H, C, optimize=True))
        return out

    def element_basis(self, elem: int, ref_points: np.ndarray, derivs: int = 1):
        """Values and derivatives of all local shape functions of one element.

        Value arrays have shape (nq, nloc) + value_shape; derivative arrays
        append one (gradient) or two (Hessian) trailing axes of length d.
        """
        if not 0 <= elem < self.mesh.num_elements:
            raise IndexError(elem)
        tabs = self.tabulate(ref_points, [elem], derivs)
        nq = len(ref_points)
        out = []
        for i, t in enumerate(tabs):
            out.append(t[0].reshape((nq, self.nloc) + self.value_shape + (self.dim,) * i))
        return out

    def local_coefficients(self, coefficients: np.ndarray, elems=None) -> np.ndarray:
        cd = self.cell_dofs if elems is None else self.cell_dofs[elems]
        vals = np.asarray(coefficients)[np.maximum(cd, 0)]
        return np.where(cd >= 0, vals, 0.0)

    # --------------------------------------------------------------- summary
    def dof_functionals(self) -> list[tuple[int, int, str]]:
        """(entity dim, local entity, description) of each local functional."""
        kinds = {"lagrange_h1": "point value", "bdm_hdiv": "normal moment",
                 "nedelec_hcurl": "tangential moment", "stress_nt": "nt moment",
                 "dg_l2_zeromean": "interior moment"}
        out = []
        for m, le, _ in self.local_dof_entities:
            desc = kinds[self.family] if m < self.dim or self.family in ("lagrange_h1",) else "interior moment"
            out.append((m, le, desc))
        return out

    def __repr__(self):
        return f"FESpace({self.family}, order={self.order}, dim={self.dim}, ndofs={self.ndofs})"


def _refined_inverse(V: np.ndarray) -> np.ndarray:
    """Batched inverse with one refinement step, residual in extended precision.

    Neighbouring elements must reproduce the same traces; the plain inverse
    leaves cond(V) * eps mismatches, the refined one close to eps.
    """
    X = np.linalg.inv(V)
    Vl = V.astype(np.longdouble)
    E = np.eye(V.shape[-1], dtype=np.longdouble) - Vl @ X.astype(np.longdouble)
    return X + np.einsum("eij,ejk->eik", X, E.astype(float))


def _face_bubbles(p: int, s: np.ndarray) -> np.ndarray:
    """Covariant coefficients (a1, a2) of tangential face bubbles at points s.

    A face field ``a1 grad(lambda_b) + a2 grad(lambda_c)`` has tangential
    component a1 on edge ab, a2 on edge ac and a2 - a1 on edge bc; the bubbles
    are the coefficient pairs of degree p for which all three vanish.
    Returns (2, nq, nbubbles).
    """
    N = poly.dim_poly(2, p)
    t = np.linspace(0.0, 1.0, p + 1)[:, None]
    ab = np.column_stack([t[:, 0], np.zeros(p + 1)])
    ac = np.column_stack([np.zeros(p + 1), t[:, 0]])
    bc = np.column_stack([1.0 - t[:, 0], t[:, 0]])
    Vab, Vac, Vbc = (poly.tabulate(2, p, x)[0] for x in (ab, ac, bc))
    Z = np.zeros_like(Vab)
    cons = np.block([[Vab, Z], [Z, Vac], [-Vbc, Vbc]])
    _, sv, vt = np.linalg.svd(cons)
    rank = int((sv > 1e-10 * sv[0]).sum())
    nb = (p + 1) * (p - 1)
    if 2 * N - rank != nb:
        raise UnisolvenceError("face bubble dimension mismatch")
    ker = vt[rank:].T                                                    # (2N, nb)
    rule = simplex_rule(2, 2 * p)
    Vq = poly.tabulate(2, p, rule.points)[0]
    w = rule.weights / rule.weights.sum()
    vals = np.stack([Vq @ ker[:N], Vq @ ker[N:]])
    G = np.einsum("q,kqi,kqj->ij", w, vals, vals)
    ker = ker @ np.linalg.inv(np.linalg.cholesky(G)).T
    V = poly.tabulate(2, p, s)[0]
    return np.stack([V @ ker[:N], V @ ker[N:]])


@dataclass
class FEFunction:
    """A coefficient vector over the free DOFs of a space."""
    space: FESpace
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.space.ndofs,):
            raise ValueError(f"expected {self.space.ndofs} coefficients, got {self.coefficients.shape}")

    def evaluate(self, ref_points: np.ndarray, elems=None, derivs: int = 0):
        """Values (ne, nq, ncomp) and optionally derivatives on ``elems``."""
        tabs = self.space.tabulate(ref_points, elems, derivs)
        loc = self.space.local_coefficients(self.coefficients, elems)
        return [np.einsum("eqj...,ej->eq...", t, loc) for t in tabs]


def build_space(mesh: Mesh, family: str, order: int) -> FESpace:
    return FESpace(mesh, family, order)


def zero_function(space: FESpace) -> FEFunction:
    return FEFunction(space, np.zeros(space.ndofs))


def interpolate_l2_local(space: FESpace, field) -> FEFunction:
    """Interpolate an analytic field ``field(x) -> values`` into ``space``.

    Discontinuous spaces use the element-wise L2 projection (followed by mean
    removal for zero-mean pressures); conforming spaces evaluate their DOF
    functionals.  ``field`` maps points (..., d) to values (...,) + value_shape.
    """
    mesh, d = space.mesh, space.dim
    ne = mesh.num_elements
    if space.family == "dg_l2_zeromean":
        rule = simplex_rule(d, min(2 * space.pdeg + 8, 20))
        phi = space.tabulate(rule.points)[0][..., 0]                     # (ne, nq, N)
        x = mesh.to_physical(rule.points)
        fv = np.asarray(field(x), dtype=float).reshape(ne, len(rule.points))
        M = np.einsum("q,eqi,eqj->eij", rule.weights, phi, phi)
        rhs = np.einsum("q,eqi,eq->ei", rule.weights, phi, fv)
        loc = np.linalg.solve(M, rhs[..., None])[..., 0]
        mean = np.einsum("e,ei,i->", mesh.volumes, loc, _dg_means(space)) / mesh.volumes.sum()
        loc[:, 0] -= mean
        coeffs = np.zeros(space.ndofs)
        coeffs[space.cell_dofs] = loc
        return FEFunction(space, coeffs)

    values = []
    for g in space._groups("dofs"):
        x = mesh.to_physical(g.ref_points)
        fv = np.asarray(field(x), dtype=float).reshape(ne, len(g.ref_points), space.ncomp)
        values.append(np.einsum("efqc,eqc->ef", g.weights, fv))
    if space._interior_tests is not None:
        rule = simplex_rule(d, min(2 * space.pdeg + 8, 20))
        tab = space._component_tab(rule.points)                          # (nq, nfull, ncomp)
        x = mesh.to_physical(rule.points)
        fv = np.asarray(field(x), dtype=float).reshape(ne, len(rule.points), space.ncomp)
        w = rule.weights / rule.weights.sum()
        proj = np.einsum("q,qnc,eqc->en", w, tab, fv)
        values.append(np.einsum("enb,en->eb", space._interior_tests, proj))
    loc = np.concatenate(values, axis=1)
    coeffs = np.zeros(space.ndofs)
    cd = space.cell_dofs
    mask = cd >= 0
    coeffs[cd[mask]] = loc[mask]
    return FEFunction(space, coeffs)


def _dg_means(space: FESpace) -> np.ndarray:
    """Reference averages of the scalar basis functions (unit-volume)."""
    rule = simplex_rule(space.dim, space.pdeg)
    psi = poly.tabulate(space.dim, space.pdeg, rule.points)[0]
    return rule.weights @ psi / rule.weights.sum()
