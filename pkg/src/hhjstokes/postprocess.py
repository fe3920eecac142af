"""Velocity reconstruction, pressure recovery and error norms."""
from __future__ import annotations

from dataclasses import dataclass, field
from math import log

import numpy as np
import scipy.sparse as sps

from . import assembly as asm
from .fespace import FEFunction, FESpace, entity_points
from .mesh import local_entities
from .solver import DEFAULT_TOL, solve

ERROR_DEGREE = 18
ERROR_KEYS = ("h1semi_u", "l2_sigma", "l2_p", "l2_u", "h1h_u")


class PressureRecoveryError(RuntimeError):
    pass


def velocity_eval(psi_h: FEFunction, ref_points, elems=None):
    """u_h = curl(psi_h) and its gradient on ``elems``: (ne, nq, d), (ne, nq, d, d)."""
    space = psi_h.space
    if elems is None:
        elems = np.arange(space.mesh.num_elements)
    v, gv = asm.velocity_tabulation(space, ref_points, elems, "curl")
    loc = space.local_coefficients(psi_h.coefficients, elems)
    return np.einsum("eqjc,ej->eqc", v, loc), np.einsum("eqjcl,ej->eqcl", gv, loc)


def divergence_defect(psi_h: FEFunction, ref_points=None) -> float:
    """max |div curl(psi_h)| over the given (default: degree-18 quadrature) points."""
    mesh = psi_h.space.mesh
    if ref_points is None:
        ref_points, _ = asm.volume_rule(mesh, ERROR_DEGREE)
    worst = 0.0
    for elems in asm.element_chunks(mesh.num_elements, 256):
        _, g = velocity_eval(psi_h, ref_points, elems)
        worst = max(worst, float(np.abs(np.einsum("eqcc->eq", g)).max()))
    return worst


# --------------------------------------------------------------- pressure
@dataclass
class PressureResult:
    p_h: FEFunction
    w_h: FEFunction
    w_norm: float
    p_norm: float
    residual: float
    w_relative: float = 0.0


def recover_pressure(sigma_h: FEFunction, case, k: int, tol: float = DEFAULT_TOL,
                     check: float = 1e-8) -> PressureResult:
    """Recover p_h in the discontinuous zero-mean space of order k-2.

    Solves the saddle problem for (w_h, p_h) in BDM^{k-1} x P^{k-2}_disc:

        (w, v)_{1,h} + (div v, p) = -(f, v) - b(sigma_h, v)
        (div w, q)                = 0

    Pressures are fixed up to a constant; one element constant is pinned
    (a dense mean row would destroy the sparse factorisation) and the mean
    is removed afterwards.  Discrete exactness forces w_h = 0; a nonzero
    w_h is reported as an error.
    """
    S = sigma_h.space
    mesh = S.mesh
    V = FESpace(mesh, "bdm_hdiv", k - 1)
    Q = FESpace(mesh, "dg_l2_zeromean", k - 2)
    K = asm.assemble_h1h_inner(V)
    D = asm.assemble_divergence(V, Q)
    m = asm.assemble_mean(Q)
    Bv = asm.assemble_b_velocity(S, V)
    F = asm.assemble_load(case, V, mode="value") - Bv @ sigma_h.coefficients
    const = np.zeros(Q.ndofs)
    const[Q.cell_dofs[:, 0]] = 1.0             # coefficients of p = 1
    keep = np.ones(Q.ndofs, dtype=bool)
    keep[Q.cell_dofs[0, 0]] = False
    Dk = D[keep]
    M = sps.bmat([[K, Dk.T], [Dk, None]], format="csr")
    rhs = np.concatenate([F, np.zeros(Dk.shape[0])])
    x = np.zeros(M.shape[0])
    residual = 0.0
    if np.any(rhs):
        rep = solve((M, rhs), tol=tol, method="direct")
        x, residual = rep.solution, rep.residual
    pc = np.zeros(Q.ndofs)
    pc[keep] = x[V.ndofs:]
    pc -= (m @ pc) / (m @ const) * const
    w = FEFunction(V, x[:V.ndofs])
    p = FEFunction(Q, pc)
    w_norm = float(np.sqrt(max(w.coefficients @ (K @ w.coefficients), 0.0)))
    p_norm = l2_norm(p)
    # relative to the data: p_h itself may vanish (symmetric meshes)
    scale = max(p_norm, load_norm(case, mesh), 1e-300)
    w_rel = w_norm / scale
    if check is not None and w_rel > check:
        raise PressureRecoveryError(f"auxiliary velocity not zero: |w_h|_1h = {w_norm:.3e} ({w_rel:.3e} relative)")
    return PressureResult(p, w, w_norm, p_norm, residual, w_rel)


def l2_norm(fn: FEFunction) -> float:
    mesh = fn.space.mesh
    pts, w = asm.volume_rule(mesh, 2 * fn.space.pdeg)
    total = 0.0
    for elems in asm.element_chunks(mesh.num_elements):
        v = fn.evaluate(pts, elems)[0]
        total += float(np.einsum("q,e,eqc,eqc->", w, np.abs(mesh.det[elems]), v, v))
    return float(np.sqrt(total))


def gradient_l2_norm(fn: FEFunction) -> float:
    """||grad fn||_{L2} of a scalar function (used for the gauge multiplier)."""
    mesh = fn.space.mesh
    pts, w = asm.volume_rule(mesh, 2 * fn.space.pdeg)
    total = 0.0
    for elems in asm.element_chunks(mesh.num_elements):
        g = fn.evaluate(pts, elems, derivs=1)[1]
        total += float(np.einsum("q,e,eqcj,eqcj->", w, np.abs(mesh.det[elems]), g, g))
    return float(np.sqrt(total))


def nt_jump(sigma_h: FEFunction, degree: int = 10) -> float:
    """Largest mismatch of the normal-tangential stress trace across interior facets."""
    mesh = sigma_h.space.mesh
    d = mesh.dim
    s, _ = asm.facet_rule(mesh, degree)
    combos = local_entities(d, d - 1)
    worst = 0.0
    for facets, e0, lf0, e1, lf1 in asm.facet_groups(mesh):
        if e1 is None:
            continue
        nrm = mesh.facet_normals[facets]
        tan = mesh.facet_tangents[facets]

        def trace(elems, lf):
            val = sigma_h.evaluate(entity_points(d, combos[lf], s), elems)[0]
            val = val.reshape(len(elems), len(s), d, d)
            return np.einsum("eta,eqab,eb->eqt", tan, val, nrm)

        worst = max(worst, float(np.abs(trace(e0, lf0) - trace(e1, lf1)).max()))
    return worst


def load_norm(case, mesh, degree: int = ERROR_DEGREE) -> float:
    """||f||_{L2} of a case (or any callable f) by quadrature."""
    f = getattr(case, "f", case)
    pts, w = asm.volume_rule(mesh, degree)
    total = 0.0
    for elems in asm.element_chunks(mesh.num_elements, 256):
        fx = f(mesh.to_physical(pts, elems))
        total += float(np.einsum("q,e,eqc,eqc->", w, np.abs(mesh.det[elems]), fx, fx))
    return float(np.sqrt(total))


# ------------------------------------------------------------------ errors
@dataclass
class ErrorReport:
    num_elements: int
    ndofs: dict
    errors: dict
    eoc: dict = field(default_factory=dict)
    h: float = float("nan")

    def with_eoc(self, previous: "ErrorReport | None") -> "ErrorReport":
        """Estimated orders against ``previous`` (assumed to have twice the mesh size)."""
        self.eoc = {}
        if previous is None:
            return self
        for key, e in self.errors.items():
            e0 = previous.errors.get(key)
            if e0 and e and e0 > 0 and e > 0:
                self.eoc[key] = log(e0 / e) / log(previous.h / self.h)
        return self


def _tangential_jump_sq(psi_h: FEFunction, case, degree: int) -> float:
    """sum_F (1/h) ||[[(u - u_h)_t]]||_F^2 with u = 0 outside the domain."""
    mesh = psi_h.space.mesh
    d = mesh.dim
    s, ws = asm.facet_rule(mesh, degree)
    combos = local_entities(d, d - 1)
    total = 0.0
    for facets, e0, lf0, e1, lf1 in asm.facet_groups(mesh):
        nrm = mesh.facet_normals[facets]

        def trace(elems, lf):
            ref = entity_points(d, combos[lf], s)
            uh, _ = velocity_eval(psi_h, ref, elems)
            u = case.u(mesh.to_physical(ref, elems))
            err = u - uh
            return err - np.einsum("eqa,ea,eb->eqb", err, nrm, nrm)

        jump = trace(e0, lf0) if e1 is None else trace(e0, lf0) - trace(e1, lf1)
        fw = mesh.facet_measures[facets][:, None] * ws[None, :]
        total += float(np.einsum("eq,eqa,eqa->", fw, jump, jump))
    return total / mesh.h


def error_norms(case, sigma_h: FEFunction, psi_h: FEFunction, p_h: FEFunction | None = None,
                previous: ErrorReport | None = None, degree: int = ERROR_DEGREE,
                extra_dofs: dict | None = None) -> ErrorReport:
    """Errors of the discrete velocity, stress and pressure against ``case``."""
    mesh = psi_h.space.mesh
    d = mesh.dim
    pts, w = asm.volume_rule(mesh, degree)
    acc = dict.fromkeys(("h1semi_u", "l2_sigma", "l2_p", "l2_u"), 0.0)

    def local(elems):
        x = mesh.to_physical(pts, elems)
        jw = np.abs(mesh.det[elems])[:, None] * w[None, :]
        uh, guh = velocity_eval(psi_h, pts, elems)
        eu = case.u(x) - uh
        egu = case.grad_u(x) - guh
        sh = sigma_h.evaluate(pts, elems)[0].reshape(len(elems), len(w), d, d)
        es = case.sigma(x) - sh
        out = {
            "h1semi_u": np.einsum("eq,eqij,eqij->", jw, egu, egu),
            "l2_sigma": np.einsum("eq,eqij,eqij->", jw, es, es),
            "l2_u": np.einsum("eq,eqi,eqi->", jw, eu, eu),
            "l2_p": 0.0,
        }
        if p_h is not None:
            ep = case.p(x) - p_h.evaluate(pts, elems)[0][..., 0]
            out["l2_p"] = np.einsum("eq,eq,eq->", jw, ep, ep)
        return out

    for part in asm.map_chunks(local, mesh.num_elements, 128):
        for key in acc:
            acc[key] += float(part[key])
    errors = {key: float(np.sqrt(val)) for key, val in acc.items()}
    if p_h is None:
        errors["l2_p"] = float("nan")
    errors["h1h_u"] = float(np.sqrt(acc["h1semi_u"] + _tangential_jump_sq(psi_h, case, min(degree, 20))))
    ndofs = {"sigma": sigma_h.space.ndofs, "psi": psi_h.space.ndofs}
    ndofs.update(extra_dofs or {})
    report = ErrorReport(mesh.num_elements, ndofs, errors, h=mesh.h)
    return report.with_eoc(previous)
