"""Sparse solvers for the symmetric indefinite systems.

``direct`` uses a sparse LU factorisation with a few steps of iterative
refinement.  ``iterative`` runs MINRES with a symmetric positive definite
block-diagonal preconditioner: the stress block uses the exact inverse of A,
the stream block the approximate Schur complement B diag(A)^-1 B^T (plus, in
3D, the stream mass coupling through the gauge), and the multiplier block
the Laplacian G^T M^-1 G.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

DEFAULT_TOL = 1e-10


class SolverError(RuntimeError):
    """Raised when the requested residual is not reached."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass
class SolveReport:
    solution: np.ndarray
    residual: float
    iterations: int
    method: str
    wall_time: float


def relative_residual(A, x: np.ndarray, b: np.ndarray) -> float:
    r = np.linalg.norm(A @ x - b)
    nb = np.linalg.norm(b)
    if nb > 0:
        return float(r / nb)
    scale = spla.norm(A, np.inf) * np.linalg.norm(x)
    return float(r / scale) if scale > 0 else float(r)


def _as_matrix(system):
    if hasattr(system, "matrix"):
        return system.matrix, system.rhs
    A, b = system
    return sps.csr_matrix(A), np.asarray(b, dtype=float)


def solve(system, tol: float = DEFAULT_TOL, method: str = "direct", maxiter: int = 2000) -> SolveReport:
    """Solve ``system`` (a LinearSystem or a ``(matrix, rhs)`` pair).

    Raises :class:`SolverError` if the relative residual exceeds ``tol``.
    """
    if not 1e-14 <= tol <= 1e-6:
        raise ValueError("tol must lie in [1e-14, 1e-6]")
    A, b = _as_matrix(system)
    t0 = time.perf_counter()
    if method == "direct":
        x, its = _direct(A, b, tol)
    elif method == "iterative":
        x, its = _minres(system, A, b, tol, maxiter)
    else:
        raise ValueError(f"unknown method {method!r}")
    res = relative_residual(A, x, b)
    wall = time.perf_counter() - t0
    if not np.isfinite(res) or res > tol:
        raise SolverError(f"{method} solve reached residual {res:.3e} > {tol:.1e}", res)
    return SolveReport(x, res, its, method, wall)


def _equilibrate(A):
    """Symmetric diagonal scaling D A D with unit row maxima (1/nu spreads the spectrum)."""
    rmax = abs(A).max(axis=1).toarray().ravel()
    rmax[rmax == 0] = 1.0
    return sps.diags(1.0 / np.sqrt(rmax))


def _direct(A, b, tol, refinements: int = 8):
    D = _equilibrate(A)
    try:
        lu = spla.splu(sps.csc_matrix(D @ A @ D), permc_spec="COLAMD")
    except RuntimeError as exc:        # "Factor is exactly singular"
        raise SolverError(f"singular factorisation: {exc}") from exc

    def apply(r):
        return D @ lu.solve(D @ r)

    x = apply(b)
    steps = 0
    for steps in range(1, refinements + 1):
        if relative_residual(A, x, b) <= tol / 10:
            break
        x = x + apply(b - A @ x)
    return x, steps


def _factor_spd(M):
    lu = spla.splu(sps.csc_matrix(M), permc_spec="MMD_AT_PLUS_A")
    return lu.solve


def block_preconditioner(system) -> spla.LinearOperator:
    blocks, offs = system.blocks, system.offsets
    A, B = blocks["A"], blocks["B"]
    ns, npsi = A.shape[0], B.shape[0]
    solve_a = _factor_spd(A)
    dinv = sps.diags(1.0 / A.diagonal())
    S = (B @ dinv @ B.T).tocsc()
    parts = [(0, ns, solve_a)]
    if "G" in blocks:
        G = blocks["G"]
        # gradient modes of the stream space are invisible to B; the gauge
        # mass G G^T (scaled like the Schur complement) restores definiteness
        scale = S.diagonal().mean() / max((G @ G.T).diagonal().mean(), 1e-300)
        S = (S + scale * (G @ G.T)).tocsc()
        L = (G.T @ spla.spsolve(S, G.tocsc())) if G.shape[1] < 2000 else None
        if L is None:
            L = (G.T @ G) / scale
        L = sps.csc_matrix(L)
        L = (L + L.T) / 2
        parts.append((offs["lam"], offs["lam"] + G.shape[1], _factor_spd(L)))
    parts.insert(1, (offs["psi"], offs["psi"] + npsi, _factor_spd(S)))
    n = system.size

    def apply(r):
        r = np.asarray(r).ravel()
        z = np.empty_like(r)
        for lo, hi, fn in parts:
            z[lo:hi] = fn(r[lo:hi])
        return z

    return spla.LinearOperator((n, n), matvec=apply, dtype=float)


def _minres(system, A, b, tol, maxiter):
    if not hasattr(system, "blocks"):
        M = None
    else:
        M = block_preconditioner(system)
    its = [0]

    def count(_):
        its[0] += 1

    x = np.zeros_like(b)
    # the preconditioned residual differs from the true one; tighten until met
    inner = tol
    for _ in range(6):
        x, info = spla.minres(A, b, x0=x, M=M, rtol=inner / 10, maxiter=maxiter, callback=count)
        if relative_residual(A, x, b) <= tol:
            break
        inner /= 10
    if relative_residual(A, x, b) > tol:
        raise SolverError(f"MINRES did not converge in {its[0]} iterations", relative_residual(A, x, b))
    return x, its[0]
