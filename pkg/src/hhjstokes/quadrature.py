"""Quadrature rules on reference simplices.

Rules are collapsed tensor products of Gauss-Jacobi rules (Duffy
construction), so all weights are positive and the points lie strictly
inside the simplex.  The reference simplex has vertices ``0, e_1, ..., e_d``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np
from scipy.special import roots_jacobi

MAX_DEGREE = 20


@dataclass(frozen=True)
class QuadratureRule:
    dim: int
    points: np.ndarray        # (npts, dim) reference coordinates
    weights: np.ndarray       # (npts,), sums to 1/dim!
    exactness_degree: int

    @property
    def barycentric(self) -> np.ndarray:
        """Barycentric coordinates, shape (npts, dim + 1)."""
        return np.column_stack([1.0 - self.points.sum(axis=1), self.points])

    def __len__(self) -> int:
        return len(self.weights)


def _gauss_jacobi01(npts: int, alpha: int):
    # nodes/weights on [0, 1] for the weight (1 - x)^alpha
    x, w = roots_jacobi(npts, alpha, 0)
    return (x + 1.0) / 2.0, w / 2.0 ** (alpha + 1)


@lru_cache(maxsize=None)
def simplex_rule(dim: int, degree: int) -> QuadratureRule:
    """Return a rule on the unit reference simplex exact for total degree ``degree``."""
    if dim not in (1, 2, 3):
        raise ValueError(f"unsupported simplex dimension {dim}")
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"quadrature degree {degree} outside [0, {MAX_DEGREE}]")
    m = degree // 2 + 1
    if dim == 1:
        x, w = _gauss_jacobi01(m, 0)
        pts, wts = x[:, None], w
    elif dim == 2:
        u, wu = _gauss_jacobi01(m, 1)
        v, wv = _gauss_jacobi01(m, 0)
        U, V = np.meshgrid(u, v, indexing="ij")
        pts = np.column_stack([U.ravel(), ((1.0 - U) * V).ravel()])
        wts = np.outer(wu, wv).ravel()
    else:
        u, wu = _gauss_jacobi01(m, 2)
        v, wv = _gauss_jacobi01(m, 1)
        s, ws = _gauss_jacobi01(m, 0)
        U, V, S = np.meshgrid(u, v, s, indexing="ij")
        pts = np.column_stack([
            U.ravel(),
            ((1.0 - U) * V).ravel(),
            ((1.0 - U) * (1.0 - V) * S).ravel(),
        ])
        wts = np.einsum("i,j,k->ijk", wu, wv, ws).ravel()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule(dim, pts, wts, degree)


def reference_volume(dim: int) -> float:
    return 1.0 / factorial(dim)
