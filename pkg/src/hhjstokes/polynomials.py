"""Scalar polynomial bases on reference simplices.

Local spaces are spanned by products of shifted Legendre polynomials in the
reference coordinates, ``prod_i L_{a_i}(2 xhat_i - 1)`` with ``|a| <= p``.
This is a basis of P^p (total degree) that stays well conditioned for the
degrees used here.
"""
from __future__ import annotations

from functools import lru_cache
from itertools import product
from math import comb

import numpy as np
from numpy.polynomial import legendre

from .quadrature import simplex_rule


def dim_poly(dim: int, p: int) -> int:
    """Dimension of P^p in ``dim`` variables (0 for p < 0)."""
    return comb(p + dim, dim) if p >= 0 else 0


@lru_cache(maxsize=None)
def multi_indices(dim: int, p: int) -> tuple[tuple[int, ...], ...]:
    """Exponent tuples with total degree <= p, sorted by degree."""
    idx = [a for a in product(range(p + 1), repeat=dim) if sum(a) <= p]
    idx.sort(key=lambda a: (sum(a), tuple(-x for x in a)))
    return tuple(idx)


def _legendre_1d(p: int, t: np.ndarray):
    """Values and first/second derivatives (w.r.t. x, t = 2x - 1) of L_0..L_p."""
    out = np.zeros((3, p + 1) + t.shape)
    for a in range(p + 1):
        c = np.zeros(a + 1)
        c[a] = 1.0
        out[0, a] = legendre.legval(t, c)
        if a >= 1:
            out[1, a] = 2.0 * legendre.legval(t, legendre.legder(c))
        if a >= 2:
            out[2, a] = 4.0 * legendre.legval(t, legendre.legder(c, 2))
    return out


def tabulate(dim: int, p: int, points: np.ndarray, derivs: int = 0):
    """Tabulate the reference basis of P^p at ``points`` (nq, dim).

    Returns ``[values (nq, N)]``, plus gradients (nq, N, dim) and Hessians
    (nq, N, dim, dim) in reference coordinates when ``derivs`` >= 1, 2.
    """
    points = np.asarray(points, dtype=float).reshape(-1, dim)
    idx = np.array(multi_indices(dim, p))
    leg = [_legendre_1d(p, 2.0 * points[:, i] - 1.0) for i in range(dim)]
    nq, N = len(points), len(idx)

    def factor(i, order):
        return leg[i][order][idx[:, i]].T          # (nq, N)

    vals = np.ones((nq, N))
    for i in range(dim):
        vals *= factor(i, 0)
    out = [vals]
    if derivs >= 1:
        grad = np.ones((nq, N, dim))
        for j in range(dim):
            for i in range(dim):
                grad[:, :, j] *= factor(i, 1 if i == j else 0)
        out.append(grad)
    if derivs >= 2:
        hess = np.ones((nq, N, dim, dim))
        for j in range(dim):
            for k in range(dim):
                for i in range(dim):
                    order = (i == j) + (i == k)
                    hess[:, :, j, k] *= factor(i, order)
        out.append(hess)
    return out


@lru_cache(maxsize=None)
def orthonormal_coefficients(dim: int, p: int) -> np.ndarray:
    """Coefficients ``R`` so that ``tabulate(dim, p, x)[0] @ R`` is L2-orthonormal.

    Orthonormality is with respect to the reference simplex measure scaled to
    unit volume.  Columns are ordered by degree, so the first
    ``dim_poly(dim, q)`` of them span P^q for every q <= p.  For dim == 0 the
    space is the constants on a point.
    """
    if dim == 0:
        return np.ones((1, 1))
    rule = simplex_rule(dim, 2 * p)
    V = tabulate(dim, p, rule.points)[0]
    w = rule.weights / rule.weights.sum()
    _, r = np.linalg.qr(np.sqrt(w)[:, None] * V)
    # fix signs so the construction is reproducible
    r = r * np.sign(np.diag(r))[:, None]
    return np.linalg.inv(r)


def orthonormal_tabulate(dim: int, p: int, points: np.ndarray) -> np.ndarray:
    """Values (nq, N) of the unit-volume orthonormal basis of P^p."""
    if dim == 0:
        return np.ones((len(points), 1))
    return tabulate(dim, p, points)[0] @ orthonormal_coefficients(dim, p)


@lru_cache(maxsize=None)
def lattice(dim: int, p: int, interior_only: bool = False) -> np.ndarray:
    """Barycentric multi-indices (rows of length dim+1) summing to p."""
    rows = [a for a in product(range(p + 1), repeat=dim + 1) if sum(a) == p]
    if interior_only:
        rows = [a for a in rows if min(a) >= 1]
    rows.sort(reverse=True)
    return np.array(rows, dtype=np.int64).reshape(-1, dim + 1)
