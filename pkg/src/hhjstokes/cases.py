"""Manufactured Stokes solutions built from a stream function.

Fields are derived symbolically and compiled with :func:`sympy.lambdify`, so
every derivative is exact.  Callables take points of shape (..., d).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import sympy as sp

X, Y, Z = sp.symbols("x y z", real=True)
COORDS = {2: (X, Y), 3: (X, Y, Z)}


def _curl(psi, dim):
    x = COORDS[dim]
    if dim == 2:
        return sp.Matrix([-sp.diff(psi, x[1]), sp.diff(psi, x[0])])
    p = psi
    return sp.Matrix([
        sp.diff(p[2], x[1]) - sp.diff(p[1], x[2]),
        sp.diff(p[0], x[2]) - sp.diff(p[2], x[0]),
        sp.diff(p[1], x[0]) - sp.diff(p[0], x[1]),
    ])


def _compile(expr, dim, shape):
    """Vectorised evaluator of a scalar/vector/matrix expression."""
    comps = list(sp.Matrix(expr)) if shape else [expr]
    fn = sp.lambdify(COORDS[dim], comps, "numpy")

    def evaluate(pts):
        pts = np.asarray(pts, dtype=float)
        zero = np.zeros(pts.shape[:-1])
        vals = [np.asarray(v, dtype=float) + zero for v in fn(*np.moveaxis(pts, -1, 0))]
        return np.stack(vals, axis=-1).reshape(zero.shape + shape)

    return evaluate


@dataclass
class ManufacturedCase:
    """Exact solution ``(psi, u, sigma, p)`` and load ``f = -div(sigma) + grad(p)``.

    ``sigma = nu * grad(u)`` with ``grad(u)[i, j] = d_j u_i``.  A gradient
    perturbation ``theta`` adds ``grad(theta)`` to ``f`` and the mean-free
    part of ``theta`` to ``p``; the velocity is unchanged.
    """

    dim: int
    psi_expr: object
    p_expr: object
    nu: float = 1.0
    theta_expr: object = 0
    name: str = "custom"
    fields: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("viscosity must be positive")
        d = self.dim
        x = COORDS[d]
        psi = sp.sympify(self.psi_expr)
        if d == 3:
            psi = sp.Matrix(psi)
        u = _curl(psi, d)
        grad_u = u.jacobian(sp.Matrix(x))
        sigma = self.nu * grad_u
        theta = sp.sympify(self.theta_expr)
        p = sp.sympify(self.p_expr) + theta - _mean(theta, d)
        div_sigma = sp.Matrix([sum(sp.diff(sigma[i, j], x[j]) for j in range(d)) for i in range(d)])
        grad_p = sp.Matrix([sp.diff(p, xi) for xi in x])
        f = -div_sigma + grad_p
        self.symbols = {"psi": psi, "u": u, "grad_u": grad_u, "p": p, "f": f}
        self.fields = {
            "psi": _compile(psi, d, () if d == 2 else (d,)),
            "u": _compile(u, d, (d,)),
            "grad_u": _compile(grad_u, d, (d, d)),
            "p": _compile(p, d, ()),
            "f": _compile(f, d, (d,)),
        }

    def psi(self, x):
        return self.fields["psi"](x)

    def u(self, x):
        return self.fields["u"](x)

    def grad_u(self, x):
        return self.fields["grad_u"](x)

    def sigma(self, x):
        return self.nu * self.fields["grad_u"](x)

    def p(self, x):
        return self.fields["p"](x)

    def f(self, x):
        return self.fields["f"](x)

    def with_gradient(self, theta) -> "ManufacturedCase":
        return ManufacturedCase(self.dim, self.psi_expr, self.p_expr, self.nu,
                                sp.sympify(self.theta_expr) + sp.sympify(theta), self.name + "+grad")

    def with_nu(self, nu: float) -> "ManufacturedCase":
        return ManufacturedCase(self.dim, self.psi_expr, self.p_expr, nu, self.theta_expr, self.name)


def _mean(expr, dim):
    x = COORDS[dim]
    val = sp.sympify(expr)
    for xi in x:
        val = sp.integrate(val, (xi, 0, 1))
    return val


def bubble(dim):
    return sp.Mul(*[xi ** 2 * (xi - 1) ** 2 for xi in COORDS[dim]])


def reference_case(dim: int, nu: float = 1e-6) -> ManufacturedCase:
    """The polynomial benchmark on the unit square / cube."""
    g = bubble(dim)
    if dim == 2:
        return ManufacturedCase(2, g, X ** 5 + Y ** 5 - sp.Rational(1, 3), nu, name="reference")
    return ManufacturedCase(3, [g, g, g], X ** 5 + Y ** 5 + Z ** 5 - sp.Rational(1, 2), nu, name="reference")


def gradient_case(dim: int, theta) -> ManufacturedCase:
    """Zero velocity driven by a pure gradient load ``f = grad(theta)``."""
    zero = 0 if dim == 2 else [0, 0, 0]
    return ManufacturedCase(dim, zero, 0, 1.0, theta, name="gradient")


def default_theta(dim: int):
    return X ** 3 * Y ** 3 if dim == 2 else X ** 3 * Y ** 3 * Z ** 3
