from functools import lru_cache

import numpy as np
import pytest

from hhjstokes import assembly as asm
from hhjstokes.fespace import FESpace, entity_points
from hhjstokes.mesh import build_structured, local_entities

ACCEPTANCE_LINES = []


@lru_cache(maxsize=None)
def mesh(dim, n):
    return build_structured(dim, n)


@lru_cache(maxsize=None)
def space(dim, n, family, order):
    return FESpace(mesh(dim, n), family, order)


def facet_traces(fn_space, coeffs, degree=6, interior_only=True):
    """Yield (facets, values from owner 0, values from owner 1) of a discrete field."""
    m = fn_space.mesh
    d = m.dim
    s, _ = asm.facet_rule(m, degree)
    combos = local_entities(d, d - 1)
    for facets, e0, lf0, e1, lf1 in asm.facet_groups(m):
        if e1 is None and interior_only:
            continue
        loc0 = fn_space.local_coefficients(coeffs, e0)
        v0 = np.einsum("eqjc,ej->eqc", fn_space.tabulate(entity_points(d, combos[lf0], s), e0)[0], loc0)
        v1 = None
        if e1 is not None:
            loc1 = fn_space.local_coefficients(coeffs, e1)
            v1 = np.einsum("eqjc,ej->eqc", fn_space.tabulate(entity_points(d, combos[lf1], s), e1)[0], loc1)
        yield facets, v0, v1


def record(criterion: int, passed: bool, message: str):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion:2d}: {message}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
