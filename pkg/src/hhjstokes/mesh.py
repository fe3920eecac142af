"""Structured simplicial meshes of the unit square and unit cube.

Every element stores its vertices in ascending global order.  With that
convention a sub-entity (edge, face) seen from any owning element has the
same vertex order, so facet frames and facet parametrisations agree between
neighbours without any orientation bookkeeping.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations, permutations
from math import factorial

import numpy as np


def local_entities(dim: int, edim: int) -> list[tuple[int, ...]]:
    """Local sub-simplices of dimension ``edim`` of a ``dim``-simplex, as sorted vertex tuples."""
    return list(combinations(range(dim + 1), edim + 1))


@dataclass(frozen=True)
class ElementGeometry:
    A: np.ndarray       # (d, d): x = A xhat + b
    b: np.ndarray
    Jinv: np.ndarray
    volume: float

    @property
    def jacobian(self) -> np.ndarray:
        return self.A

    @property
    def inverse_transpose(self) -> np.ndarray:
        return self.Jinv.T


@dataclass(frozen=True)
class FacetFrame:
    normal: np.ndarray
    tangents: np.ndarray    # (d-1, d)
    measure: float


@dataclass(eq=False)
class Mesh:
    """Simplicial mesh with entity numbering and canonical facet frames.

    ``entities[m]`` lists the global sub-simplices of dimension ``m`` and
    ``cell_entities[m]`` maps each element's local sub-simplices (in the order
    of :func:`local_entities`) to them.  Facets are ``entities[dim - 1]``.
    """

    vertices: np.ndarray
    elements: np.ndarray
    n: int = 0
    entities: dict = field(init=False)
    cell_entities: dict = field(init=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.elements = np.sort(np.asarray(self.elements, dtype=np.int64), axis=1)
        d = self.dim
        if self.elements.shape[1] != d + 1:
            raise ValueError("element arity does not match vertex dimension")
        self.entities = {}
        self.cell_entities = {}
        for m in range(d + 1):
            combos = local_entities(d, m)
            ents = np.stack([self.elements[:, c] for c in combos], axis=1)
            flat = ents.reshape(-1, m + 1)
            uniq, inv = np.unique(flat, axis=0, return_inverse=True)
            self.entities[m] = uniq
            self.cell_entities[m] = inv.reshape(len(self.elements), len(combos))
        self._check_geometry()
        self._build_facets()

    # -- basic sizes -----------------------------------------------------
    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def num_elements(self) -> int:
        return len(self.elements)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def edges(self) -> np.ndarray:
        return self.entities[1]

    @property
    def facets(self) -> np.ndarray:
        return self.entities[self.dim - 1]

    @property
    def num_facets(self) -> int:
        return len(self.facets)

    # -- geometry --------------------------------------------------------
    def _check_geometry(self):
        X = self.vertices[self.elements]                      # (nE, d+1, d)
        self.A = np.transpose(X[:, 1:, :] - X[:, :1, :], (0, 2, 1))
        self.b = X[:, 0, :]
        det = np.linalg.det(self.A)
        bad = np.flatnonzero(np.abs(det) <= 1e-14 * np.abs(self.A).max() ** self.dim)
        if bad.size:
            raise ValueError(f"degenerate element {bad[0]}")
        self.det = det
        self.volumes = np.abs(det) / factorial(self.dim)
        self.Jinv = np.linalg.inv(self.A)
        diam = np.zeros(self.num_elements)
        for i, j in combinations(range(self.dim + 1), 2):
            diam = np.maximum(diam, np.linalg.norm(X[:, i] - X[:, j], axis=1))
        self.diameters = diam

    @cached_property
    def h(self) -> float:
        return float(self.diameters.max())

    def element_geometry(self, elem: int) -> ElementGeometry:
        if not 0 <= elem < self.num_elements:
            raise IndexError(elem)
        return ElementGeometry(self.A[elem], self.b[elem], self.Jinv[elem], float(self.volumes[elem]))

    def to_physical(self, ref_points: np.ndarray, elems=slice(None)) -> np.ndarray:
        """Map reference points (nq, d) into each element: (ne, nq, d)."""
        return np.einsum("eij,qj->eqi", self.A[elems], ref_points) + self.b[elems][:, None, :]

    def _build_facets(self):
        d = self.dim
        F = self.facets
        X = self.vertices[F]                                   # (nF, d, d)
        if d == 2:
            t = X[:, 1] - X[:, 0]
            meas = np.linalg.norm(t, axis=1)
            t = t / meas[:, None]
            # t is n rotated counter-clockwise by 90 degrees
            nrm = np.column_stack([t[:, 1], -t[:, 0]])
            tang = t[:, None, :]
        else:
            e1 = X[:, 1] - X[:, 0]
            e2 = X[:, 2] - X[:, 0]
            c = np.cross(e1, e2)
            area2 = np.linalg.norm(c, axis=1)
            meas = area2 / 2.0
            nrm = c / area2[:, None]
            t1 = e1 / np.linalg.norm(e1, axis=1)[:, None]
            t2 = np.cross(nrm, t1)
            tang = np.stack([t1, t2], axis=1)
        self.facet_normals = nrm
        self.facet_tangents = tang
        self.facet_measures = meas

        # owner sign: +1 when the canonical normal points out of the element
        cf = self.cell_entities[d - 1]                         # (nE, d+1)
        combos = local_entities(d, d - 1)
        sign = np.empty(cf.shape)
        for f, combo in enumerate(combos):
            opp = next(i for i in range(d + 1) if i not in combo)
            xc = self.vertices[self.elements[:, list(combo)]].mean(axis=1)
            xo = self.vertices[self.elements[:, opp]]
            sign[:, f] = np.sign(np.einsum("ei,ei->e", nrm[cf[:, f]], xc - xo))
        self.facet_signs = sign

        owners = -np.ones((len(F), 2, 2), dtype=np.int64)     # (facet, slot, [elem, local])
        count = np.zeros(len(F), dtype=np.int64)
        for e, row in enumerate(cf):
            for f, g in enumerate(row):
                owners[g, count[g]] = (e, f)
                count[g] += 1
        if count.max() > 2:
            raise ValueError("non-manifold facet")
        self.facet_owners = owners
        self.facet_owner_count = count
        self.boundary_facets = count == 1

    def facet_frame(self, facet: int) -> FacetFrame:
        if not 0 <= facet < self.num_facets:
            raise IndexError(facet)
        return FacetFrame(self.facet_normals[facet], self.facet_tangents[facet],
                          float(self.facet_measures[facet]))

    @cached_property
    def boundary_entities(self) -> dict:
        """Boolean masks of boundary entities for every dimension below ``dim``."""
        d = self.dim
        bf = self.facets[self.boundary_facets]
        out = {d - 1: self.boundary_facets.copy()}
        for m in range(d - 1):
            subs = np.concatenate([bf[:, list(c)] for c in local_entities(d - 1, m)])
            keys = {tuple(r) for r in np.unique(subs, axis=0)}
            out[m] = np.array([tuple(r) in keys for r in self.entities[m]])
        return out

    def dump(self) -> str:
        """Plain-text vertex/element listing, for debugging."""
        lines = [f"vertices {self.num_vertices}"]
        lines += [" ".join(f"{c:.17g}" for c in v) for v in self.vertices]
        lines.append(f"elements {self.num_elements}")
        lines += [" ".join(str(i) for i in e) for e in self.elements]
        return "\n".join(lines) + "\n"


def build_structured(dim: int, n: int) -> Mesh:
    """Uniform simplicial mesh of (0, 1)^dim with ``n`` cells per direction.

    Squares are cut along the (0,0)-(1,1) diagonal; cubes use the Kuhn
    split into six tetrahedra sharing the main diagonal.
    """
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    n = int(n)
    ticks = np.linspace(0.0, 1.0, n + 1)
    if dim == 2:
        X, Y = np.meshgrid(ticks, ticks, indexing="ij")
        verts = np.column_stack([X.ravel(order="F"), Y.ravel(order="F")])

        def vid(i, j):
            return i + (n + 1) * j

        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        i, j = i.ravel(order="F"), j.ravel(order="F")
        v00, v10, v01, v11 = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
        elems = np.concatenate([
            np.column_stack([v00, v10, v11]),
            np.column_stack([v00, v01, v11]),
        ])
    else:
        X, Y, Z = np.meshgrid(ticks, ticks, ticks, indexing="ij")
        verts = np.column_stack([X.ravel(order="F"), Y.ravel(order="F"), Z.ravel(order="F")])
        stride = np.array([1, n + 1, (n + 1) ** 2])
        i, j, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
        base = np.column_stack([i.ravel(order="F"), j.ravel(order="F"), k.ravel(order="F")]) @ stride
        elems = []
        for perm in permutations(range(3)):
            path = [np.zeros(3, dtype=np.int64)]
            for axis in perm:
                step = path[-1].copy()
                step[axis] += 1
                path.append(step)
            elems.append(np.column_stack([base + p @ stride for p in path]))
        elems = np.concatenate(elems)
    return Mesh(verts, elems, n=n)
