"""Large patches (supports of PU splines) and small patches (hat supports).

A large patch of node a is the support box of its PU B-spline, meshed
uniformly at level ``l_a`` (the finest active level inside the support).
Vertices of that local mesh carry bilinear hats; the support of a hat is a
small patch of at most four cells ("quadrants") around its vertex.

Quadrants are numbered ``q = dx + 2*dy`` relative to the vertex
(0 south-west, 1 south-east, 2 north-west, 3 north-east); cell sides are
numbered L=0, R=1, B=2, T=3.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .hier_mesh import HierarchicalMesh, PUWeight, pu_degree_for
from .errors import DomainError

L, R, B, T = 0, 1, 2, 3
QUAD_OFFSETS = ((-1, -1), (0, -1), (-1, 0), (0, 0))
# pairs (q1, side1, q2, side2) of quadrant faces shared inside a small patch
INNER_FACES = ((0, R, 1, L), (2, R, 3, L), (0, T, 2, B), (1, T, 3, B))
# faces that contain the vertex, per quadrant
VERTEX_FACES = {0: (R, T), 1: (L, T), 2: (R, B), 3: (L, B)}


@dataclass(frozen=True)
class LargePatch:
    """Support of a PU function with its local uniform mesh.

    Attributes:
        weight: the PU weight (function and coefficient).
        level: level l_a of the local mesh.
        box: support ``[x0, x1) x [y0, y1)`` in level-l_a cells.
        dirichlet: whether psi_a is nonzero on the left, right, bottom, top side.
        pbar: PU degree.
        n0: level-0 cells per direction.
    """

    weight: PUWeight
    level: int
    box: tuple[int, int, int, int]
    dirichlet: tuple[bool, bool, bool, bool]
    pbar: int
    n0: int = 2

    @property
    def interior(self) -> bool:
        return not any(self.dirichlet)

    @property
    def nx(self) -> int:
        return self.box[1] - self.box[0]

    @property
    def ny(self) -> int:
        return self.box[3] - self.box[2]

    @property
    def h(self) -> float:
        return 1.0 / (self.n0 << self.level)

    def cells(self) -> list[tuple[int, int]]:
        """Local cell indices (ci, cj), ci fastest varying last."""
        return [(i, j) for i in range(self.nx) for j in range(self.ny)]

    def vertices(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.nx + 1) for j in range(self.ny + 1)]

    def origin(self) -> tuple[float, float]:
        return self.box[0] * self.h, self.box[2] * self.h


def build_large_patch(mesh: HierarchicalMesh, weight: PUWeight, pbar: int | None = None) -> LargePatch:
    if pbar is None:
        pbar = pu_degree_for(mesh.degree, mesh.mult)
    lk = mesh.knots(pbar, 1)
    lev = weight.level
    x0, x1 = lk.support(lev, weight.jx)
    y0, y1 = lk.support(lev, weight.jy)
    ell = mesh.max_level_in_box(lev, (x0, x1, y0, y1))
    s = ell - lev
    nf = lk.n_funcs(lev)
    dirichlet = (weight.jx == 0, weight.jx == nf - 1, weight.jy == 0, weight.jy == nf - 1)
    return LargePatch(weight, ell, (x0 << s, x1 << s, y0 << s, y1 << s), dirichlet, pbar, mesh.n0)


def build_patches(mesh: HierarchicalMesh, pu: Iterable[PUWeight], pbar: int | None = None) -> list[LargePatch]:
    return [build_large_patch(mesh, w, pbar) for w in pu]


# ---------------------------------------------------------------------------
# small patches


@dataclass(frozen=True)
class SmallPatch:
    """Hat support around vertex ``vertex`` of a large patch.

    Attributes:
        patch: owning large patch.
        vertex: local vertex indices (vi, vj).
        mask: bit q set when quadrant q is a cell of the local mesh.
        free: bit 4*q + side set for unconstrained boundary faces.
    """

    patch: LargePatch
    vertex: tuple[int, int]
    mask: int
    free: int

    @property
    def interior(self) -> bool:
        return self.free == 0

    @property
    def quadrants(self) -> list[int]:
        return [q for q in range(4) if self.mask >> q & 1]

    def cells(self) -> list[tuple[int, int]]:
        vi, vj = self.vertex
        return [(vi + QUAD_OFFSETS[q][0], vj + QUAD_OFFSETS[q][1]) for q in self.quadrants]

    @property
    def inner_faces(self) -> list[tuple[int, int, int, int]]:
        return [f for f in INNER_FACES if self.mask >> f[0] & 1 and self.mask >> f[2] & 1]

    @property
    def boundary_faces(self) -> list[tuple[int, int]]:
        inner = {(f[0], f[1]) for f in self.inner_faces} | {(f[2], f[3]) for f in self.inner_faces}
        return [(q, s) for q in self.quadrants for s in range(4) if (q, s) not in inner]

    @property
    def neumann_faces(self) -> list[tuple[int, int]]:
        return [f for f in self.boundary_faces if not self.free >> (4 * f[0] + f[1]) & 1]

    @property
    def free_faces(self) -> list[tuple[int, int]]:
        return [f for f in self.boundary_faces if self.free >> (4 * f[0] + f[1]) & 1]

    @property
    def key(self) -> tuple[int, int]:
        return self.mask, self.free


def small_patch_type(nx, ny, dirichlet, vi, vj):
    """Vectorised (mask, free) for vertices (vi, vj) of an nx x ny local mesh.

    ``nx``, ``ny`` and the four Dirichlet flags may be scalars or arrays
    broadcasting against the vertex indices.
    """
    vi = np.asarray(vi)
    vj = np.asarray(vj)
    dl, dr, db, dt = (np.asarray(d, dtype=bool) for d in dirichlet)
    present = [
        (vi >= 1) & (vj >= 1),
        (vi < nx) & (vj >= 1),
        (vi >= 1) & (vj < ny),
        (vi < nx) & (vj < ny),
    ]
    mask = sum(present[q].astype(np.int64) << q for q in range(4))
    free = np.zeros_like(mask)
    for cond, q, side in (
        (dr & (vi == nx), 0, R), (dr & (vi == nx), 2, R),
        (dl & (vi == 0), 1, L), (dl & (vi == 0), 3, L),
        (db & (vj == 0), 2, B), (db & (vj == 0), 3, B),
        (dt & (vj == ny), 0, T), (dt & (vj == ny), 1, T),
    ):
        free = free | ((cond & present[q]).astype(np.int64) << (4 * q + side))
    return mask, free


def classify_boundary(patch: LargePatch, vertex: tuple[int, int]) -> SmallPatch:
    vi, vj = vertex
    if not (0 <= vi <= patch.nx and 0 <= vj <= patch.ny):
        raise DomainError("vertex outside the local mesh")
    mask, free = small_patch_type(patch.nx, patch.ny, patch.dirichlet, vi, vj)
    return SmallPatch(patch, (vi, vj), int(mask), int(free))


def small_patches(patch: LargePatch) -> list[SmallPatch]:
    return [classify_boundary(patch, v) for v in patch.vertices()]


def hat_eval(patch: LargePatch, vertex: tuple[int, int], pts) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear hat of a local vertex: values (n,) and parameter gradients (n, 2)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    h = patch.h
    x0, y0 = patch.origin()
    u = (pts[:, 0] - x0) / h - vertex[0]
    v = (pts[:, 1] - y0) / h - vertex[1]
    hu = np.maximum(0.0, 1.0 - np.abs(u))
    hv = np.maximum(0.0, 1.0 - np.abs(v))
    du = np.where(np.abs(u) < 1.0, -np.sign(u), 0.0) / h
    dv = np.where(np.abs(v) < 1.0, -np.sign(v), 0.0) / h
    return hu * hv, np.stack([du * hv, hu * dv], axis=1)


# ---------------------------------------------------------------------------
# array view of all patches


@dataclass
class PatchArrays:
    """Struct-of-arrays view of a list of large patches."""

    patches: list[LargePatch]

    def __post_init__(self) -> None:
        ps = self.patches
        self.n = len(ps)
        self.f_level = np.array([p.weight.level for p in ps], dtype=np.int64)
        self.jx = np.array([p.weight.jx for p in ps], dtype=np.int64)
        self.jy = np.array([p.weight.jy for p in ps], dtype=np.int64)
        self.coef = np.array([p.weight.coef for p in ps])
        self.level = np.array([p.level for p in ps], dtype=np.int64)
        self.x0 = np.array([p.box[0] for p in ps], dtype=np.int64)
        self.y0 = np.array([p.box[2] for p in ps], dtype=np.int64)
        self.nx = np.array([p.nx for p in ps], dtype=np.int64)
        self.ny = np.array([p.ny for p in ps], dtype=np.int64)
        self.dirichlet = np.array([p.dirichlet for p in ps], dtype=bool).reshape(-1, 4)
        self.interior = ~self.dirichlet.any(axis=1)
        n0 = ps[0].n0 if ps else 2
        self.h = 1.0 / (n0 * (2.0 ** self.level))
        self.ncell = self.nx * self.ny
        self.cell_start = np.concatenate([[0], np.cumsum(self.ncell)])

    def cell_table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Node id and local (ci, cj) of every patch cell, ordered by node then ci*ny + cj."""
        node = np.repeat(np.arange(self.n), self.ncell)
        loc = np.arange(int(self.cell_start[-1])) - self.cell_start[node]
        ci = loc // self.ny[node]
        cj = loc % self.ny[node]
        return node, ci, cj


def overlay_depths(mesh: HierarchicalMesh, arrays: PatchArrays, overlay_locator) -> np.ndarray:
    """L_T = finest local-mesh level among patches covering each element."""
    node, ci, cj = arrays.cell_table()
    depth = np.array([e.level for e in mesh.sorted_elements()], dtype=np.int64)
    for lev in np.unique(arrays.level):
        sel = arrays.level[node] == lev
        gi = arrays.x0[node[sel]] + ci[sel]
        gj = arrays.y0[node[sel]] + cj[sel]
        elem = overlay_locator(int(lev), gi, gj)
        np.maximum.at(depth, elem, lev)
    return depth
