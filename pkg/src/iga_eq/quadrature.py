"""Gauss rules, shifted Legendre polynomials and the overlay point set.

The overlay subdivides every active element T dyadically down to a depth
``L_T`` and places a tensor Gauss rule on every subcell. All integrals of the
package (Galerkin system, local problems, estimator, exact error) are taken
over these points, so integrals over unions of local patch cells and over
active elements agree to roundoff.

Points inside an element are stored in tensor order: with ``NE = nsub * ng``
points per direction, the point (ix, iy) has index ``offset + ix * NE + iy``.
"""

from __future__ import annotations

import functools
import numpy as np
from numpy.polynomial import legendre as npleg

from .hier_mesh import HierarchicalMesh


@functools.lru_cache(maxsize=None)
def gauss01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """n-point Gauss-Legendre rule on [0, 1]."""
    x, w = npleg.leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


def legendre01(n: int, x) -> tuple[np.ndarray, np.ndarray]:
    """Values and x-derivatives of P_k(2x-1), k = 0..n, shape (len(x), n+1)."""
    x = np.asarray(x, dtype=float)
    z = 2.0 * x - 1.0
    vals = np.zeros(x.shape + (n + 1,))
    ders = np.zeros_like(vals)
    vals[..., 0] = 1.0
    if n >= 1:
        vals[..., 1] = z
        ders[..., 1] = 1.0
    for k in range(1, n):
        vals[..., k + 1] = ((2 * k + 1) * z * vals[..., k] - k * vals[..., k - 1]) / (k + 1)
        ders[..., k + 1] = ders[..., k - 1] + (2 * k + 1) * vals[..., k]
    return vals, 2.0 * ders


def legendre_mass(n: int) -> np.ndarray:
    """Diagonal of the Legendre mass matrix on [0, 1]."""
    return 1.0 / (2.0 * np.arange(n + 1) + 1.0)


def edge_basis(pt: int, x) -> tuple[np.ndarray, np.ndarray]:
    """Normal-direction factor of the RT basis: 1-x, x, x(1-x)P_k(2x-1) for k < pt.

    Returns values and derivatives of shape (len(x), pt+2).
    """
    x = np.asarray(x, dtype=float)
    vals = np.zeros(x.shape + (pt + 2,))
    ders = np.zeros_like(vals)
    vals[..., 0], ders[..., 0] = 1.0 - x, -1.0
    vals[..., 1], ders[..., 1] = x, 1.0
    if pt >= 1:
        lv, ld = legendre01(pt - 1, x)
        bub = x * (1.0 - x)
        dbub = 1.0 - 2.0 * x
        vals[..., 2:] = bub[..., None] * lv
        ders[..., 2:] = dbub[..., None] * lv + bub[..., None] * ld
    return vals, ders


@functools.lru_cache(maxsize=None)
def edge_derivative_matrix(pt: int) -> np.ndarray:
    """D with phi_i' = sum_k D[k, i] P_k(2x-1) exactly (k = 0..pt)."""
    x, w = gauss01(pt + 2)
    _, d = edge_basis(pt, x)
    lv, _ = legendre01(pt, x)
    mat = (lv * w[:, None]).T @ d / legendre_mass(pt)[:, None]
    mat[np.abs(mat) < 1e-12] = 0.0
    return mat


@functools.lru_cache(maxsize=None)
def subcell_rule(s: int, ng: int) -> tuple[np.ndarray, np.ndarray]:
    """1D composite Gauss rule on [0,1] with 2^s subintervals (nodes, weights)."""
    x, w = gauss01(ng)
    k = 1 << s
    nodes = ((np.arange(k)[:, None] + x[None, :]) / k).ravel()
    weights = np.tile(w / k, k)
    return nodes, weights


# ---------------------------------------------------------------------------


class ElementIndex:
    """Sorted active elements with vectorised point-location of level cells."""

    def __init__(self, mesh: HierarchicalMesh) -> None:
        self.mesh = mesh
        self.elements = mesh.sorted_elements()
        self.level = np.array([e.level for e in self.elements], dtype=np.int64)
        self.ei = np.array([e.i for e in self.elements], dtype=np.int64)
        self.ej = np.array([e.j for e in self.elements], dtype=np.int64)
        self.index = {e: k for k, e in enumerate(self.elements)}
        big = np.int64(1) << 31
        self._tables = {}
        for k in np.unique(self.level):
            ids = np.flatnonzero(self.level == k)
            keys = self.ei[ids] * big + self.ej[ids]
            order = np.argsort(keys)
            self._tables[int(k)] = (keys[order], ids[order])

    def __len__(self) -> int:
        return len(self.elements)

    def locate_cells(self, level: int, ci, cj) -> np.ndarray:
        """Index of the active element containing each level cell (element level <= level)."""
        ci = np.asarray(ci, dtype=np.int64)
        cj = np.asarray(cj, dtype=np.int64)
        out = np.full(ci.shape, -1, dtype=np.int64)
        big = np.int64(1) << 31
        for k, (keys, ids) in self._tables.items():
            if k > level:
                continue
            q = (ci >> (level - k)) * big + (cj >> (level - k))
            pos = np.clip(np.searchsorted(keys, q), 0, len(keys) - 1)
            hit = (keys[pos] == q) & (out < 0)
            out[hit] = ids[pos[hit]]
        if np.any(out < 0):
            raise ValueError("cell not covered by an active element of coarser level")
        return out


class Overlay:
    """Overlay point set of a hierarchical mesh.

    Args:
        index: element index of the mesh.
        depth: subdivision level L_T per element (>= its level).
        ng: Gauss points per direction and subcell.
    """

    def __init__(self, index: ElementIndex, depth, ng: int) -> None:
        self.elements_index = index
        self.mesh = index.mesh
        self.elements = index.elements
        self.level, self.ei, self.ej = index.level, index.ei, index.ej
        self.ng = ng
        self.depth = np.asarray(depth, dtype=np.int64)
        if np.any(self.depth < self.level):
            raise ValueError("overlay depth below element level")
        self.npd = (np.int64(1) << (self.depth - self.level)) * ng
        counts = self.npd * self.npd
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        n_pts = int(self.offsets[-1])
        self.points = np.empty((n_pts, 2))
        self.weights = np.empty(n_pts)
        self.elem_of_point = np.repeat(np.arange(len(self.elements)), counts)
        n0 = self.mesh.n0
        groups: dict = {}
        for k, (lev, s) in enumerate(zip(self.level, self.depth - self.level)):
            groups.setdefault((int(lev), int(s)), []).append(k)
        for (lev, s), idx in groups.items():
            idx = np.asarray(idx)
            nodes, w1 = subcell_rule(s, ng)
            h = 1.0 / (n0 << lev)
            nn = len(nodes)
            xs = (self.ei[idx, None] + nodes[None, :]) * h
            ys = (self.ej[idx, None] + nodes[None, :]) * h
            rows = self.offsets[idx, None] + np.arange(nn * nn)[None, :]
            self.points[rows, 0] = np.repeat(xs, nn, axis=1)
            self.points[rows, 1] = np.tile(ys, (1, nn))
            self.weights[rows] = (np.outer(w1, w1).ravel() * h * h)[None, :]

    @property
    def n_points(self) -> int:
        return int(self.offsets[-1])

    def locate_cells(self, level: int, ci, cj) -> np.ndarray:
        return self.elements_index.locate_cells(level, ci, cj)

    def cell_point_index(self, level: int, ci, cj, elem=None) -> tuple[np.ndarray, int]:
        """Global point indices of level cells, tensor ordered, shape (R, n*n).

        All cells must share the same subdivision depth below ``level``;
        returns the indices and that depth.
        """
        ci = np.asarray(ci, dtype=np.int64)
        cj = np.asarray(cj, dtype=np.int64)
        if elem is None:
            elem = self.locate_cells(level, ci, cj)
        s = self.depth[elem] - level
        if len(s) and np.any(s != s[0]):
            raise ValueError("cells with different depths in one batch")
        s0 = int(s[0]) if len(s) else 0
        shift = level - self.level[elem]
        rel_i = ci - (self.ei[elem] << shift)
        rel_j = cj - (self.ej[elem] << shift)
        n = (1 << s0) * self.ng
        ne = self.npd[elem]
        ix = rel_i[:, None] * n + np.arange(n)[None, :]
        iy = rel_j[:, None] * n + np.arange(n)[None, :]
        idx = self.offsets[elem][:, None, None] + ix[:, :, None] * ne[:, None, None] + iy[:, None, :]
        return idx.reshape(len(ci), -1), s0
