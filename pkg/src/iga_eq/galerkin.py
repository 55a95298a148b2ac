"""Galerkin discretisation of -div grad u = f with homogeneous Dirichlet data."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import sympy

from .errors import AssemblyError, DomainError, NumericalError
from .geometry import GeometryMap
from .hier_mesh import HierarchicalMesh, LevelKnots, hierarchical_basis
from .quadrature import Overlay, subcell_rule

_BIG = np.int64(1) << 31


class DiscreteSpace:
    """Hierarchical splines of degree p and multiplicity m, optionally restricted to H^1_0.

    Attributes:
        functions: active basis functions kept as dofs, sorted.
    """

    def __init__(self, mesh: HierarchicalMesh, boundary: bool = True, degree: int | None = None, mult: int | None = None):
        self.mesh = mesh
        self.knots: LevelKnots = mesh.knots(degree, mult)
        self.degree = self.knots.degree
        allf = hierarchical_basis(mesh, self.knots.degree, self.knots.mult)
        if boundary:
            kept = []
            for f in allf:
                n = self.knots.n_funcs(f.level)
                if 0 < f.jx < n - 1 and 0 < f.jy < n - 1:
                    kept.append(f)
            allf = kept
        self.functions = allf
        self._tables = {}
        by_level: dict[int, list] = {}
        for k, f in enumerate(allf):
            by_level.setdefault(f.level, []).append((f.jx * _BIG + f.jy, k))
        for lev, items in by_level.items():
            keys = np.array([a for a, _ in items], dtype=np.int64)
            ids = np.array([b for _, b in items], dtype=np.int64)
            order = np.argsort(keys)
            self._tables[lev] = (keys[order], ids[order])

    @property
    def n_dofs(self) -> int:
        return len(self.functions)

    @property
    def levels(self) -> list[int]:
        return sorted(self._tables)

    def lookup(self, level: int, jx, jy) -> np.ndarray:
        """Dof index of (level, jx, jy), or -1 when the function is not a dof."""
        jx = np.asarray(jx, dtype=np.int64)
        if level not in self._tables:
            return np.full(jx.shape, -1, dtype=np.int64)
        keys, ids = self._tables[level]
        q = jx * _BIG + np.asarray(jy, dtype=np.int64)
        pos = np.clip(np.searchsorted(keys, q), 0, len(keys) - 1)
        return np.where(keys[pos] == q, ids[pos], -1)


def eval_solution(space: DiscreteSpace, coeffs, pts, geometry: GeometryMap | None = None):
    """Value and gradient of u_h at parameter points.

    Returns ``(value, grad)``; the gradient is physical (DF^{-T} times the
    parameter gradient) when a geometry is given, else the parameter gradient.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if np.any((pts < 0.0) | (pts > 1.0)):
        raise DomainError("parameter point outside [0,1]^2")
    coeffs = np.asarray(coeffs, dtype=float)
    val = np.zeros(len(pts))
    grad = np.zeros((len(pts), 2))
    lk = space.knots
    p = lk.degree
    for lev in space.levels:
        fx, vx, dx = lk.eval(lev, pts[:, 0])
        fy, vy, dy = lk.eval(lev, pts[:, 1])
        for a in range(p + 1):
            for b in range(p + 1):
                dof = space.lookup(lev, fx + a, fy + b)
                c = np.where(dof >= 0, coeffs[np.maximum(dof, 0)], 0.0)
                val += c * vx[:, a] * vy[:, b]
                grad[:, 0] += c * dx[:, a] * vy[:, b]
                grad[:, 1] += c * vx[:, a] * dy[:, b]
    if geometry is not None:
        _, jac, _ = geometry.eval(pts)
        grad = np.linalg.solve(np.transpose(jac, (0, 2, 1)), grad[..., None])[..., 0]
    return val, grad


# ---------------------------------------------------------------------------
# manufactured solutions


@dataclass(frozen=True)
class ManufacturedProblem:
    """Exact solution u with gradient and load f = -laplace(u), all on physical points (n, 2)."""

    name: str
    u: Callable
    grad: Callable
    f: Callable
    expression: str = ""


def _from_sympy(name: str, expr) -> ManufacturedProblem:
    x, y = sympy.symbols("x y")
    ux, uy = sympy.diff(expr, x), sympy.diff(expr, y)
    lap = sympy.diff(ux, x) + sympy.diff(uy, y)
    fu = sympy.lambdify((x, y), expr, "numpy")
    fgx = sympy.lambdify((x, y), ux, "numpy")
    fgy = sympy.lambdify((x, y), uy, "numpy")
    ff = sympy.lambdify((x, y), -lap, "numpy")

    def bcast(fn):
        def wrapped(pts):
            pts = np.atleast_2d(pts)
            return np.broadcast_to(fn(pts[:, 0], pts[:, 1]), (len(pts),)).astype(float)
        return wrapped

    gu, gx, gy, gf = bcast(fu), bcast(fgx), bcast(fgy), bcast(ff)
    return ManufacturedProblem(name, gu, lambda pts: np.stack([gx(pts), gy(pts)], axis=1), gf, str(expr))


@functools.lru_cache(maxsize=None)
def manufactured(kind: str) -> ManufacturedProblem:
    """``ring``: xy sin(4 pi (x^2+y^2)); ``square``: sin(2 pi x) sin(2 pi y); ``zero``."""
    x, y = sympy.symbols("x y")
    if kind == "ring":
        return _from_sympy(kind, x * y * sympy.sin(4 * sympy.pi * (x**2 + y**2)))
    if kind == "square":
        return _from_sympy(kind, sympy.sin(2 * sympy.pi * x) * sympy.sin(2 * sympy.pi * y))
    if kind == "zero":
        return _from_sympy(kind, sympy.Integer(0))
    raise DomainError(f"unknown manufactured solution {kind!r}")


def problem_for_geometry(name: str) -> ManufacturedProblem:
    return manufactured("ring" if name == "quarter-ring" else "square")


# ---------------------------------------------------------------------------
# data on overlay points


class PointData:
    """Geometry and load sampled on all overlay points."""

    def __init__(self, overlay: Overlay, geometry: GeometryMap, problem: ManufacturedProblem, chunk: int = 400_000):
        self.overlay = overlay
        self.geometry = geometry
        n = overlay.n_points
        self.x = np.empty((n, 2))
        self.det = np.empty(n)
        self.jac = np.empty((n, 2, 2))
        for a in range(0, n, chunk):
            b = min(a + chunk, n)
            self.x[a:b], self.jac[a:b], self.det[a:b] = geometry.eval(overlay.points[a:b])
        inv = np.linalg.inv(self.jac)
        # G = det * J^{-1} J^{-T}; stored as (G11, G12, G22)
        g = np.einsum("nij,nkj->nik", inv, inv) * self.det[:, None, None]
        self.G = np.stack([g[:, 0, 0], g[:, 0, 1], g[:, 1, 1]], axis=1)
        self.jinv = inv
        self.fd = problem.f(self.x) * self.det
        self.problem = problem

    @property
    def weights(self) -> np.ndarray:
        return self.overlay.weights


# ---------------------------------------------------------------------------
# assembly


def _element_groups(overlay: Overlay) -> dict[tuple[int, int], np.ndarray]:
    groups: dict = {}
    s = overlay.depth - overlay.level
    for k, key in enumerate(zip(overlay.level.tolist(), s.tolist())):
        groups.setdefault(key, []).append(k)
    return {k: np.asarray(v) for k, v in groups.items()}


def _element_slots(space: DiscreteSpace, level: int, ei, ej):
    """Dof indices (E, S) of all candidate functions on elements, pruned to used slots,
    with the level and local offsets of every slot."""
    lk = space.knots
    p = lk.degree
    dofs, meta = [], []
    for lev in space.levels:
        if lev > level:
            continue
        ci, cj = ei >> (level - lev), ej >> (level - lev)
        fx, fy = lk.first_func(ci), lk.first_func(cj)
        for a in range(p + 1):
            for b in range(p + 1):
                d = space.lookup(lev, fx + a, fy + b)
                if np.any(d >= 0):
                    dofs.append(d)
                    meta.append((lev, a, b))
    if not dofs:
        return np.zeros((len(ei), 0), dtype=np.int64), []
    return np.stack(dofs, axis=1), meta


def _slot_basis(space: DiscreteSpace, level: int, ei, ej, nodes, meta, h):
    """Values and parameter gradients of slot functions at tensor element points.

    Returns arrays of shape (E, P, S) for value, d/dx, d/dy.
    """
    lk = space.knots
    E, n = len(ei), len(nodes)
    xs = ((ei[:, None] + nodes[None, :]) * h).ravel()
    ys = ((ej[:, None] + nodes[None, :]) * h).ravel()
    cache = {}
    for lev in {m[0] for m in meta}:
        cx = np.repeat(ei >> (level - lev), n)
        cy = np.repeat(ej >> (level - lev), n)
        _, vx, dx = lk.eval(lev, xs, cx)
        _, vy, dy = lk.eval(lev, ys, cy)
        cache[lev] = (vx.reshape(E, n, -1), dx.reshape(E, n, -1), vy.reshape(E, n, -1), dy.reshape(E, n, -1))
    S = len(meta)
    val = np.empty((E, n, n, S))
    gx = np.empty_like(val)
    gy = np.empty_like(val)
    for k, (lev, a, b) in enumerate(meta):
        vx, dx, vy, dy = cache[lev]
        val[..., k] = vx[:, :, a, None] * vy[:, None, :, b]
        gx[..., k] = dx[:, :, a, None] * vy[:, None, :, b]
        gy[..., k] = vx[:, :, a, None] * dy[:, None, :, b]
    return val.reshape(E, n * n, S), gx.reshape(E, n * n, S), gy.reshape(E, n * n, S)


def assemble(space: DiscreteSpace, data: PointData, max_work: int = 3_000_000):
    """Stiffness matrix (CSR) and load vector on the overlay quadrature."""
    if space.n_dofs == 0:
        raise AssemblyError("empty discrete space")
    ov = data.overlay
    rows, cols, vals = [], [], []
    load = np.zeros(space.n_dofs)
    n0 = space.mesh.n0

    for (lev, s), elems in _element_groups(ov).items():
        nodes, _ = subcell_rule(s, ov.ng)
        n = len(nodes)
        h = 1.0 / (n0 << lev)
        ei_all, ej_all = ov.ei[elems], ov.ej[elems]
        dofs_all, meta = _element_slots(space, lev, ei_all, ej_all)
        S = len(meta)
        if S == 0:
            continue
        step = max(1, max_work // (n * n * S))
        for a in range(0, len(elems), step):
            el = elems[a:a + step]
            ei, ej, dofs = ei_all[a:a + step], ej_all[a:a + step], dofs_all[a:a + step]
            val, gx, gy = _slot_basis(space, lev, ei, ej, nodes, meta, h)
            pidx = ov.offsets[el][:, None] + np.arange(n * n)[None, :]
            w = ov.weights[pidx]
            G = data.G[pidx]
            ax = (G[..., 0:1] * gx + G[..., 1:2] * gy) * w[..., None]
            ay = (G[..., 1:2] * gx + G[..., 2:3] * gy) * w[..., None]
            K = np.matmul(np.transpose(gx, (0, 2, 1)), ax) + np.matmul(np.transpose(gy, (0, 2, 1)), ay)
            fl = np.einsum("eps,ep->es", val, data.fd[pidx] * w)
            ok = dofs >= 0
            np.add.at(load, dofs[ok], fl[ok])
            pair = ok[:, :, None] & ok[:, None, :]
            rr = np.broadcast_to(dofs[:, :, None], K.shape)
            cc = np.broadcast_to(dofs[:, None, :], K.shape)
            rows.append(rr[pair])
            cols.append(cc[pair])
            vals.append(K[pair])
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(space.n_dofs, space.n_dofs)).tocsr()
    A = (A + A.T) * 0.5
    return A, load


def solve(A, b, tol: float = 1e-12) -> np.ndarray:
    """Direct sparse solve with a relative residual check."""
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] == 0:
        return np.zeros(0)
    try:
        lu = spla.splu(A)
        x = lu.solve(b)
    except RuntimeError as exc:
        raise NumericalError(f"factorisation failed: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite solution")
    nb = np.max(np.abs(b))
    if nb > 0:
        res = np.max(np.abs(A @ x - b)) / nb
        for _ in range(3):
            if res <= tol:
                break
            x = x + lu.solve(b - A @ x)
            res = np.max(np.abs(A @ x - b)) / nb
        if res > tol:
            raise NumericalError(f"residual {res:.2e} above tolerance")
    return x


class Solution:
    """Discrete solution u_h with cached overlay gradients."""

    def __init__(self, space: DiscreteSpace, coeffs: np.ndarray, data: PointData, chunk: int = 400_000):
        self.space = space
        self.coeffs = np.asarray(coeffs, dtype=float)
        self.data = data
        pts = data.overlay.points
        n = len(pts)
        self.value = np.empty(n)
        self.grad_hat = np.empty((n, 2))
        for a in range(0, n, chunk):
            b = min(a + chunk, n)
            self.value[a:b], self.grad_hat[a:b] = eval_solution(space, self.coeffs, pts[a:b])

    @property
    def grad(self) -> np.ndarray:
        """Physical gradient J^{-T} grad_hat at overlay points."""
        return np.einsum("nji,nj->ni", self.data.jinv, self.grad_hat)


def exact_error(sol: Solution) -> float:
    """Energy error ||grad(u - u_h)|| on the overlay quadrature."""
    d = sol.data
    diff = d.problem.grad(d.x) - sol.grad
    return float(np.sqrt(np.sum(d.weights * d.det * np.sum(diff**2, axis=1))))


def element_sums(overlay: Overlay, values: np.ndarray) -> np.ndarray:
    """Sum point values per active element."""
    return np.bincount(overlay.elem_of_point, weights=values, minlength=len(overlay.elements))
