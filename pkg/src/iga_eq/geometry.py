"""NURBS parametrisations of the physical domain and Piola transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import spline_core as sc
from .errors import DomainError, GeometryError, NumericalError


@dataclass(frozen=True)
class GeometryMap:
    """Tensor-product NURBS map F: [0,1]^2 -> R^2.

    Attributes:
        knots: knot vectors in the s and t directions.
        control: control points, shape (N_s, N_t, 2).
        weights: positive weights, shape (N_s, N_t).
        name: label used in file names and reports.
    """

    knots: tuple[sc.KnotVector, sc.KnotVector]
    control: np.ndarray
    weights: np.ndarray
    name: str = "nurbs"
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        ns, nt = self.knots[0].n_basis, self.knots[1].n_basis
        ctrl = np.asarray(self.control, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if ctrl.shape != (ns, nt, 2) or w.shape != (ns, nt):
            raise GeometryError("control net does not match the knot vectors")
        if np.any(w <= 0):
            raise GeometryError("weights must be positive")
        object.__setattr__(self, "control", ctrl)
        object.__setattr__(self, "weights", w)

    @property
    def constant_jacobian(self) -> np.ndarray | None:
        """The Jacobian if F is affine, else None."""
        if "affine" not in self._cache:
            g = np.linspace(0.0, 1.0, 7)
            pts = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
            _, jac, _ = self.eval(pts)
            j0 = jac[0]
            self._cache["affine"] = j0.copy() if np.allclose(jac, j0, rtol=0, atol=1e-14) else None
        return self._cache["affine"]

    def eval(self, pts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Physical points (n,2), Jacobians (n,2,2) with J[k,a,b] = dx_a/dt_b, and determinants."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if np.any((pts < 0.0) | (pts > 1.0)):
            raise DomainError("parameter point outside [0,1]^2")
        bs, dbs = sc.eval_basis(self.knots[0], pts[:, 0], derivative=True)
        bt, dbt = sc.eval_basis(self.knots[1], pts[:, 1], derivative=True)
        w = self.weights
        wp = self.control * w[..., None]
        W = np.einsum("ni,ij,nj->n", bs, w, bt)
        Ws = np.einsum("ni,ij,nj->n", dbs, w, bt)
        Wt = np.einsum("ni,ij,nj->n", bs, w, dbt)
        A = np.einsum("ni,ijc,nj->nc", bs, wp, bt)
        As = np.einsum("ni,ijc,nj->nc", dbs, wp, bt)
        At = np.einsum("ni,ijc,nj->nc", bs, wp, dbt)
        x = A / W[:, None]
        jac = np.empty((len(pts), 2, 2))
        jac[:, :, 0] = (As - x * Ws[:, None]) / W[:, None]
        jac[:, :, 1] = (At - x * Wt[:, None]) / W[:, None]
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        if np.any(det <= 0.0):
            raise GeometryError("nonpositive Jacobian determinant")
        return x, jac, det

    def inverse(self, x, tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
        """F^{-1} by Newton iteration projected onto the unit square, started at its centre."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.full_like(x, 0.5)
        for _ in range(max_iter):
            fx, jac, _ = self.eval(t)
            res = fx - x
            if np.max(np.abs(res)) < tol:
                return t
            step = np.linalg.solve(jac, res[..., None])[..., 0]
            t = np.clip(t - step, 0.0, 1.0)
        fx, _, _ = self.eval(t)
        if np.max(np.abs(fx - x)) < tol:
            return t
        raise NumericalError("Newton iteration for the inverse map did not converge")


def eval_map(g: GeometryMap, pts):
    return g.eval(pts)


def _linear_kv() -> sc.KnotVector:
    return sc.open_knot_vector(1)


def square() -> GeometryMap:
    """Identity map of the unit square."""
    ctrl = np.array([[[0.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [1.0, 1.0]]])
    return GeometryMap((_linear_kv(), _linear_kv()), ctrl, np.ones((2, 2)), "square")


def scaling(c: float) -> GeometryMap:
    """F = c * id, an affine map with det = c^2."""
    g = square()
    return GeometryMap(g.knots, c * g.control, g.weights, f"scaled{c:g}")


def quarter_ring() -> GeometryMap:
    """Quarter annulus with radii 1/2 and 1 in the first quadrant.

    Quadratic with weights (1, sqrt(2)/2, 1) in s (exact circular arcs),
    linear in t with radius 1 - t/2; F(0,0) = (1,0) and F(1,1) = (0,1/2).
    """
    arc = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    ctrl = np.stack([arc, 0.5 * arc], axis=1)
    w1 = math.sqrt(2.0) / 2.0
    weights = np.array([[1.0, 1.0], [w1, w1], [1.0, 1.0]])
    return GeometryMap((sc.open_knot_vector(2), _linear_kv()), ctrl, weights, "quarter-ring")


GEOMETRIES = {"square": square, "quarter-ring": quarter_ring}


def by_name(name: str) -> GeometryMap:
    try:
        return GEOMETRIES[name]()
    except KeyError:
        raise DomainError(f"unknown geometry {name!r}") from None


def piola_vector(g: GeometryMap, w_hat, pts) -> np.ndarray:
    """Contravariant Piola transform det(DF)^{-1} DF w evaluated at F(pts)."""
    _, jac, det = g.eval(pts)
    return np.einsum("nab,nb->na", jac, np.atleast_2d(w_hat)) / det[:, None]


def piola_scalar(g: GeometryMap, q_hat, pts) -> np.ndarray:
    """Scalar Piola transform det(DF)^{-1} q evaluated at F(pts)."""
    _, _, det = g.eval(pts)
    return np.asarray(q_hat, dtype=float) / det


def piola_scalar_inverse(g: GeometryMap, q, pts) -> np.ndarray:
    _, _, det = g.eval(pts)
    return np.asarray(q, dtype=float) * det


@dataclass(frozen=True)
class GeometryConstants:
    sup_jac: float
    sup_jac_inv: float
    sup_det: float
    sup_det_inv: float

    @property
    def c_rel(self) -> float:
        return math.sqrt(self.sup_det) * math.sqrt(self.sup_det_inv) * self.sup_jac

    @property
    def c_f(self) -> float:
        return self.sup_det * self.sup_det_inv


def geometry_constants(g: GeometryMap, density: int = 64, extra_points=None) -> GeometryConstants:
    """Sampled suprema over a tensor grid (plus optional extra points)."""
    s = np.linspace(0.0, 1.0, density + 1)
    pts = np.stack(np.meshgrid(s, s, indexing="ij"), -1).reshape(-1, 2)
    if extra_points is not None:
        pts = np.vstack([pts, np.asarray(extra_points, dtype=float).reshape(-1, 2)])
    _, jac, det = g.eval(pts)
    sv = np.linalg.svd(jac, compute_uv=False)
    return GeometryConstants(
        sup_jac=float(sv[:, 0].max()),
        sup_jac_inv=float((1.0 / sv[:, 1]).max()),
        sup_det=float(det.max()),
        sup_det_inv=float((1.0 / det).max()),
    )
