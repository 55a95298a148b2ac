"""Univariate and tensor-product B-splines on [0, 1].

Public functions use 1-based basis indices ``j = 1..N``, matching the usual
mathematical numbering. The vectorised kernel :func:`basis_funs` works on
knot windows so that callers with implicit (formula based) knot vectors can
reuse it without materialising the knots.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, InvariantViolation

MAX_DEGREE = 8


@dataclass(frozen=True)
class KnotVector:
    """A p-open knot vector on [0, 1].

    Attributes:
        degree: polynomial degree p, 1 <= p <= 8.
        knots: nondecreasing knot values; 0 and 1 each appear exactly p+1
            times and interior knots at most p times.
    """

    degree: int
    knots: tuple[float, ...]

    def __post_init__(self) -> None:
        p = self.degree
        if not (1 <= p <= MAX_DEGREE):
            raise DomainError(f"degree must lie in 1..{MAX_DEGREE}, got {p}")
        k = tuple(float(v) for v in self.knots)
        object.__setattr__(self, "knots", k)
        if any(b < a for a, b in zip(k, k[1:])):
            raise InvariantViolation("knots must be nondecreasing")
        if len(k) < 2 * (p + 1):
            raise InvariantViolation("too few knots for a p-open vector")
        if k[: p + 1] != (0.0,) * (p + 1) or k[-(p + 1):] != (1.0,) * (p + 1):
            raise InvariantViolation("first/last p+1 knots must be 0 and 1")
        if k[p + 1] == 0.0 or k[-(p + 2)] == 1.0:
            raise InvariantViolation("boundary knots must have multiplicity exactly p+1")
        vals, counts = np.unique(np.asarray(k[p + 1: -(p + 1)]), return_counts=True)
        if len(counts) and counts.max() > p:
            raise InvariantViolation("interior knot multiplicity exceeds p")
        if len(vals) and (vals.min() <= 0.0 or vals.max() >= 1.0):
            raise InvariantViolation("interior knots must lie in (0, 1)")

    @property
    def n_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.knots)

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct knot values."""
        return np.unique(self.array)

    def multiplicity(self, value: float) -> int:
        return sum(1 for v in self.knots if v == value)


def open_knot_vector(degree: int, interior: Sequence[float] = ()) -> KnotVector:
    """Build ``(0,..,0, interior.., 1,..,1)`` with boundary multiplicity p+1."""
    return KnotVector(degree, (0.0,) * (degree + 1) + tuple(interior) + (1.0,) * (degree + 1))


# ---------------------------------------------------------------------------
# vectorised kernel


def find_span(kv: KnotVector, t: np.ndarray | float) -> np.ndarray:
    """Index i with t_i <= t < t_{i+1} (0-based); t = 1 maps to the last nonempty span."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any((t < 0.0) | (t > 1.0)):
        raise DomainError("evaluation point outside [0, 1]")
    knots = kv.array
    span = np.searchsorted(knots, t, side="right") - 1
    return np.minimum(span, kv.n_basis - 1)


def knot_windows(knots: np.ndarray, p: int, span: np.ndarray) -> np.ndarray:
    """Knots ``t[span-p+1 .. span+p]`` for every span, shape (n, 2p)."""
    offs = np.arange(-p + 1, p + 1)
    return knots[span[:, None] + offs[None, :]]


def basis_funs(window: np.ndarray, p: int, t: np.ndarray, derivative: bool = True):
    """Nonzero B-splines of degree p on a span, and their first derivatives.

    Args:
        window: knots ``t[span-p+1 .. span+p]`` per point, shape (n, 2p).
        p: degree.
        t: evaluation points, shape (n,), each inside its span.
        derivative: also return first derivatives.

    Returns:
        values (n, p+1) for functions ``span-p .. span`` and, if requested,
        derivatives of the same shape.
    """
    t = np.asarray(t, dtype=float)
    n = t.shape[0]
    vals = np.zeros((n, p + 1))
    vals[:, 0] = 1.0
    left = np.zeros((n, p + 1))
    right = np.zeros((n, p + 1))
    lower = None
    for j in range(1, p + 1):
        if j == p:
            lower = vals[:, :p].copy()
        left[:, j] = t - window[:, p - j]
        right[:, j] = window[:, p - 1 + j] - t
        saved = np.zeros(n)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = np.divide(vals[:, r], denom, out=np.zeros(n), where=denom != 0.0)
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        vals[:, j] = saved
    if not derivative:
        return vals
    if p == 0:
        return vals, np.zeros_like(vals)
    ders = np.zeros((n, p + 1))
    for k in range(p + 1):
        if k >= 1:
            d1 = window[:, p - 1 + k] - window[:, k - 1]
            ders[:, k] += np.divide(lower[:, k - 1], d1, out=np.zeros(n), where=d1 != 0.0)
        if k <= p - 1:
            d2 = window[:, p + k] - window[:, k]
            ders[:, k] -= np.divide(lower[:, k], d2, out=np.zeros(n), where=d2 != 0.0)
    return vals, p * ders


def eval_basis(kv: KnotVector, t, derivative: bool = False):
    """Dense matrix of all basis values (and derivatives) at points, shape (n, N)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    p = kv.degree
    span = find_span(kv, t)
    win = knot_windows(kv.array, p, span)
    vals, ders = basis_funs(win, p, t)
    cols = span[:, None] - p + np.arange(p + 1)[None, :]
    rows = np.repeat(np.arange(len(t))[:, None], p + 1, axis=1)
    out = np.zeros((len(t), kv.n_basis))
    out[rows, cols] = vals
    if not derivative:
        return out
    dout = np.zeros_like(out)
    dout[rows, cols] = ders
    return out, dout


def _check_index(kv: KnotVector, j: int) -> None:
    if not (1 <= j <= kv.n_basis):
        raise DomainError(f"basis index {j} outside 1..{kv.n_basis}")


def eval_bspline(kv: KnotVector, j: int, t):
    """Value of B_{j,p} (1-based j) at t; scalar in, scalar out."""
    _check_index(kv, j)
    vals = eval_basis(kv, t)[:, j - 1]
    return float(vals[0]) if np.ndim(t) == 0 else vals


def eval_bspline_deriv(kv: KnotVector, j: int, t, order: int = 1):
    """First derivative of B_{j,p} (1-based j), right-limit at breakpoints."""
    if order != 1:
        raise DomainError("only first derivatives are supported")
    _check_index(kv, j)
    ders = eval_basis(kv, t, derivative=True)[1][:, j - 1]
    return float(ders[0]) if np.ndim(t) == 0 else ders


# ---------------------------------------------------------------------------
# refinement


def refine_uniform(kv: KnotVector, m: int) -> KnotVector:
    """Insert the midpoint of every nonempty span with multiplicity m."""
    p = kv.degree
    if not (1 <= m <= p):
        raise InvariantViolation(f"refinement multiplicity must lie in 1..{p}, got {m}")
    bp = kv.breakpoints
    mids = (bp[:-1] + bp[1:]) / 2.0
    new = sorted(kv.knots + tuple(float(x) for x in mids for _ in range(m)))
    return KnotVector(p, tuple(new))


def insert_knot(knots: np.ndarray, coefs: np.ndarray, p: int, x: float):
    """Boehm insertion of one knot x into ``knots``.

    ``coefs`` has the basis index along its last axis. Works for open and for
    local (single-function) knot sequences because coefficients outside the
    stored range are treated as zero.
    """
    knots = np.asarray(knots, dtype=float)
    coefs = np.asarray(coefs, dtype=float)
    n = coefs.shape[-1]
    k = int(np.searchsorted(knots, x, side="right") - 1)
    new = np.zeros(coefs.shape[:-1] + (n + 1,))
    for i in range(n + 1):
        if i <= k - p:
            alpha = 1.0
        elif i >= k + 1:
            alpha = 0.0
        else:
            alpha = (x - knots[i]) / (knots[i + p] - knots[i])
        ci = coefs[..., i] if i < n else 0.0
        cm = coefs[..., i - 1] if i >= 1 else 0.0
        new[..., i] = alpha * ci + (1.0 - alpha) * cm
    return np.insert(knots, k + 1, x), new


def _inserted_knots(coarse: Sequence[float], fine: Sequence[float]) -> list[float] | None:
    """Multiset difference fine - coarse, or None if coarse is not a sub-multiset."""
    rest = list(fine)
    for v in coarse:
        try:
            rest.remove(v)
        except ValueError:
            return None
    return rest


def two_scale_coefficients(coarse: KnotVector, fine: KnotVector) -> np.ndarray:
    """Matrix R with B_coarse_j = sum_k R[j, k] B_fine_k (0-based rows/cols)."""
    if coarse.degree != fine.degree:
        raise DomainError("degrees differ")
    extra = _inserted_knots(coarse.knots, fine.knots)
    if extra is None:
        raise DomainError("fine knot vector does not contain the coarse one")
    knots = coarse.array
    coefs = np.eye(coarse.n_basis)
    for x in extra:
        knots, coefs = insert_knot(knots, coefs, coarse.degree, x)
    return coefs


def local_refinement(local_knots: Sequence[float], p: int, inserts: Sequence[float]):
    """Refine the single B-spline defined by ``p+2`` local knots.

    Returns the merged knot sequence and the coefficients of the fine
    B-splines (one per consecutive window of p+2 merged knots).
    """
    knots = np.asarray(local_knots, dtype=float)
    coefs = np.ones(1)
    for x in sorted(inserts):
        knots, coefs = insert_knot(knots, coefs, p, x)
    return knots, coefs


# ---------------------------------------------------------------------------
# tensor products


def eval_tensor(kvs: tuple[KnotVector, KnotVector], index: tuple[int, int], pts) -> np.ndarray:
    """Tensor-product B-spline with multi-index (1-based) at points of shape (n, 2)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    bx = eval_basis(kvs[0], pts[:, 0])[:, index[0] - 1]
    by = eval_basis(kvs[1], pts[:, 1])[:, index[1] - 1]
    return bx * by


def tensor_mesh(kvs: tuple[KnotVector, KnotVector]) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """Elements of the tensor mesh as ((x0, x1), (y0, y1)) boxes."""
    bx, by = kvs[0].breakpoints, kvs[1].breakpoints
    return [((bx[i], bx[i + 1]), (by[j], by[j + 1])) for j in range(len(by) - 1) for i in range(len(bx) - 1)]
