"""Hierarchical meshes on the parameter domain (0,1)^2 and hierarchical B-splines.

Level-l knot vectors are dyadic: the level-0 mesh has ``n0`` cells per
direction, level l has ``n0 * 2**l`` cells, every interior breakpoint carries
the same multiplicity and the boundary knots are (p+1)-fold. Knots are kept
in integer cell units so that every box computation is exact.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from . import spline_core as sc
from .errors import ConfigurationError, DomainError, InvariantViolation

MAX_LEVEL = 30


class HierElement(NamedTuple):
    """Cell ``(i, j)`` of the level-``level`` uniform mesh."""

    level: int
    i: int
    j: int


class HierBasisFn(NamedTuple):
    """Tensor B-spline of a given level with 0-based multi-index (jx, jy)."""

    level: int
    jx: int
    jy: int


class PUWeight(NamedTuple):
    level: int
    jx: int
    jy: int
    coef: float

    @property
    def basis(self) -> HierBasisFn:
        return HierBasisFn(self.level, self.jx, self.jy)


# ---------------------------------------------------------------------------
# implicit dyadic knot vectors


@dataclass(frozen=True)
class LevelKnots:
    """Family of dyadic knot vectors for degree ``degree`` and interior multiplicity ``mult``."""

    degree: int
    mult: int
    n0: int = 2

    def __post_init__(self) -> None:
        if not (1 <= self.degree <= sc.MAX_DEGREE):
            raise DomainError(f"degree must lie in 1..{sc.MAX_DEGREE}")
        if not (1 <= self.mult <= self.degree):
            raise InvariantViolation("multiplicity must lie in 1..degree")
        if self.n0 < 1:
            raise DomainError("n0 must be positive")

    def n_cells(self, level: int) -> int:
        return self.n0 << level

    def n_funcs(self, level: int) -> int:
        return self.degree + 1 + self.mult * (self.n_cells(level) - 1)

    def knot(self, level, idx):
        """Knot value(s) in cell units; scalars or integer arrays (level may be an array)."""
        p, m = self.degree, self.mult
        idx = np.asarray(idx)
        n = np.asarray(self.n0 << np.asarray(level, dtype=np.int64))
        while n.ndim < idx.ndim:
            n = n[..., None]
        inner = 1 + (idx - p - 1) // m
        out = np.where(idx <= p, 0, np.where(idx >= p + 1 + m * (n - 1), n, inner))
        return int(out) if out.ndim == 0 else out

    def first_index(self, level: int, value: int) -> int:
        """Smallest knot index whose value equals ``value`` (cell units)."""
        p, m, n = self.degree, self.mult, self.n_cells(level)
        if value == 0:
            return 0
        if value == n:
            return p + 1 + m * (n - 1)
        return p + 1 + m * (value - 1)

    def support(self, level: int, j: int) -> tuple[int, int]:
        """Support ``[lo, hi)`` of function j in level cells."""
        return self.knot(level, j), self.knot(level, j + self.degree + 1)

    def first_func(self, cell):
        """Index of the first of the p+1 functions that are nonzero on ``cell``."""
        return self.mult * np.asarray(cell)

    def knot_vector(self, level: int) -> sc.KnotVector:
        n = self.n_cells(level)
        vals = self.knot(level, np.arange(self.n_funcs(level) + self.degree + 1)) / n
        return sc.KnotVector(self.degree, tuple(vals))

    def eval(self, level: int, x, cells=None, derivative: bool = True):
        """Nonzero functions at points x in [0,1].

        Returns ``(first, vals, ders)`` with ``first`` the index of the first
        nonzero function per point and ``vals``/``ders`` of shape (n, p+1).
        Derivatives are with respect to x (not cell units).
        """
        x = np.asarray(x, dtype=float)
        n = np.asarray(self.n0 << np.asarray(level, dtype=np.int64))
        u = x * n
        if cells is None:
            cells = np.minimum(np.floor(u).astype(np.int64), n - 1)
        cells = np.asarray(cells, dtype=np.int64)
        p = self.degree
        span = p + self.mult * cells
        win = self.knot(level, span[:, None] + np.arange(-p + 1, p + 1)[None, :]).astype(float)
        res = sc.basis_funs(win, p, u, derivative=derivative)
        first = span - p
        if derivative:
            return first, res[0], res[1] * (n[..., None] if n.ndim else n)
        return first, res

    def eval_function(self, level, j, x, derivative: bool = False):
        """Single univariate function j (0-based) at points x; level and j broadcast against x."""
        x = np.asarray(x, dtype=float)
        level = np.broadcast_to(np.asarray(level, dtype=np.int64), x.shape).ravel()
        j = np.broadcast_to(np.asarray(j, dtype=np.int64), x.shape).ravel()
        xf = x.ravel()
        n = self.n0 << level
        cells = np.minimum(np.floor(xf * n).astype(np.int64), n - 1)
        first, vals, ders = self.eval(level, xf, cells)
        k = j - first
        ok = (k >= 0) & (k <= self.degree)
        kk = np.clip(k, 0, self.degree)
        rows = np.arange(len(xf))
        v = np.where(ok, vals[rows, kk], 0.0).reshape(x.shape)
        if not derivative:
            return v
        return v, np.where(ok, ders[rows, kk], 0.0).reshape(x.shape)

    def refinement_row(self, level: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Two-scale row of function j: fine indices and coefficients at level+1."""
        p = self.degree
        tau = [self.knot(level, j + k) for k in range(p + 2)]
        lo = tau[0]
        pattern = tuple(t - lo for t in tau)
        coefs = _local_row(pattern, p, self.mult)
        r = j - self.first_index(level, lo)
        start = self.first_index(level + 1, 2 * lo) + r
        return start + np.arange(len(coefs)), coefs


@functools.lru_cache(maxsize=None)
def _local_row(pattern: tuple[int, ...], p: int, mult: int) -> np.ndarray:
    doubled = [2 * t for t in pattern]
    inserts = [2 * k + 1 for k in range(pattern[-1]) for _ in range(mult)]
    _, coefs = sc.local_refinement(doubled, p, inserts)
    return coefs


# ---------------------------------------------------------------------------
# meshes


def pu_degree_for(p: int, m: int) -> int:
    """Smallest PU degree compatible with smoothness C^{p-m} when the PU multiplicity is 1."""
    return p + 1 - m


def check_pu_pair(p: int, m: int, pbar: int, mbar: int) -> None:
    if not (1 <= mbar <= pbar):
        raise ConfigurationError("PU multiplicity must lie in 1..PU degree")
    if p - m > pbar - mbar:
        raise ConfigurationError(f"PU pair (degree {pbar}, mult {mbar}) is not nested in (degree {p}, mult {m})")


@dataclass(frozen=True)
class HierarchicalMesh:
    """Immutable hierarchical mesh of (0,1)^2.

    Attributes:
        degree: spline degree p of the solution space.
        mult: multiplicity m of interior knots (initial and inserted).
        elements: active elements.
        n0: number of level-0 cells per direction (2 gives the 2x2 initial mesh).
    """

    degree: int
    mult: int
    elements: frozenset
    n0: int = 2
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self) -> None:
        if not (1 <= self.mult <= self.degree):
            raise InvariantViolation("multiplicity must lie in 1..p")
        els = frozenset(HierElement(*e) for e in self.elements)
        object.__setattr__(self, "elements", els)
        if not els:
            raise InvariantViolation("empty mesh")
        lmax = max(e.level for e in els)
        if lmax > MAX_LEVEL:
            raise InvariantViolation(f"level cap {MAX_LEVEL} exceeded")
        area = sum(4.0 ** -e.level for e in els) / (self.n0 * self.n0)
        if abs(area - 1.0) > 1e-12:
            raise InvariantViolation("active elements do not cover the unit square")
        for e in els:
            n = self.n0 << e.level
            if not (0 <= e.i < n and 0 <= e.j < n):
                raise InvariantViolation(f"element {e} outside the domain")
        refined = self.refined_cells
        for e in els:
            if (e.i, e.j) in refined.get(e.level, ()):
                raise InvariantViolation(f"element {e} overlaps a finer element")

    # -- construction -----------------------------------------------------
    @classmethod
    def initial(cls, degree: int, mult: int, n0: int = 2) -> "HierarchicalMesh":
        els = frozenset(HierElement(0, i, j) for i in range(n0) for j in range(n0))
        return cls(degree, mult, els, n0)

    @classmethod
    def uniform(cls, degree: int, mult: int, level: int, n0: int = 2) -> "HierarchicalMesh":
        n = n0 << level
        els = frozenset(HierElement(level, i, j) for i in range(n) for j in range(n))
        return cls(degree, mult, els, n0)

    # -- cached structure ---------------------------------------------------
    def _cached(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    @property
    def max_level(self) -> int:
        return max(e.level for e in self.elements)

    @property
    def by_level(self) -> dict[int, set]:
        def build():
            out: dict[int, set] = {}
            for e in self.elements:
                out.setdefault(e.level, set()).add((e.i, e.j))
            return out
        return self._cached("by_level", build)

    @property
    def refined_cells(self) -> dict[int, set]:
        """Cells of each level that have been bisected (strict ancestors of active elements)."""
        def build():
            out: dict[int, set] = {}
            for e in self.elements:
                for lev in range(e.level):
                    s = e.level - lev
                    out.setdefault(lev, set()).add((e.i >> s, e.j >> s))
            return out
        return self._cached("refined", build)

    @property
    def max_level_below(self) -> dict[int, dict]:
        """For each existing cell, the finest level of active elements inside it."""
        def build():
            out: dict[int, dict] = {}
            for e in self.elements:
                for lev in range(e.level + 1):
                    s = e.level - lev
                    d = out.setdefault(lev, {})
                    key = (e.i >> s, e.j >> s)
                    if d.get(key, -1) < e.level:
                        d[key] = e.level
            return out
        return self._cached("maxbelow", build)

    def in_domain(self, level: int, cell: tuple[int, int]) -> bool:
        """Whether the level cell lies in the level-l subdomain."""
        return cell in self.by_level.get(level, ()) or cell in self.refined_cells.get(level, ())

    def is_refined(self, level: int, cell: tuple[int, int]) -> bool:
        return cell in self.refined_cells.get(level, ())

    def domain_cells(self, level: int) -> set:
        return set(self.by_level.get(level, ())) | set(self.refined_cells.get(level, ()))

    def knots(self, degree: int | None = None, mult: int | None = None) -> LevelKnots:
        return LevelKnots(self.degree if degree is None else degree, self.mult if mult is None else mult, self.n0)

    # -- queries -------------------------------------------------------------
    def sorted_elements(self) -> list[HierElement]:
        return self._cached("sorted", lambda: sorted(self.elements))

    def element_box(self, e: HierElement) -> tuple[tuple[float, float], tuple[float, float]]:
        h = 1.0 / (self.n0 << e.level)
        return (e.i * h, (e.i + 1) * h), (e.j * h, (e.j + 1) * h)

    def max_level_in_box(self, level: int, box: tuple[int, int, int, int]) -> int:
        """Finest active level inside the level box ``[x0,x1) x [y0,y1)``."""
        d = self.max_level_below.get(level, {})
        x0, x1, y0, y1 = box
        return max(d[(i, j)] for i in range(x0, x1) for j in range(y0, y1))

    def elements_in_box(self, level: int, box: tuple[int, int, int, int]) -> list[HierElement]:
        """Active elements contained in a box of level cells lying in the level subdomain."""
        x0, x1, y0, y1 = box
        out: list[HierElement] = []
        stack = [(level, i, j) for i in range(x0, x1) for j in range(y0, y1)]
        act = self.by_level
        while stack:
            lev, i, j = stack.pop()
            if (i, j) in act.get(lev, ()):
                out.append(HierElement(lev, i, j))
            elif self.is_refined(lev, (i, j)):
                stack.extend((lev + 1, 2 * i + a, 2 * j + b) for a in (0, 1) for b in (0, 1))
            else:
                raise DomainError("box leaves the level subdomain")
        return sorted(out)

    def locate(self, x: float, y: float) -> HierElement:
        """Active element containing a parameter point (right-limit convention)."""
        for lev in range(self.max_level + 1):
            n = self.n0 << lev
            c = (min(int(x * n), n - 1), min(int(y * n), n - 1))
            if c in self.by_level.get(lev, ()):
                return HierElement(lev, *c)
        raise DomainError("point not covered")

    # -- serialisation -------------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{e.level} {e.i} {e.j}\n" for e in self.sorted_elements())

    @classmethod
    def from_text(cls, text: str, degree: int, mult: int, n0: int = 2) -> "HierarchicalMesh":
        els = []
        for line in text.splitlines():
            line = line.strip()
            if line:
                lev, i, j = (int(v) for v in line.split())
                els.append(HierElement(lev, i, j))
        return cls(degree, mult, frozenset(els), n0)


# ---------------------------------------------------------------------------
# hierarchical basis and partition of unity


def _support_box(lk: LevelKnots, level: int, jx: int, jy: int) -> tuple[int, int, int, int]:
    x0, x1 = lk.support(level, jx)
    y0, y1 = lk.support(level, jy)
    return x0, x1, y0, y1


def _classify(mesh: HierarchicalMesh, level: int, box) -> str:
    """'active', 'passive' (inside the next subdomain) or 'outside'."""
    x0, x1, y0, y1 = box
    act = mesh.by_level.get(level, set())
    ref = mesh.refined_cells.get(level, set())
    all_ref = True
    for i in range(x0, x1):
        for j in range(y0, y1):
            c = (i, j)
            if c in ref:
                continue
            all_ref = False
            if c not in act:
                return "outside"
    return "passive" if all_ref else "active"


def hierarchical_basis(mesh: HierarchicalMesh, degree: int | None = None, mult: int | None = None) -> list[HierBasisFn]:
    """Active hierarchical B-splines, sorted by (level, jx, jy)."""
    lk = mesh.knots(degree, mult)
    p = lk.degree
    out = []
    for lev, cells in mesh.by_level.items():
        cand = set()
        for i, j in cells:
            fx, fy = int(lk.first_func(i)), int(lk.first_func(j))
            for a in range(p + 1):
                for b in range(p + 1):
                    cand.add((fx + a, fy + b))
        for jx, jy in cand:
            if _classify(mesh, lev, _support_box(lk, lev, jx, jy)) == "active":
                out.append(HierBasisFn(lev, jx, jy))
    return sorted(out)


def pu_coefficients(mesh: HierarchicalMesh, pbar: int | None = None, mbar: int = 1) -> list[PUWeight]:
    """Coefficients of the constant one in the hierarchical basis of degree pbar.

    Cascades the all-ones level-0 vector through the two-scale relation,
    freezing coefficients of active functions and passing on those of
    functions whose support lies in the next subdomain.
    """
    if pbar is None:
        pbar = pu_degree_for(mesh.degree, mesh.mult)
    check_pu_pair(mesh.degree, mesh.mult, pbar, mbar)
    lk = mesh.knots(pbar, mbar)
    n = lk.n_funcs(0)
    cur = {(a, b): 1.0 for a in range(n) for b in range(n)}
    out = []
    lev = 0
    while cur:
        nxt: dict = {}
        for (jx, jy), c in cur.items():
            if c == 0.0:
                continue
            kind = _classify(mesh, lev, _support_box(lk, lev, jx, jy))
            if kind == "active":
                out.append(PUWeight(lev, jx, jy, c))
            elif kind == "passive":
                ix, cx = lk.refinement_row(lev, jx)
                iy, cy = lk.refinement_row(lev, jy)
                for a, va in zip(ix, cx):
                    if va == 0.0:
                        continue
                    for b, vb in zip(iy, cy):
                        if vb != 0.0:
                            key = (int(a), int(b))
                            nxt[key] = nxt.get(key, 0.0) + c * va * vb
            elif abs(c) > 1e-12:
                raise InvariantViolation("nonzero coefficient on a function leaving the subdomain")
        cur = nxt
        lev += 1
        if lev > MAX_LEVEL + 1:
            raise InvariantViolation("cascade did not terminate")
    out = [w for w in out if w.coef > 1e-14]
    for w in out:
        if not (-1e-12 <= w.coef <= 1.0 + 1e-12):
            raise InvariantViolation(f"PU coefficient {w.coef} outside [0, 1]")
    return sorted(out)


def eval_pu_sum(mesh: HierarchicalMesh, pu: Iterable[PUWeight], pts, pbar: int, mbar: int = 1) -> np.ndarray:
    """Sum of c_a B_a at parameter points (n, 2)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    lk = mesh.knots(pbar, mbar)
    total = np.zeros(len(pts))
    for w in pu:
        total += w.coef * lk.eval_function(w.level, w.jx, pts[:, 0]) * lk.eval_function(w.level, w.jy, pts[:, 1])
    return total


# ---------------------------------------------------------------------------
# refinement


def _children(e: HierElement) -> list[HierElement]:
    return [HierElement(e.level + 1, 2 * e.i + a, 2 * e.j + b) for b in (0, 1) for a in (0, 1)]


def _closure_blockers(active: set, lk: "LevelKnots", e: HierElement) -> list[HierElement]:
    """Active elements coarser than ``e`` meeting the supports of the level-(l-1)
    PU B-splines that are nonzero on ``e``."""
    if e.level == 0:
        return []
    top = e.level - 1
    p = lk.degree
    ci, cj = e.i >> 1, e.j >> 1
    fx, fy = int(lk.first_func(ci)), int(lk.first_func(cj))
    x0, x1 = lk.knot(top, fx), lk.knot(top, fx + 2 * p + 1)
    y0, y1 = lk.knot(top, fy), lk.knot(top, fy + 2 * p + 1)
    out = []
    for k in range(e.level):
        s = top - k
        for i in range(x0 >> s, ((x1 - 1) >> s) + 1):
            for j in range(y0 >> s, ((y1 - 1) >> s) + 1):
                cand = HierElement(k, i, j)
                if cand in active:
                    out.append(cand)
    return out


def refine(mesh: HierarchicalMesh, marked: Iterable, closure: str = "none", pu_degree: int | None = None) -> HierarchicalMesh:
    """Bisect marked elements in both directions.

    With ``closure='admissible'`` a level-l element is only bisected once
    every coarser active element meeting the supports of the level-(l-1) PU
    B-splines that are nonzero on it has been refined (recursively). Every
    active PU function acting on an element of level L then has level L-1 or
    L, which bounds the patch overlap.
    """
    if closure not in ("none", "admissible"):
        raise DomainError(f"unknown closure rule {closure!r}")
    marked = {HierElement(*e) for e in marked}
    active = set(mesh.elements)
    if not marked <= active:
        raise DomainError("marked elements must be active")
    if not marked:
        return mesh
    pbar = pu_degree_for(mesh.degree, mesh.mult) if pu_degree is None else pu_degree
    lk = LevelKnots(pbar, 1, mesh.n0)
    stack = sorted(marked, reverse=True)
    while stack:
        e = stack.pop()
        if e not in active:
            continue
        if closure == "admissible":
            blockers = _closure_blockers(active, lk, e)
            if blockers:
                stack.append(e)
                stack.extend(blockers)
                continue
        if e.level + 1 > MAX_LEVEL:
            raise InvariantViolation(f"level cap {MAX_LEVEL} exceeded")
        active.remove(e)
        active.update(_children(e))
    return HierarchicalMesh(mesh.degree, mesh.mult, frozenset(active), mesh.n0)


def strategy_elements(mesh: HierarchicalMesh, strategy: str) -> set[HierElement]:
    """Elements selected by the deterministic refinement strategies."""
    if strategy == "uniform":
        return set(mesh.elements)
    if strategy == "half":
        out = set()
        for e in mesh.elements:
            n = mesh.n0 << e.level
            if 2 * (e.i + 1) <= n:
                out.add(e)
        return out
    if strategy == "corner":
        return {e for e in mesh.elements if e.i == 0 and e.j == 0}
    raise DomainError(f"unknown strategy {strategy!r}")


def overlap_count(mesh: HierarchicalMesh, pu: Iterable[PUWeight], pbar: int, mbar: int = 1) -> int:
    """Maximal number of PU supports containing a point.

    Supports are unions of active elements, so the count is constant on each
    element and element centres are exhaustive sample points.
    """
    lk = mesh.knots(pbar, mbar)
    by_level: dict[int, set] = {}
    for w in pu:
        by_level.setdefault(w.level, set()).add((w.jx, w.jy))
    best = 0
    for e in mesh.elements:
        cnt = 0
        for lev, funcs in by_level.items():
            # centre in units of half level-max(lev, e.level) cells
            top = max(lev, e.level)
            cx = (2 * e.i + 1) << (top - e.level)
            cy = (2 * e.j + 1) << (top - e.level)
            s = top - lev
            ci, cj = min(cx >> (s + 1), lk.n_cells(lev) - 1), min(cy >> (s + 1), lk.n_cells(lev) - 1)
            fx, fy = int(lk.first_func(ci)), int(lk.first_func(cj))
            for a in range(lk.degree + 1):
                for b in range(lk.degree + 1):
                    if (fx + a, fy + b) not in funcs:
                        continue
                    x0, x1, y0, y1 = _support_box(lk, lev, fx + a, fy + b)
                    k = 1 << (s + 1)
                    if x0 * k < cx < x1 * k and y0 * k < cy < y1 * k:
                        cnt += 1
        best = max(best, cnt)
    return best


def iter_cells(box: tuple[int, int, int, int]) -> Iterator[tuple[int, int]]:
    x0, x1, y0, y1 = box
    for j in range(y0, y1):
        for i in range(x0, x1):
            yield i, j
