"""Two-stage equilibrated flux reconstruction.

For every PU function psi_a a bilinear lifting r_a is computed on the local
mesh of its support, then for every hat psi_b of that mesh a Raviart-Thomas
flux minimisation is solved on the hat support. The local fluxes are summed
into sigma_h = sum_a sum_b sigma_ab.

Local flux systems are hybridised: continuity of normal traces and the
Neumann conditions are enforced through face multipliers, so every cell is
condensed independently and only a small face system remains per (a, b).
All integrals use the overlay quadrature of the discretization.

Fluxes are stored in the parameter domain as RT coefficients w per patch
cell; the physical flux is the contravariant Piola image J w / det J.
"""

from __future__ import annotations

import functools
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import rt
from .errors import InvariantViolation, NumericalError
from .patches import INNER_FACES, QUAD_OFFSETS, LargePatch, small_patch_type
from .pipeline import Discretization
from .quadrature import gauss01, legendre01, subcell_rule

log = logging.getLogger(__name__)
_es = functools.partial(np.einsum, optimize=True)

POINT_BUDGET = 40_000
DENSE_LIFTING_MAX = 400


@dataclass
class LiftingSolution:
    """Bilinear lifting on the local mesh of a large patch.

    Attributes:
        patch: the large patch.
        values: vertex values, shape (nx+1, ny+1).
        multiplier: Lagrange multiplier of the mean-value constraint (0 for boundary patches).
        residual: relative residual of the local system.
    """

    patch: LargePatch
    values: np.ndarray
    multiplier: float
    residual: float


@dataclass
class LocalFlux:
    """Flux on one hat support: RT coefficients per quadrant cell.

    Attributes:
        node: index of the large patch.
        vertex: hat vertex in the local mesh.
        cells: local (ci, cj) per present quadrant.
        coefficients: array (n_quadrants, n_rt) in the layout of :mod:`rt`.
        multiplier: scalar multiplier of the mean constraint (interior only).
        div_residual: max coefficient residual of the divergence constraint.
    """

    node: int
    vertex: tuple[int, int]
    quadrants: list[int]
    cells: list[tuple[int, int]]
    coefficients: np.ndarray
    multiplier: float
    div_residual: float


@dataclass
class Diagnostics:
    lifting_residual: float = 0.0
    lifting_compat: float = 0.0
    flux_compat: float = 0.0
    div_residual: float = 0.0
    n_local: int = 0


def poincare_constant(interior: bool) -> float:
    """Poincare-Friedrichs constant of a hat support in units of its diameter.

    1/pi for mean-free data on closed (convex) supports, 1 next to a free face.
    """
    return 1.0 / np.pi if interior else 1.0


# ---------------------------------------------------------------------------
# small-patch layouts


@functools.lru_cache(maxsize=None)
def face_layout(mask: int, free: int):
    """Constrained faces of a hat support type.

    Returns (quadrants, slots, n_faces, interior) where ``slots[q][side]``
    is the face number of that quadrant side (-1 when unconstrained).
    Inner faces come first in the order of ``INNER_FACES``, then Neumann
    faces by quadrant and side.
    """
    quads = [q for q in range(4) if mask >> q & 1]
    slots = {q: [-1] * 4 for q in quads}
    nf = 0
    for q1, s1, q2, s2 in INNER_FACES:
        if q1 in slots and q2 in slots:
            slots[q1][s1] = nf
            slots[q2][s2] = nf
            nf += 1
    for q in quads:
        for s in range(4):
            if slots[q][s] < 0 and not free >> (4 * q + s) & 1:
                slots[q][s] = nf
                nf += 1
    return tuple(quads), {q: tuple(v) for q, v in slots.items()}, nf, free == 0


def _hat_tables(nodes):
    """Bilinear corner functions k = cx + 2 cy on the reference cell: values and gradients (n, n, 4)."""
    nx = np.stack([1.0 - nodes, nodes], axis=1)
    dn = np.array([-1.0, 1.0])
    N = np.empty((len(nodes), len(nodes), 4))
    DX = np.empty_like(N)
    DY = np.empty_like(N)
    for k in range(4):
        cx, cy = k & 1, k >> 1
        N[:, :, k] = np.outer(nx[:, cx], nx[:, cy])
        DX[:, :, k] = np.outer(np.full(len(nodes), dn[cx]), nx[:, cy])
        DY[:, :, k] = np.outer(nx[:, cx], np.full(len(nodes), dn[cy]))
    return N, DX, DY


# ---------------------------------------------------------------------------
# the engine


class Equilibrator:
    """Computes liftings, local fluxes and the global flux of a discretization."""

    def __init__(self, disc: Discretization, point_budget: int = POINT_BUDGET):
        self.disc = disc
        self.arrays = disc.arrays
        self.overlay = disc.overlay
        self.data = disc.data
        self.sol = disc.solution
        self.ref = rt.reference(disc.ptilde)
        self.lk = disc.mesh.knots(disc.pbar, 1)
        self.n0 = disc.mesh.n0
        self.point_budget = point_budget
        J = disc.geometry.constant_jacobian
        if J is not None:
            det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
            self.K_const = J.T @ J / det
        else:
            self.K_const = None
        self._ops_cache: dict = {}
        self._tls = threading.local()
        self._all_diag: list[Diagnostics] = []
        self._diag_lock = threading.Lock()
        self._lifting: dict[int, np.ndarray] = {}

    @property
    def _diag(self) -> Diagnostics:
        d = getattr(self._tls, "diag", None)
        if d is None:
            d = self._tls.diag = Diagnostics()
            with self._diag_lock:
                self._all_diag.append(d)
        return d

    @property
    def diagnostics(self) -> Diagnostics:
        """Merged diagnostics of all threads."""
        out = Diagnostics()
        for d in self._all_diag:
            out.lifting_residual = max(out.lifting_residual, d.lifting_residual)
            out.lifting_compat = max(out.lifting_compat, d.lifting_compat)
            out.flux_compat = max(out.flux_compat, d.flux_compat)
            out.div_residual = max(out.div_residual, d.div_residual)
            out.n_local += d.n_local
        return out

    # -- records -------------------------------------------------------------
    def _records(self, nodes, col_lo=None, col_hi=None):
        """Global record ids, node, ci, cj for cells of nodes restricted to ci in [lo, hi)."""
        A = self.arrays
        out = []
        for k, a in enumerate(nodes):
            lo = 0 if col_lo is None else max(int(col_lo[k]), 0)
            hi = int(A.nx[a]) if col_hi is None else min(int(col_hi[k]), int(A.nx[a]))
            ny = int(A.ny[a])
            ci = np.repeat(np.arange(lo, hi), ny)
            cj = np.tile(np.arange(ny), hi - lo)
            out.append((np.full(len(ci), a), ci, cj))
        node = np.concatenate([o[0] for o in out]).astype(np.int64)
        ci = np.concatenate([o[1] for o in out]).astype(np.int64)
        cj = np.concatenate([o[2] for o in out]).astype(np.int64)
        rec = A.cell_start[node] + ci * A.ny[node] + cj
        return rec, node, ci, cj

    def _chunks(self, node, ci, cj):
        """Split records into groups of equal subdivision depth and bounded point count.

        Yields (selection, point indices (R, n*n), depth s).
        """
        A = self.arrays
        lev = A.level[node]
        gi = A.x0[node] + ci
        gj = A.y0[node] + cj
        elem = np.empty(len(node), dtype=np.int64)
        for L in np.unique(lev):
            sel = lev == L
            elem[sel] = self.overlay.locate_cells(int(L), gi[sel], gj[sel])
        s = self.overlay.depth[elem] - lev
        for s0 in np.unique(s):
            sel = np.flatnonzero(s == s0)
            n = (1 << int(s0)) * self.overlay.ng
            step = max(1, self.point_budget // (n * n))
            for a in range(0, len(sel), step):
                part = sel[a:a + step]
                idx, _ = self.overlay.cell_point_index(lev[part], gi[part], gj[part], elem[part])
                yield part, idx, int(s0)

    def _fields(self, node, ci, cj, idx, s):
        """Point data of records on their tensor grids (R, n, n)."""
        A = self.arrays
        nodes, _ = subcell_rule(s, self.overlay.ng)
        n = len(nodes)
        R = len(node)
        h = A.h[node]
        lev = A.level[node]
        shape = (R, n, n)
        xs = (A.x0[node] + ci)[:, None] + nodes[None, :]
        ys = (A.y0[node] + cj)[:, None] + nodes[None, :]
        xs = xs * h[:, None]
        ys = ys * h[:, None]
        flev = A.f_level[node][:, None]
        bx, dbx = self.lk.eval_function(flev, A.jx[node][:, None], xs, derivative=True)
        by, dby = self.lk.eval_function(flev, A.jy[node][:, None], ys, derivative=True)
        c = A.coef[node][:, None, None]
        f = {
            "nodes": nodes,
            "h": h,
            "level": lev,
            "w": self.overlay.weights[idx].reshape(shape),
            "G": self.data.G[idx].reshape(shape + (3,)),
            "u": self.sol.grad_hat[idx].reshape(shape + (2,)),
            "fd": self.data.fd[idx].reshape(shape),
            "det": self.data.det[idx].reshape(shape),
            "psi": c * bx[:, :, None] * by[:, None, :],
            "psix": c * dbx[:, :, None] * by[:, None, :],
            "psiy": c * bx[:, :, None] * dby[:, None, :],
            "idx": idx,
        }
        G, u = f["G"], f["u"]
        f["Gu"] = np.stack([G[..., 0] * u[..., 0] + G[..., 1] * u[..., 1],
                            G[..., 1] * u[..., 0] + G[..., 2] * u[..., 1]], axis=-1)
        f["hats"] = _hat_tables(nodes)
        return f

    @staticmethod
    def _g_prime(f):
        """g'_k = fd psi N_k - grad(psi N_k) . G grad u_h, shape (R, n, n, 4)."""
        N, DX, DY = f["hats"]
        hinv = (1.0 / f["h"])[:, None, None, None]
        Gu = f["Gu"]
        psi = f["psi"][..., None]
        gpsi = (Gu[..., 0] * f["psix"] + Gu[..., 1] * f["psiy"])[..., None]
        gN = (Gu[..., 0:1] * DX + Gu[..., 1:2] * DY) * hinv
        return f["fd"][..., None] * psi * N - psi * gN - N * gpsi

    # -- lifting ---------------------------------------------------------------
    def _lifting_pass(self, node, ci, cj):
        R = len(node)
        Kc = np.zeros((R, 4, 4))
        rhs = np.zeros((R, 4))
        size = np.zeros(R)
        mass = np.zeros((R, 4))
        for part, idx, s in self._chunks(node, ci, cj):
            f = self._fields(node[part], ci[part], cj[part], idx, s)
            N, DX, DY = f["hats"]
            w, G = f["w"], f["G"]
            h2 = (f["h"] ** 2)[:, None, None]
            Kc[part] = (_es("rxy,xyi,xyj->rij", w * G[..., 0], DX, DX)
                        + _es("rxy,xyi,xyj->rij", w * G[..., 1], DX, DY)
                        + _es("rxy,xyi,xyj->rij", w * G[..., 1], DY, DX)
                        + _es("rxy,xyi,xyj->rij", w * G[..., 2], DY, DY)) / h2
            gp = self._g_prime(f)
            rhs[part] = np.einsum("rxyk,rxy->rk", gp, w)
            # cancellation-free magnitude of the load, for the compatibility check
            size[part] = np.einsum("rxyk,rxy->r", np.abs(gp), np.abs(w))
            mass[part] = np.einsum("xyk,rxy->rk", N, w * f["det"])
        return Kc, rhs, size, mass

    def solve_liftings(self, nodes) -> dict[int, LiftingSolution]:
        """Liftings of the given nodes (also cached for the flux stage)."""
        A = self.arrays
        nodes = np.asarray(nodes, dtype=np.int64)
        rec, node, ci, cj = self._records(nodes)
        Kc, rhs, size, mass = self._lifting_pass(node, ci, cj)
        start = np.concatenate([[0], np.cumsum(A.ncell[nodes])])
        out = {}
        groups: dict = {}
        for k, a in enumerate(nodes):
            key = (int(A.nx[a]), int(A.ny[a]), tuple(bool(d) for d in A.dirichlet[a]))
            groups.setdefault(key, []).append(k)
        for (nx, ny, dirichlet), ks in groups.items():
            V = (nx + 1) * (ny + 1)
            cvi = np.repeat(np.arange(nx), ny)
            cvj = np.tile(np.arange(ny), nx)
            vid = np.stack([(cvi + (k & 1)) * (ny + 1) + cvj + (k >> 1) for k in range(4)], axis=1)
            vi_all = np.repeat(np.arange(nx + 1), ny + 1)
            vj_all = np.tile(np.arange(ny + 1), nx + 1)
            fixed = np.zeros(V, dtype=bool)
            dl, dr, db, dt = dirichlet
            fixed |= dl & (vi_all == 0)
            fixed |= dr & (vi_all == nx)
            fixed |= db & (vj_all == 0)
            fixed |= dt & (vj_all == ny)
            interior = not any(dirichlet)
            keep = np.flatnonzero(~fixed)
            ks = np.asarray(ks)
            rows = np.concatenate([np.arange(start[k], start[k + 1]) for k in ks]).reshape(len(ks), nx * ny)
            if V <= DENSE_LIFTING_MAX:
                sols, mults, res = self._lifting_dense(Kc[rows], rhs[rows], mass[rows], vid, V, keep, interior)
            else:
                sols, mults, res = [], [], []
                for r in rows:
                    x, m, e = self._lifting_sparse(Kc[r], rhs[r], mass[r], vid, V, keep, interior)
                    sols.append(x)
                    mults.append(m)
                    res.append(e)
                sols = np.array(sols)
            for j, k in enumerate(ks):
                a = int(nodes[k])
                vals = sols[j].reshape(nx + 1, ny + 1)
                self._lifting[a] = vals
                out[a] = LiftingSolution(self.disc.patches[a], vals, float(mults[j]), float(res[j]))
                self._diag.lifting_residual = max(self._diag.lifting_residual, float(res[j]))
                if interior:
                    compat = abs(rhs[rows[j]].sum()) / max(size[rows[j]].sum(), 1e-300)
                    self._diag.lifting_compat = max(self._diag.lifting_compat, compat)
        return out

    @staticmethod
    def _lifting_dense(Kc, rhs, mass, vid, V, keep, interior):
        Bn = Kc.shape[0]
        K = np.zeros((Bn, V, V))
        b = np.zeros((Bn, V))
        c = np.zeros((Bn, V))
        for i in range(4):
            b[:, vid[:, i]] += rhs[:, :, i]
            c[:, vid[:, i]] += mass[:, :, i]
            for j in range(4):
                K[:, vid[:, i], vid[:, j]] += Kc[:, :, i, j]
        Kk = K[:, keep][:, :, keep]
        bk = b[:, keep]
        nk = len(keep)
        if interior:
            S = np.zeros((Bn, nk + 1, nk + 1))
            S[:, :nk, :nk] = Kk
            S[:, :nk, nk] = c[:, keep]
            S[:, nk, :nk] = c[:, keep]
            rh = np.concatenate([bk, np.zeros((Bn, 1))], axis=1)
        else:
            S, rh = Kk, bk
        x = np.linalg.solve(S, rh[..., None])[..., 0]
        res = np.abs(np.einsum("bij,bj->bi", S, x) - rh).max(axis=1)
        scale = np.maximum(np.abs(rh).max(axis=1), np.abs(S).max(axis=(1, 2)) * np.abs(x).max(axis=1))
        res = res / np.maximum(scale, 1e-300)
        sol = np.zeros((Bn, V))
        sol[:, keep] = x[:, :nk]
        mult = x[:, nk] if interior else np.zeros(Bn)
        return sol, mult, res

    @staticmethod
    def _lifting_sparse(Kc, rhs, mass, vid, V, keep, interior):
        rr = np.repeat(vid, 4, axis=1).ravel()
        cc = np.tile(vid, (1, 4)).ravel()
        K = sp.coo_matrix((Kc.reshape(len(Kc), 16).ravel(), (rr, cc)), shape=(V, V)).tocsr()
        b = np.bincount(vid.ravel(), weights=rhs.ravel(), minlength=V)
        c = np.bincount(vid.ravel(), weights=mass.ravel(), minlength=V)
        Kk = K[keep][:, keep]
        bk = b[keep]
        nk = len(keep)
        if interior:
            ck = sp.csr_matrix(c[keep][None, :])
            S = sp.bmat([[Kk, ck.T], [ck, None]], format="csc")
            rh = np.concatenate([bk, [0.0]])
        else:
            S, rh = sp.csc_matrix(Kk), bk
        x = spla.splu(S).solve(rh)
        scale = max(np.abs(rh).max(), abs(S).max() * np.abs(x).max(), 1e-300)
        res = np.abs(S @ x - rh).max() / scale
        sol = np.zeros(V)
        sol[keep] = x[:nk]
        return sol, (x[nk] if interior else 0.0), res

    # -- per-cell flux data ----------------------------------------------------
    def _flux_pass(self, node, ci, cj, rc, osc: bool):
        """Per record: upsilon (R,4,nq), ell (R,4,n_rt), masses, and oscillation data."""
        ref = self.ref
        R = len(node)
        pt = ref.pt
        out = {
            "ups": np.zeros((R, 4, ref.nq)),
            "ell": np.zeros((R, 4, ref.n)),
            "gsq": np.zeros((R, 4)),
        }
        if osc:
            for k in ("A", "vnorm"):
                out[k] = np.zeros((R, 4))
            out["prhs"] = np.zeros((R, 4, ref.n))
        nu = ref.mass_legendre
        for part, idx, s in self._chunks(node, ci, cj):
            f = self._fields(node[part], ci[part], cj[part], idx, s)
            nodes = f["nodes"]
            N, DX, DY = f["hats"]
            w, G, det = f["w"], f["G"], f["det"]
            h = f["h"]
            hinv = (1.0 / h)[:, None, None]
            r = rc[part]
            rx = np.einsum("rk,xyk->rxy", r, DX) * hinv
            ry = np.einsum("rk,xyk->rxy", r, DY) * hinv
            Grx = G[..., 0] * rx + G[..., 1] * ry
            Gry = G[..., 1] * rx + G[..., 2] * ry
            gp = self._g_prime(f)
            g = gp - (Grx[..., None] * DX + Gry[..., None] * DY) * hinv[..., None]
            phi, _, leg = ref.tensor_tables(nodes)
            wg = w[..., None] * g
            mom = _es("rxyk,xa,yb->rkab", wg, leg, leg).reshape(len(part), 4, ref.nq)
            h2 = (h ** 2)[:, None, None]
            out["ups"][part] = mom / (h2 * nu)
            out["gsq"][part] = np.einsum("rxyk,rxyk->rk", wg, g)
            psi = f["psi"]
            tx = N * (psi * f["u"][..., 0] + rx)[..., None]
            ty = N * (psi * f["u"][..., 1] + ry)[..., None]
            ex = _es("rxyk,xi,yj->rkij", w[..., None] * tx, phi, leg).reshape(len(part), 4, -1)
            ey = _es("rxyk,xj,yi->rkij", w[..., None] * ty, leg, phi).reshape(len(part), 4, -1)
            out["ell"][part] = np.concatenate([ex, ey], axis=2)
            if osc:
                wgp = w[..., None] * gp
                momp = _es("rxyk,xa,yb->rkab", wgp, leg, leg)
                cp = momp / (h2[..., None] * nu.reshape(pt + 1, pt + 1))
                proj = _es("rkab,xa,yb->rxyk", cp, leg, leg)
                e = gp - proj
                wd = (w / det)[..., None]
                out["A"][part] = np.einsum("rxyk->rk", wd * e * e)
                u = f["u"]
                unorm = u[..., 0] * f["Gu"][..., 0] + u[..., 1] * f["Gu"][..., 1]
                pN = psi[..., None] * N
                out["vnorm"][part] = np.einsum("rxyk,rxy->rk", pN * pN, w * unorm)
                px = _es("rxyk,xi,yj->rkij", (w * psi * u[..., 0])[..., None] * N, phi, leg).reshape(len(part), 4, -1)
                py = _es("rxyk,xj,yi->rkij", (w * psi * u[..., 1])[..., None] * N, leg, phi).reshape(len(part), 4, -1)
                out["prhs"][part] = np.concatenate([px, py], axis=2)
        return out

    def _mass_pass(self, node, ci, cj):
        """RT mass matrices sum_w J w . J w / det of the given records."""
        ref = self.ref
        M = np.zeros((len(node), ref.n, ref.n))
        for part, idx, s in self._chunks(node, ci, cj):
            nodes, _ = subcell_rule(s, self.overlay.ng)
            n = len(nodes)
            shape = (len(part), n, n)
            w = self.overlay.weights[idx].reshape(shape)
            det = self.data.det[idx].reshape(shape)
            jac = self.data.jac[idx].reshape(shape + (2, 2))
            K00 = (jac[..., 0, 0] ** 2 + jac[..., 1, 0] ** 2) / det
            K01 = (jac[..., 0, 0] * jac[..., 0, 1] + jac[..., 1, 0] * jac[..., 1, 1]) / det
            K11 = (jac[..., 0, 1] ** 2 + jac[..., 1, 1] ** 2) / det
            M[part] = ref.mass_tensor(np.stack([w * K00, w * K01, w * K11], axis=1), nodes)
        return M

    def _cell_ops(self, node, ci, cj):
        """Condensed cell operators; returns (ops dict, per-record index into ops).

        The operators only depend on the physical cell, so records of
        different nodes sharing a cell share one set.
        """
        A = self.arrays
        lev = A.level[node]
        if self.K_const is not None:
            uniq, inv = np.unique(lev, return_inverse=True)
            missing = [int(L) for L in uniq if int(L) not in self._ops_cache]
            if missing:
                Mref = self.ref.mass_const(self.K_const)
                for L in missing:
                    h = 1.0 / (self.n0 << L)
                    self._ops_cache[L] = rt.cell_condense(self.ref, (h * h * Mref)[None])
            ops = {k: np.concatenate([self._ops_cache[int(L)][k] for L in uniq]) for k in self._ops_cache[int(uniq[0])]}
            return ops, inv
        key = (lev << 42) + ((A.x0[node] + ci) << 21) + (A.y0[node] + cj)
        _, first, inv = np.unique(key, return_index=True, return_inverse=True)
        M = self._mass_pass(node[first], ci[first], cj[first])
        return rt.cell_condense(self.ref, M), inv

    # -- local flux systems ------------------------------------------------------
    def _flux_unit(self, nodes, vlo, vhi, sigma, osc_out=None, keep_local=None):
        """Solve all (a, b) with vertex column vi in [vlo, vhi) for the given nodes."""
        A = self.arrays
        ref = self.ref
        nt, nb = ref.nt, ref.nb
        rec, node, ci, cj = self._records(nodes, vlo - 1, vhi)
        if len(rec) == 0:
            return
        vid_corner = np.stack([(ci + (k & 1)) * (A.ny[node] + 1) + cj + (k >> 1) for k in range(4)], axis=1)
        rc = np.empty((len(rec), 4))
        for a in np.unique(node):
            sel = node == a
            rc[sel] = self._lifting[int(a)].ravel()[vid_corner[sel]]
        osc = osc_out is not None
        fd = self._flux_pass(node, ci, cj, rc, osc)
        ops, oid = self._cell_ops(node, ci, cj)
        Minv = ops["Minv"][oid]
        z = np.matmul(fd["ell"], Minv)
        h = A.h[node]
        rho = -np.einsum("qi,rki->rkq", ref.D, z) - h[:, None, None] * fd["ups"]
        tvec = -np.einsum("fi,rki->rkf", ref.Tr, z)
        uvec = np.einsum("rfq,rkq->rkf", ops["SblA"][oid], rho)
        srho = np.einsum("rq,rkq->rk", ops["A"][oid][:, 0, :], rho)
        if osc:
            proj_res = fd["vnorm"] - np.einsum("rki,rki->rk", np.matmul(fd["prhs"], Minv), fd["prhs"])

        # enumerate (a, b) pairs
        va, vvi, vvj = [], [], []
        for k, a in enumerate(nodes):
            lo, hi = max(int(vlo[k]), 0), min(int(vhi[k]), int(A.nx[a]) + 1)
            ny1 = int(A.ny[a]) + 1
            va.append(np.full((hi - lo) * ny1, a))
            vvi.append(np.repeat(np.arange(lo, hi), ny1))
            vvj.append(np.tile(np.arange(ny1), hi - lo))
        va = np.concatenate(va).astype(np.int64)
        vvi = np.concatenate(vvi).astype(np.int64)
        vvj = np.concatenate(vvj).astype(np.int64)
        dirs = A.dirichlet[va]
        mask, free = small_patch_type(A.nx[va], A.ny[va], dirs.T, vvi, vvj)
        keys = mask * (1 << 20) + free
        order = np.argsort(rec)
        rec_sorted = rec[order]

        def local_index(q, sel):
            ox, oy = QUAD_OFFSETS[q]
            a = va[sel]
            g = A.cell_start[a] + (vvi[sel] + ox) * A.ny[a] + vvj[sel] + oy
            pos = np.searchsorted(rec_sorted, g)
            return order[pos]

        diag = self._diag
        for key in np.unique(keys):
            sel_all = np.flatnonzero(keys == key)
            quads, slots, nf, interior = face_layout(int(key >> 20), int(key & ((1 << 20) - 1)))
            nbeta = nf * nt
            ntot = nbeta + (1 if interior else 0)
            step = max(1, 2_000_000 // max(ntot * ntot, 1))
            for c0 in range(0, len(sel_all), step):
                sel = sel_all[c0:c0 + step]
                Gn = len(sel)
                recs = {q: local_index(q, sel) for q in quads}
                Mat = np.zeros((Gn, ntot, ntot))
                rhs = np.zeros((Gn, ntot))
                maps = {}
                for q in quads:
                    lb = np.concatenate([np.arange(sd * nt, (sd + 1) * nt) for sd in range(4) if slots[q][sd] >= 0]) if any(x >= 0 for x in slots[q]) else np.zeros(0, dtype=np.int64)
                    gb = np.concatenate([np.arange(slots[q][sd] * nt, (slots[q][sd] + 1) * nt) for sd in range(4) if slots[q][sd] >= 0]) if len(lb) else np.zeros(0, dtype=np.int64)
                    maps[q] = (lb, gb)
                    r_ = recs[q]
                    o_ = oid[r_]
                    k = 3 - q
                    if len(lb):
                        Mat[:, gb[:, None], gb[None, :]] += ops["Shat"][o_][:, lb[:, None], lb[None, :]]
                        rhs[:, gb] += (tvec[r_, k] - uvec[r_, k])[:, lb]
                        if interior:
                            Mat[:, gb, -1] -= ops["g"][o_][:, lb]
                            Mat[:, -1, gb] -= ops["g"][o_][:, lb]
                    if interior:
                        Mat[:, -1, -1] -= ops["c"][o_]
                        rhs[:, -1] -= srho[r_, k]
                if ntot:
                    y = np.linalg.solve(Mat, rhs[..., None])[..., 0]
                else:
                    y = np.zeros((Gn, 0))
                mu = y[:, -1] if interior else np.zeros(Gn)
                compat = np.zeros(Gn)
                gnorm = np.zeros(Gn)
                for q in quads:
                    lb, gb = maps[q]
                    r_ = recs[q]
                    o_ = oid[r_]
                    k = 3 - q
                    beta = np.zeros((Gn, nb))
                    if len(lb):
                        beta[:, lb] = y[:, gb]
                    rhs_l = rho[r_, k] - np.einsum("rqf,rf->rq", ops["Slb"][o_], beta)
                    rhs_l[:, 0] -= mu
                    lam = np.einsum("rpq,rq->rp", ops["A"][o_], rhs_l)
                    yy = np.concatenate([lam, beta], axis=1)
                    wq = -z[r_, k] - np.einsum("rij,rj->ri", ops["X"][o_], yy)
                    sigma[rec[r_]] += wq
                    dres = ref.D @ wq.T - (h[r_, None] * fd["ups"][r_, k]).T
                    dres[0] -= mu
                    scale = np.maximum(np.abs(h[r_, None] * fd["ups"][r_, k]).max(axis=1), 1e-300)
                    diag.div_residual = max(diag.div_residual, float((np.abs(dres).max(axis=0) / np.maximum(scale, np.abs(wq).max(axis=1))).max()))
                    compat += h[r_] ** 2 * fd["ups"][r_, k, 0]
                    gnorm += fd["gsq"][r_, k]
                    if keep_local is not None:
                        for j in range(Gn):
                            keep_local.setdefault((int(va[sel[j]]), int(vvi[sel[j]]), int(vvj[sel[j]])), {})[q] = (
                                (int(ci[r_[j]]), int(cj[r_[j]])), wq[j], float(mu[j]))
                if interior:
                    rel = np.abs(compat) / np.maximum(np.sqrt(gnorm), 1e-300)
                    diag.flux_compat = max(diag.flux_compat, float(rel.max()))
                diag.n_local += Gn
                if osc:
                    self._osc_terms(osc_out, va[sel], quads, recs, fd, proj_res, h, interior, mask[sel])

    def _osc_terms(self, osc_out, a, quads, recs, fd, proj_res, h, interior, mask):
        """Accumulate the squared efficiency oscillation of every (a, b) into osc_out[a]."""
        # Q_c adds the (mapped) constants back to the mean-free local space, so
        # the data term uses the unconstrained projection in both cases
        data_sq = sum(fd["A"][recs[q], 3 - q] for q in quads)
        hb = h[recs[quads[0]]]
        cpf = poincare_constant(interior)
        nx_ = 1 + (((mask & 3) == 3) | ((mask & 12) == 12)).astype(int)
        ny_ = 1 + (((mask & 5) == 5) | ((mask & 10) == 10)).astype(int)
        diam = hb * np.sqrt(nx_ ** 2 + ny_ ** 2) * self.c_rel
        proj = sum(proj_res[recs[q], 3 - q] for q in quads)
        total = (diam * cpf) ** 2 * np.maximum(data_sq, 0.0) + np.maximum(proj, 0.0)
        np.add.at(osc_out, a, total)

    c_rel = 1.0

    # -- driver --------------------------------------------------------------------
    def _work_units(self, record_budget: int):
        """Groups of whole nodes, or column strips of a single large node."""
        A = self.arrays
        units = []
        cur, cur_n = [], 0
        for a in range(A.n):
            nc = int(A.ncell[a])
            if nc > record_budget:
                if cur:
                    units.append(("group", cur))
                    cur, cur_n = [], 0
                units.append(("big", [a]))
                continue
            if cur_n + nc > record_budget and cur:
                units.append(("group", cur))
                cur, cur_n = [], 0
            cur.append(a)
            cur_n += nc
        if cur:
            units.append(("group", cur))
        return units

    def _record_budget(self) -> int:
        per = 20 * self.ref.n + 8 * self.ref.nq + 64
        return int(max(64, min(20_000, 4_000_000 // per)))

    def _unit(self, kind, nodes, sigma, osc_out, keep_local):
        A = self.arrays
        nodes = np.asarray(nodes, dtype=np.int64)
        self.solve_liftings(nodes)
        if kind == "group":
            self._flux_unit(nodes, np.zeros(len(nodes), dtype=np.int64), A.nx[nodes] + 1, sigma, osc_out, keep_local)
        else:
            a = nodes[0]
            width = max(1, self._record_budget() // int(A.ny[a]))
            for lo in range(0, int(A.nx[a]) + 1, width):
                self._flux_unit(nodes, np.array([lo]), np.array([lo + width]), sigma, osc_out, keep_local)
        for a in nodes:
            self._lifting.pop(int(a), None)

    def run(self, osc: bool = False, keep_local: dict | None = None, c_rel: float = 1.0, threads: int = 1):
        """Compute sigma for all nodes; returns (FluxField, per-node osc_eff^2 or None).

        Work units touch disjoint nodes and records, so running them on
        several threads gives bitwise identical results.
        """
        A = self.arrays
        self.c_rel = c_rel
        sigma = np.zeros((int(A.cell_start[-1]), self.ref.n))
        osc_out = np.zeros(A.n) if osc else None
        units = self._work_units(self._record_budget())
        if threads > 1 and keep_local is None:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(lambda u: self._unit(u[0], u[1], sigma, osc_out, None), units))
        else:
            for kind, nodes in units:
                self._unit(kind, nodes, sigma, osc_out, keep_local)
        self._check()
        return FluxField(self.disc, sigma), osc_out

    def _check(self, tol_lift: float = 1e-11, tol_compat: float = 1e-10, tol_div: float = 1e-10):
        d = self.diagnostics
        if d.lifting_residual > tol_lift:
            raise NumericalError(f"lifting residual {d.lifting_residual:.2e}")
        if d.lifting_compat > tol_compat:
            raise InvariantViolation(f"lifting right-hand side not compatible ({d.lifting_compat:.2e})")
        if d.flux_compat > tol_compat:
            raise InvariantViolation(f"local flux data not compatible ({d.flux_compat:.2e})")
        if d.div_residual > tol_div:
            raise NumericalError(f"divergence constraint residual {d.div_residual:.2e}")


# ---------------------------------------------------------------------------
# the assembled flux


class FluxField:
    """sigma_h as RT coefficients on all patch cells.

    Attributes:
        coefficients: (n_records, n_rt) with records ordered like
            :meth:`PatchArrays.cell_table`.
        w_hat, div_hat: parameter flux and its parameter divergence on the
            overlay points (sigma = J w_hat / det, div sigma = div_hat / det).
    """

    def __init__(self, disc: Discretization, coefficients: np.ndarray):
        self.disc = disc
        self.coefficients = coefficients
        self.ref = rt.reference(disc.ptilde)
        self._overlay_values()

    def _overlay_values(self):
        disc = self.disc
        ov = disc.overlay
        A = disc.arrays
        ref = self.ref
        self.w_hat = np.zeros((ov.n_points, 2))
        self.div_hat = np.zeros(ov.n_points)
        if A.n == 0:
            return
        eq = Equilibrator.__new__(Equilibrator)
        eq.arrays, eq.overlay, eq.point_budget = A, ov, POINT_BUDGET
        node, ci, cj = A.cell_table()
        for part, idx, s in eq._chunks(node, ci, cj):
            nodes, _ = subcell_rule(s, ov.ng)
            phi, dphi, leg = ref.tensor_tables(nodes)
            c = self.coefficients[part]
            cx = c[:, : ref.nhalf].reshape(len(part), ref.pt + 2, ref.nt)
            cy = c[:, ref.nhalf:].reshape(len(part), ref.pt + 2, ref.nt)
            wx = _es("rij,xi,yj->rxy", cx, phi, leg)
            wy = _es("rij,xj,yi->rxy", cy, leg, phi)
            dv = _es("rij,xi,yj->rxy", cx, dphi, leg) + _es("rij,xj,yi->rxy", cy, leg, dphi)
            dv = dv / A.h[node[part]][:, None, None]
            flat = idx.ravel()
            self.w_hat[:, 0] += np.bincount(flat, weights=wx.ravel(), minlength=ov.n_points)
            self.w_hat[:, 1] += np.bincount(flat, weights=wy.ravel(), minlength=ov.n_points)
            self.div_hat += np.bincount(flat, weights=dv.ravel(), minlength=ov.n_points)

    @property
    def sigma(self) -> np.ndarray:
        """Physical flux at overlay points."""
        d = self.disc.data
        return np.einsum("nab,nb->na", d.jac, self.w_hat) / d.det[:, None]

    def norm(self) -> float:
        d = self.disc.data
        s = self.sigma
        return float(np.sqrt(np.sum(d.weights * d.det * np.sum(s * s, axis=1))))

    def evaluate(self, pts, bias=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
        """Parameter flux w_hat (n, 2) and parameter divergence at arbitrary parameter points.

        Points on cell faces are assigned to the cell in direction ``bias``
        (a pair with entries -1, 0 or +1 per axis).
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        A = self.disc.arrays
        ref = self.ref
        bias = np.asarray(bias, dtype=float)
        out_w = np.zeros((len(pts), 2))
        out_d = np.zeros(len(pts))
        eps = 1e-9
        chunk = max(1, 2_000_000 // max(len(pts), 1))
        for a0 in range(0, A.n, chunk):
            nodes = np.arange(a0, min(a0 + chunk, A.n))
            h = A.h[nodes][:, None]
            u = pts[None, :, 0] / h - A.x0[nodes][:, None]
            v = pts[None, :, 1] / h - A.y0[nodes][:, None]
            ub = u + bias[0] * eps
            vb = v + bias[1] * eps
            inside = (ub > 0) & (ub < A.nx[nodes][:, None]) & (vb > 0) & (vb < A.ny[nodes][:, None])
            kn, kp = np.nonzero(inside)
            if len(kn) == 0:
                continue
            a = nodes[kn]
            ci = np.floor(ub[kn, kp]).astype(np.int64)
            cj = np.floor(vb[kn, kp]).astype(np.int64)
            s = np.clip(u[kn, kp] - ci, 0.0, 1.0)
            t = np.clip(v[kn, kp] - cj, 0.0, 1.0)
            c = self.coefficients[A.cell_start[a] + ci * A.ny[a] + cj]
            wv, dv = ref.eval_local(c, s, t)
            np.add.at(out_w, kp, wv)
            np.add.at(out_d, kp, dv / A.h[a])
        return out_w, out_d


def normal_jumps(flux: FluxField, n_gauss: int | None = None, max_faces: int | None = None, seed: int = 0):
    """Normal jumps of sigma across interior faces of the overlay subcells.

    Returns the max absolute physical jump and the number of sampled points.
    """
    disc = flux.disc
    ov = disc.overlay
    g = disc.geometry
    n0 = disc.mesh.n0
    ng = n_gauss or ov.ng
    x, _ = gauss01(ng)
    faces = []
    for k in range(len(ov.elements)):
        lev, L = int(ov.level[k]), int(ov.depth[k])
        m = 1 << (L - lev)
        H = 1.0 / (n0 << L)
        i0, j0 = int(ov.ei[k]) * m, int(ov.ej[k]) * m
        # vertical faces x = const at i0..i0+m, horizontal likewise
        for i in range(m + 1):
            for j in range(m):
                faces.append((0, (i0 + i) * H, (j0 + j) * H, H))
        for j in range(m + 1):
            for i in range(m):
                faces.append((1, (j0 + j) * H, (i0 + i) * H, H))
    faces = np.array(faces)
    pos = faces[:, 1]
    interior = (pos > 1e-14) & (pos < 1 - 1e-14)
    faces = faces[interior]
    if max_faces is not None and len(faces) > max_faces:
        rng = np.random.default_rng(seed)
        faces = faces[rng.choice(len(faces), max_faces, replace=False)]
    worst = 0.0
    npts = 0
    for axis in (0, 1):
        fa = faces[faces[:, 0] == axis]
        if len(fa) == 0:
            continue
        along = fa[:, 2, None] + fa[:, 3, None] * x[None, :]
        pos = np.repeat(fa[:, 1, None], ng, axis=1)
        if axis == 0:
            pts = np.stack([pos, along], -1).reshape(-1, 2)
            lo, hi = (-1, 0), (1, 0)
        else:
            pts = np.stack([along, pos], -1).reshape(-1, 2)
            lo, hi = (0, -1), (0, 1)
        wm, _ = flux.evaluate(pts, lo)
        wp, _ = flux.evaluate(pts, hi)
        _, jac, det = g.eval(pts)
        nhat = np.zeros(2)
        nhat[axis] = 1.0
        jinv_t = np.linalg.inv(jac).transpose(0, 2, 1)
        scale = det * np.linalg.norm(jinv_t @ nhat, axis=1)
        jump = (wp[:, axis] - wm[:, axis]) / scale
        worst = max(worst, float(np.abs(jump).max()))
        npts += len(pts)
    return worst, npts


# ---------------------------------------------------------------------------
# single-patch entry points


def solve_lifting(disc: Discretization, node: int) -> LiftingSolution:
    """Lifting r_a of a single large patch."""
    return Equilibrator(disc).solve_liftings([node])[node]


def solve_local_flux(disc: Discretization, node: int, vertex: tuple[int, int]) -> LocalFlux:
    """Local flux of one hat support of the local mesh of ``node``."""
    eq = Equilibrator(disc)
    eq.solve_liftings([node])
    A = disc.arrays
    sigma = np.zeros((int(A.cell_start[-1]), eq.ref.n))
    keep: dict = {}
    vi, vj = vertex
    eq._flux_unit(np.array([node]), np.array([vi]), np.array([vi + 1]), sigma, keep_local=keep)
    got = keep[(node, vi, vj)]
    quads = sorted(got)
    return LocalFlux(
        node, (vi, vj), quads, [got[q][0] for q in quads], np.array([got[q][1] for q in quads]),
        got[quads[0]][2], eq.diagnostics.div_residual,
    )


def assemble_flux(disc: Discretization, osc: bool = False, c_rel: float = 1.0):
    """Global equilibrated flux (and per-node osc_eff^2 when requested)."""
    eq = Equilibrator(disc)
    flux, osc_sq = eq.run(osc=osc, c_rel=c_rel)
    flux.diagnostics = eq.diagnostics
    return flux, osc_sq


def project_upsilon(disc: Discretization, cells, level: int, g, pt: int | None = None, mean_free: bool = False):
    """Petrov-Galerkin projection onto Q^pt on the given level cells.

    ``g`` is a callable of physical points. Returns Legendre coefficients of
    the parameter representative q_hat per cell (Upsilon g = q_hat / det),
    shape (len(cells), (pt+1)^2). With ``mean_free`` the common constant is
    removed so that the projection has zero integral over the union of cells.
    """
    pt = disc.ptilde if pt is None else pt
    n0 = disc.mesh.n0
    h = 1.0 / (n0 << level)
    x, w = gauss01(pt + 4)
    leg, _ = legendre01(pt, x)
    nu = np.outer(1.0 / (2 * np.arange(pt + 1) + 1), 1.0 / (2 * np.arange(pt + 1) + 1)).ravel()
    out = []
    for ci, cj in cells:
        px = (ci + x) * h
        py = (cj + x) * h
        pts = np.stack(np.meshgrid(px, py, indexing="ij"), -1).reshape(-1, 2)
        phys, _, det = disc.geometry.eval(pts)
        ghat = (g(phys) * det).reshape(len(x), len(x))
        mom = np.einsum("xy,x,y,xa,yb->ab", ghat, w, w, leg, leg).ravel()
        out.append(mom / nu)
    coef = np.array(out)
    if mean_free:
        coef[:, 0] -= coef[:, 0].mean()
    return coef


def stability_probe(pt: int, refine: int = 2, seed: int = 0, interior: bool = True) -> float:
    """Ratio of the discrete RT minimum on a 2x2 hat support to that on a refined mesh.

    The data are a random quadratic vector field and a random quadratic
    divergence target (made compatible), both weighted by the hat function
    of the centre vertex, on the unit square split into 2x2 cells. The
    reference minimum uses the same degree on a mesh refined ``refine``
    times.
    """
    rng = np.random.default_rng(seed)
    cf = rng.standard_normal((2, 3, 3))
    cg = rng.standard_normal((3, 3))

    def tau(p):
        hat = np.maximum(0, 1 - np.abs(2 * p[:, 0] - 1)) * np.maximum(0, 1 - np.abs(2 * p[:, 1] - 1))
        mx = np.polynomial.polynomial.polyval2d(p[:, 0], p[:, 1], cf[0])
        my = np.polynomial.polynomial.polyval2d(p[:, 0], p[:, 1], cf[1])
        return hat[:, None] * np.stack([mx, my], 1)

    def gfun(p):
        hat = np.maximum(0, 1 - np.abs(2 * p[:, 0] - 1)) * np.maximum(0, 1 - np.abs(2 * p[:, 1] - 1))
        return hat * np.polynomial.polynomial.polyval2d(p[:, 0], p[:, 1], cg)

    coarse = _dense_min(pt, 2, tau, gfun, interior)
    fine = _dense_min(pt, 2 << refine, tau, gfun, interior, target_cells=2)
    return coarse / fine


def _dense_min(pt, n, tau, gfun, interior, target_cells=None):
    """min ||v + tau|| over conforming RT^pt on an n x n grid of the unit square.

    The divergence target is the L2 projection of g onto Q^pt of a
    ``target_cells`` grid (defaults to n), made mean free when ``interior``,
    in which case v has zero normal trace on the whole boundary.
    """
    ref = rt.reference(pt)
    tc = target_cells or n
    H = 1.0 / tc
    x, w = gauss01(pt + 4)
    leg, _ = legendre01(pt, x)
    nu = ref.mass_legendre
    tcoef = np.zeros((tc, tc, ref.nq))
    for i in range(tc):
        for j in range(tc):
            pts = np.stack(np.meshgrid((i + x) * H, (j + x) * H, indexing="ij"), -1).reshape(-1, 2)
            gv = gfun(pts).reshape(len(x), len(x))
            tcoef[i, j] = np.einsum("xy,x,y,xa,yb->ab", gv, w, w, leg, leg).ravel() / nu
    if interior:
        tcoef[:, :, 0] -= tcoef[:, :, 0].mean()
    h = 1.0 / n
    # global numbering: cell-interior dofs, plus shared face dofs
    ncell = n * n
    nloc = ref.n
    # each cell: local dof -> global index; faces carry nt dofs (the normal trace)
    gid = np.full((ncell, nloc), -1, dtype=np.int64)
    counter = 0
    vface = {}
    hface = {}
    for i in range(n):
        for j in range(n):
            c = i * n + j
            for sd, key, store in ((0, (i, j), vface), (1, (i + 1, j), vface), (2, (i, j), hface), (3, (i, j + 1), hface)):
                if key not in store:
                    store[key] = np.arange(counter, counter + ref.nt)
                    counter += ref.nt
            # trace dofs: x-part i=0 (left), i=1 (right); y-part i=0 (bottom), i=1 (top)
            gid[c, 0 * ref.nt:1 * ref.nt] = vface[(i, j)]
            gid[c, 1 * ref.nt:2 * ref.nt] = vface[(i + 1, j)]
            gid[c, ref.nhalf:ref.nhalf + ref.nt] = hface[(i, j)]
            gid[c, ref.nhalf + ref.nt:ref.nhalf + 2 * ref.nt] = hface[(i, j + 1)]
            rest = np.flatnonzero(gid[c] < 0)
            gid[c, rest] = np.arange(counter, counter + len(rest))
            counter += len(rest)
    ndof = counter
    lg = np.zeros(ndof)
    bg = np.zeros(ncell * ref.nq)
    mi, mj, mv, di, dj, dv = [], [], [], [], [], []
    Mref = ref.mass_const(np.eye(2))
    phi, _, legc = ref.tensor_tables(x)
    dr, dc = np.nonzero(ref.D)
    tt = 0.0
    for i in range(n):
        for j in range(n):
            c = i * n + j
            idx = gid[c]
            mi.append(np.repeat(idx, nloc))
            mj.append(np.tile(idx, nloc))
            mv.append((h * h * Mref).ravel())
            pts = np.stack(np.meshgrid((i + x) * h, (j + x) * h, indexing="ij"), -1).reshape(-1, 2)
            tv = tau(pts).reshape(len(x), len(x), 2)
            tt += h * h * np.einsum("xyc,x,y->", tv * tv, w, w)
            ex = np.einsum("xy,x,y,xi,yj->ij", tv[..., 0], w, w, phi, legc).ravel()
            ey = np.einsum("xy,x,y,xj,yi->ij", tv[..., 1], w, w, legc, phi).ravel()
            lg[idx] += h * h * np.concatenate([ex, ey])
            di.append(c * ref.nq + dr)
            dj.append(idx[dc])
            dv.append(ref.D[dr, dc])
            # target on this fine cell: evaluate coarse projection, reproject (exact since nested)
            ti, tj = int(i * tc // n), int(j * tc // n)
            ratio = n // tc
            xs = ((i - ti * ratio) + x) / ratio
            ys = ((j - tj * ratio) + x) / ratio
            lx, _ = legendre01(pt, xs)
            ly, _ = legendre01(pt, ys)
            vals = _es("ab,xa,yb->xy", tcoef[ti, tj].reshape(ref.nt, ref.nt), lx, ly)
            bg[c * ref.nq:(c + 1) * ref.nq] = h * np.einsum("xy,x,y,xa,yb->ab", vals, w, w, leg, leg).ravel() / nu
    Mg = sp.csr_matrix((np.concatenate(mv), (np.concatenate(mi), np.concatenate(mj))), shape=(ndof, ndof))
    Dg = sp.csr_matrix((np.concatenate(dv), (np.concatenate(di), np.concatenate(dj))), shape=(ncell * ref.nq, ndof))
    if interior:
        bnd = np.concatenate([vface[(0, j)] for j in range(n)] + [vface[(n, j)] for j in range(n)]
                             + [hface[(i, 0)] for i in range(n)] + [hface[(i, n)] for i in range(n)])
        keep = np.setdiff1d(np.arange(ndof), bnd)
    else:
        keep = np.arange(ndof)
    Mk = Mg[keep][:, keep]
    Dk = Dg[:, keep]
    # drop one redundant divergence row (constant mode) for the closed patch
    if interior:
        Dk = Dk[1:]
        bk = bg[1:]
    else:
        bk = bg
    nk = len(keep)
    K = sp.bmat([[Mk, Dk.T], [Dk, None]], format="csc")
    rhs = np.concatenate([-lg[keep], bk])
    sol = spla.splu(K).solve(rhs)
    v = sol[:nk]
    full = np.zeros(ndof)
    full[keep] = v
    val = full @ Mg @ full + 2 * lg @ full + tt
    return float(np.sqrt(max(val, 0.0)))
