"""Dense reference solvers for the flux reconstruction, written in physical terms.

These assemble everything point by point on the overlay quadrature and use
their own Legendre RT basis, so they share no code with the hybridised
solvers beyond the quadrature points and the discrete solution.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.linalg import null_space

from iga_eq import rt
from iga_eq.galerkin import DiscreteSpace, eval_solution
from iga_eq.hier_mesh import HierarchicalMesh, refine
from iga_eq.patches import QUAD_OFFSETS, hat_eval


def random_mesh(rng, degree, mult, steps=2):
    mesh = HierarchicalMesh.initial(degree, mult)
    for _ in range(steps):
        els = mesh.sorted_elements()
        picks = rng.choice(len(els), size=min(len(els), int(rng.integers(1, 3))), replace=False)
        mesh = refine(mesh, {els[k] for k in picks})
    return mesh


class PatchView:
    """Point data of one large patch restricted to the overlay points inside it."""

    def __init__(self, disc, a):
        self.disc = disc
        self.patch = p = disc.patches[a]
        pts = disc.overlay.points
        x0, y0 = p.origin()
        inside = ((pts[:, 0] > x0) & (pts[:, 0] < x0 + p.nx * p.h)
                  & (pts[:, 1] > y0) & (pts[:, 1] < y0 + p.ny * p.h))
        self.sel = np.flatnonzero(inside)
        self.pts = pts[self.sel]
        d = disc.data
        self.w = d.weights[self.sel]
        self.det = d.det[self.sel]
        self.jac = d.jac[self.sel]
        self.jinv = d.jinv[self.sel]
        self.f = d.problem.f(d.x[self.sel])
        self.gu = disc.solution.grad[self.sel]
        wgt = p.weight
        space = DiscreteSpace(disc.mesh, boundary=False, degree=disc.pbar, mult=1)
        c = np.zeros(space.n_dofs)
        c[space.lookup(wgt.level, [wgt.jx], [wgt.jy])[0]] = wgt.coef
        self.psi, self.gpsi = eval_solution(space, c, self.pts, disc.geometry)

    def hat(self, v):
        val, g = hat_eval(self.patch, v, self.pts)
        return val, np.einsum("nji,nj->ni", self.jinv, g)

    def local(self, cell):
        """Mask and local coordinates of the points in a patch cell."""
        p = self.patch
        x0, y0 = p.origin()
        xi = (self.pts[:, 0] - x0) / p.h - cell[0]
        eta = (self.pts[:, 1] - y0) / p.h - cell[1]
        m = (xi > 0) & (xi < 1) & (eta > 0) & (eta < 1)
        return m, xi[m], eta[m]


def lifting_oracle(disc, a):
    """Bilinear lifting by dense assembly: values (nx+1, ny+1) and the multiplier."""
    pv = PatchView(disc, a)
    p = pv.patch
    verts = [(i, j) for i in range(p.nx + 1) for j in range(p.ny + 1)]
    wd = pv.w * pv.det
    vals, grads = zip(*(pv.hat(v) for v in verts))
    phi = np.array(vals)
    gphi = np.array(grads)
    K = np.einsum("ipc,jpc,p->ij", gphi, gphi, wd)
    rhs = np.einsum("ip,p->i", phi, wd * pv.f * pv.psi)
    rhs -= np.einsum("ipc,pc,p->i", gphi, pv.gu, wd * pv.psi)
    rhs -= np.einsum("ip,pc,pc,p->i", phi, pv.gpsi, pv.gu, wd)
    mass = phi @ wd
    dl, dr, db, dt = p.dirichlet
    fixed = np.array([(dl and i == 0) or (dr and i == p.nx) or (db and j == 0) or (dt and j == p.ny) for i, j in verts])
    keep = np.flatnonzero(~fixed)
    Kk = K[np.ix_(keep, keep)]
    n = len(keep)
    if p.interior:
        S = np.zeros((n + 1, n + 1))
        S[:n, :n] = Kk
        S[:n, n] = S[n, :n] = mass[keep]
        x = np.linalg.solve(S, np.append(rhs[keep], 0.0))
        mult = x[n]
    else:
        x = np.linalg.solve(Kk, rhs[keep])
        mult = 0.0
    out = np.zeros(len(verts))
    out[keep] = x[:n]
    return out.reshape(p.nx + 1, p.ny + 1), mult


class LegendreRT:
    """RT^pt on the unit cell in a tensor Legendre basis on [-1, 1] mapped to [0, 1]."""

    def __init__(self, pt):
        self.pt = pt
        self.half = (pt + 2) * (pt + 1)
        self.n = 2 * self.half
        self.nq = (pt + 1) ** 2

    @staticmethod
    def _v(deg, x):
        return npleg.legvander(2 * np.asarray(x, float) - 1, deg)

    def values(self, xi, eta):
        """Basis values (n_pts, n, 2)."""
        pt = self.pt
        A, B = self._v(pt + 1, xi), self._v(pt, eta)
        C, D = self._v(pt, xi), self._v(pt + 1, eta)
        out = np.zeros((len(xi), self.n, 2))
        out[:, : self.half, 0] = np.einsum("pi,pj->pij", A, B).reshape(len(xi), -1)
        out[:, self.half:, 1] = np.einsum("pi,pj->pij", D, C).reshape(len(xi), -1)
        return out

    def trace(self, side):
        """Normal trace coefficient rows (pt+1, n) in the Legendre basis of the face (outward)."""
        pt = self.pt
        end = 0.0 if side in (0, 2) else 1.0
        sign = -1.0 if side in (0, 2) else 1.0
        e = self._v(pt + 1, [end])[0]
        T = np.zeros((pt + 1, self.n))
        off = 0 if side in (0, 1) else self.half
        for j in range(pt + 1):
            for i in range(pt + 2):
                T[j, off + i * (pt + 1) + j] = sign * e[i]
        return T

    def divergence(self):
        """Reference divergence as Legendre Q^pt coefficients (nq, n)."""
        pt = self.pt
        nt = pt + 1
        # derivative coefficients of P_i in the Legendre basis (times 2 for the map)
        Dd = np.zeros((nt, pt + 2))
        for i in range(pt + 2):
            c = np.zeros(pt + 2)
            c[i] = 1
            d = 2 * npleg.legder(c)
            Dd[: len(d), i] = d
        Dm = np.zeros((nt * nt, self.n))
        for k in range(nt):
            for l in range(nt):
                for i in range(pt + 2):
                    Dm[k * nt + l, i * nt + l] += Dd[k, i]
                    Dm[k * nt + l, self.half + i * nt + k] += Dd[l, i]
        return Dm

    def q_values(self, xi, eta):
        return np.einsum("pk,pl->pkl", self._v(self.pt, xi), self._v(self.pt, eta)).reshape(len(xi), -1)


def local_flux_oracle(disc, a, vertex, r_values):
    """Minimiser of ||sigma + tau|| over the constrained RT space of a hat support.

    Returns {cell: (basis, coefficients)} on the quadrant cells; the field in
    parameter form w (sigma = J w / det) is ``basis.values(xi, eta) @ c``.
    """
    pv = PatchView(disc, a)
    p = pv.patch
    pt = disc.ptilde
    rt = LegendreRT(pt)
    nt = pt + 1
    cells = []
    for q, (ox, oy) in enumerate(QUAD_OFFSETS):
        c = (vertex[0] + ox, vertex[1] + oy)
        if 0 <= c[0] < p.nx and 0 <= c[1] < p.ny:
            cells.append(c)
    nc = len(cells)
    gr = np.zeros((len(pv.pts), 2))
    for i in range(p.nx + 1):
        for j in range(p.ny + 1):
            gr += r_values[i, j] * pv.hat((i, j))[1]
    pb, gpb = pv.hat(vertex)
    g_data = (pv.f * pv.psi * pb - np.sum(pv.gu * (pv.psi[:, None] * gpb + pb[:, None] * pv.gpsi), 1)
              - np.sum(gr * gpb, 1))
    tau = pb[:, None] * (pv.psi[:, None] * pv.gu + gr)

    n = nc * rt.n
    M = np.zeros((n, n))
    ell = np.zeros(n)
    rows, rhs = [], []
    Dm = rt.divergence()
    targets = []
    for k, c in enumerate(cells):
        m, xi, eta = pv.local(c)
        sl = slice(k * rt.n, (k + 1) * rt.n)
        phys = np.einsum("pab,pib->pia", pv.jac[m], rt.values(xi, eta)) / pv.det[m][:, None, None]
        wd = pv.w[m] * pv.det[m]
        M[sl, sl] = np.einsum("pia,pja,p->ij", phys, phys, wd)
        ell[sl] = np.einsum("pia,pa,p->i", phys, tau[m], wd)
        # L2 projection of g det onto Q^pt in parameter measure
        Q = rt.q_values(xi, eta)
        Mq = Q.T @ (pv.w[m][:, None] * Q)
        tgt = np.linalg.solve(Mq, Q.T @ (pv.w[m] * g_data[m] * pv.det[m]))
        targets.append(tgt)
    free = _free_faces(pv, vertex, cells, pb)
    if not free:
        mean = np.mean([t[0] for t in targets])
        for t in targets:
            t[0] -= mean
    for k, t in enumerate(targets):
        row = np.zeros((rt.nq, n))
        row[:, k * rt.n:(k + 1) * rt.n] = Dm / p.h
        rows.append(row)
        rhs.append(t)
    # normal continuity and Neumann faces
    index = {c: k for k, c in enumerate(cells)}
    for k, c in enumerate(cells):
        for side, nb in ((0, (c[0] - 1, c[1])), (1, (c[0] + 1, c[1])), (2, (c[0], c[1] - 1)), (3, (c[0], c[1] + 1))):
            if nb in index:
                if side in (1, 3):
                    row = np.zeros((nt, n))
                    row[:, k * rt.n:(k + 1) * rt.n] = rt.trace(side)
                    j = index[nb]
                    row[:, j * rt.n:(j + 1) * rt.n] = rt.trace(side - 1)
                    rows.append(row)
                    rhs.append(np.zeros(nt))
            elif (c, side) not in free:
                row = np.zeros((nt, n))
                row[:, k * rt.n:(k + 1) * rt.n] = rt.trace(side)
                rows.append(row)
                rhs.append(np.zeros(nt))
    C = np.vstack(rows)
    d = np.concatenate(rhs)
    xp = np.linalg.lstsq(C, d, rcond=None)[0]
    Z = null_space(C, rcond=1e-12)
    y = np.linalg.solve(Z.T @ M @ Z, -Z.T @ (M @ xp + ell))
    x = xp + Z @ y
    return {c: (rt, x[k * rt.n:(k + 1) * rt.n]) for k, c in enumerate(cells)}, float(np.abs(C @ x - d).max())


def _free_faces(pv, vertex, cells, pb):
    """Boundary faces of the hat support on which psi_a psi_b does not vanish."""
    p = pv.patch
    x0, y0 = p.origin()
    mids = {0: (0.0, 0.5), 1: (1.0, 0.5), 2: (0.5, 0.0), 3: (0.5, 1.0)}
    out = set()
    cellset = set(cells)
    wgt = p.weight
    lk = pv.disc.mesh.knots(pv.disc.pbar, 1)
    for c in cells:
        for side, nb in ((0, (c[0] - 1, c[1])), (1, (c[0] + 1, c[1])), (2, (c[0], c[1] - 1)), (3, (c[0], c[1] + 1))):
            if nb in cellset:
                continue
            mx, my = mids[side]
            pt = np.array([[x0 + (c[0] + mx) * p.h, y0 + (c[1] + my) * p.h]])
            psi = wgt.coef * lk.eval_function(wgt.level, wgt.jx, pt[:, 0]) * lk.eval_function(wgt.level, wgt.jy, pt[:, 1])
            if psi[0] * hat_eval(p, vertex, pt)[0][0] > 1e-14:
                out.add((c, side))
    return out


def random_instance(seed):
    """A small random discretization with a chosen large patch and vertex of its local mesh."""
    from iga_eq.galerkin import problem_for_geometry
    from iga_eq.geometry import by_name
    from iga_eq.pipeline import discretize

    rng = np.random.default_rng(seed)
    p = int(rng.integers(1, 4))
    m = int(rng.choice(sorted({1, p})))
    geo = ("square", "quarter-ring")[int(rng.integers(2))]
    mesh = random_mesh(rng, p, m, steps=int(rng.integers(1, 3)))
    disc = discretize(mesh, by_name(geo), problem_for_geometry(geo), p + int(rng.integers(1, 3)))
    a = int(rng.integers(len(disc.patches)))
    patch = disc.patches[a]
    vertex = (int(rng.integers(patch.nx + 1)), int(rng.integers(patch.ny + 1)))
    return disc, a, vertex


def compare_local(disc, lf, oracle):
    """Max difference of a local flux and its oracle at random points, and the oracle size."""
    ref = rt.reference(disc.ptilde)
    s = np.random.default_rng(0).random((25, 2))
    worst, scale = 0.0, 0.0
    for cell, coef in zip(lf.cells, lf.coefficients):
        w, _ = ref.eval_local(np.repeat(coef[None], len(s), 0), s[:, 0], s[:, 1])
        basis, x = oracle[cell]
        wo = np.einsum("pia,i->pa", basis.values(s[:, 0], s[:, 1]), x)
        worst = max(worst, np.abs(w - wo).max())
        scale = max(scale, np.abs(wo).max())
    return worst, scale
