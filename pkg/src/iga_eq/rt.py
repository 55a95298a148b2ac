"""Broken Raviart-Thomas elements of degree pt on axis-parallel cells.

On the reference cell [0,1]^2 the x-component basis is ``phi_i(s) P_j(t)``
and the y-component basis is ``P_j(s) phi_i(t)`` for i = 0..pt+1, j = 0..pt,
where ``phi`` is :func:`quadrature.edge_basis` and ``P_j`` are shifted
Legendre polynomials. The divergence of this space is exactly Q^pt, and the
normal trace on each side is expanded in ``P_0..P_pt``.

Coefficient layout: x-part ``i*(pt+1)+j`` then y-part with the same rule,
offset by ``(pt+2)*(pt+1)``. Scalar Q^pt coefficients use ``k*(pt+1)+l``
for ``P_k(s) P_l(t)``.
"""

from __future__ import annotations

import functools

import numpy as np

from .quadrature import edge_basis, edge_derivative_matrix, gauss01, legendre01, legendre_mass

L, R, B, T = 0, 1, 2, 3
_es = functools.partial(np.einsum, optimize=True)


class RTReference:
    """Reference matrices for degree ``pt``."""

    def __init__(self, pt: int):
        if pt < 0:
            raise ValueError("degree must be nonnegative")
        self.pt = pt
        nt = pt + 1
        self.nt = nt
        self.nhalf = (pt + 2) * nt
        self.n = 2 * self.nhalf
        self.nq = nt * nt
        self.nb = 4 * nt
        self.nc = self.nq + self.nb
        D1 = edge_derivative_matrix(pt)
        D = np.zeros((self.nq, self.n))
        for k in range(nt):
            for l in range(nt):
                row = k * nt + l
                for i in range(pt + 2):
                    D[row, i * nt + l] += D1[k, i]
                    D[row, self.nhalf + i * nt + k] += D1[l, i]
        self.D = D
        Tr = np.zeros((self.nb, self.n))
        for j in range(nt):
            Tr[L * nt + j, 0 * nt + j] = -1.0
            Tr[R * nt + j, 1 * nt + j] = 1.0
            Tr[B * nt + j, self.nhalf + 0 * nt + j] = -1.0
            Tr[T * nt + j, self.nhalf + 1 * nt + j] = 1.0
        self.Tr = Tr
        self.C = np.vstack([D, Tr])
        self.mass_legendre = np.outer(legendre_mass(pt), legendre_mass(pt)).ravel()

    # -- evaluation --------------------------------------------------------
    def eval_local(self, coefs, s, t):
        """Field values (n, 2) and reference divergence (n,) of per-point coefficients (n, self.n)."""
        coefs = np.atleast_2d(coefs)
        phi, dphi = edge_basis(self.pt, s)
        ps, _ = legendre01(self.pt, s)
        pt_, _ = legendre01(self.pt, t)
        phit, dphit = edge_basis(self.pt, t)
        cx = coefs[:, : self.nhalf].reshape(-1, self.pt + 2, self.nt)
        cy = coefs[:, self.nhalf:].reshape(-1, self.pt + 2, self.nt)
        wx = np.einsum("nij,ni,nj->n", cx, phi, pt_)
        wy = np.einsum("nij,nj,ni->n", cy, ps, phit)
        div = np.einsum("nij,ni,nj->n", cx, dphi, pt_) + np.einsum("nij,nj,ni->n", cy, ps, dphit)
        return np.stack([wx, wy], axis=1), div

    def tensor_tables(self, nodes):
        """phi, phi', P at 1D nodes."""
        phi, dphi = edge_basis(self.pt, nodes)
        leg, _ = legendre01(self.pt, nodes)
        return phi, dphi, leg

    # -- mass matrices -------------------------------------------------------
    def mass_tensor(self, Kw, nodes):
        """Mass matrices for per-point tensors on tensor grids.

        Kw: (R, 3, n, n) with weights already applied to (Kxx, Kxy, Kyy).
        Returns (R, self.n, self.n).
        """
        phi, _, leg = self.tensor_tables(nodes)
        Rn = Kw.shape[0]
        M = np.zeros((Rn, self.n, self.n))
        # xx: phi_a(x) phi_b(x) P_c(y) P_d(y)
        t = _es("rxy,yc,yd->rxcd", Kw[:, 0], leg, leg)
        Mxx = _es("rxcd,xa,xb->racbd", t, phi, phi).reshape(Rn, self.nhalf, self.nhalf)
        # yy: y basis (a, c) = P_c(x) phi_a(y)
        t = _es("rxy,xc,xd->rcdy", Kw[:, 2], leg, leg)
        Myy = _es("rcdy,ya,yb->racbd", t, phi, phi).reshape(Rn, self.nhalf, self.nhalf)
        # xy: x basis (a, c) = phi_a(x) P_c(y), y basis (b, d) = P_d(x) phi_b(y)
        t = _es("rxy,xa,xd->rady", Kw[:, 1], phi, leg)
        Mxy = _es("rady,yc,yb->racbd", t, leg, phi).reshape(Rn, self.nhalf, self.nhalf)
        h = self.nhalf
        M[:, :h, :h] = Mxx
        M[:, h:, h:] = Myy
        M[:, :h, h:] = Mxy
        M[:, h:, :h] = np.transpose(Mxy, (0, 2, 1))
        return M

    @functools.lru_cache(maxsize=None)
    def _mass_const(self, k00: float, k01: float, k11: float) -> np.ndarray:
        x, w = gauss01(self.pt + 3)
        K = np.stack([k00 * np.outer(w, w), k01 * np.outer(w, w), k11 * np.outer(w, w)])[None]
        return self.mass_tensor(K, x)[0]

    def mass_const(self, K) -> np.ndarray:
        """Reference-cell mass matrix for a constant tensor K (2x2)."""
        return self._mass_const(float(K[0, 0]), float(K[0, 1]), float(K[1, 1]))


@functools.lru_cache(maxsize=None)
def reference(pt: int) -> RTReference:
    return RTReference(pt)


def cell_condense(ref: RTReference, M: np.ndarray):
    """Per-cell condensation of the hybridised local flux system.

    For each mass matrix M (R, n, n) returns a dict with
        Minv = M^{-1}, X = M^{-1} C^T, A = (D M^{-1} D^T)^{-1}, Shat = S_bb - S_bl A S_lb,
        g = S_bl A e0, c = e0^T A e0
    where C = [D; Tr], S = C M^{-1} C^T and e0 is the unit vector of the
    constant mode in Q^pt.
    """
    nq = ref.nq
    Minv = np.linalg.inv(M)
    Minv = 0.5 * (Minv + np.transpose(Minv, (0, 2, 1)))
    X = Minv @ ref.C.T
    S = ref.C @ X
    Sll, Slb, Sbl, Sbb = S[:, :nq, :nq], S[:, :nq, nq:], S[:, nq:, :nq], S[:, nq:, nq:]
    A = np.linalg.inv(Sll)
    SblA = Sbl @ A
    Shat = Sbb - SblA @ Slb
    g = SblA[:, :, 0]
    c = A[:, 0, 0]
    return {"Minv": Minv, "X": X, "A": A, "Slb": Slb, "SblA": SblA, "Shat": Shat, "g": g, "c": c}
