"""A posteriori quantities built from the equilibrated flux."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .equilibration import Equilibrator, FluxField
from .galerkin import _element_groups, element_sums, exact_error
from .geometry import GeometryConstants, GeometryMap, geometry_constants
from .pipeline import Discretization
from .quadrature import legendre01, subcell_rule

_es = functools.partial(np.einsum, optimize=True)
_BUDGET = 200_000


@dataclass
class EstimatorReport:
    """Element and global estimator values of one discretization.

    ``eff1``/``eff2`` are None when the exact error vanishes.
    """

    eta_elements: np.ndarray
    osc_elements: np.ndarray
    eta: float
    osc_rel: float
    error: float
    eff1: float | None
    eff2: float | None
    equilibrium: float
    osc_eff_nodes: np.ndarray | None = None

    @property
    def osc_eff_total(self) -> float:
        if self.osc_eff_nodes is None:
            return float("nan")
        return float(np.sqrt(np.sum(self.osc_eff_nodes ** 2)))

    @property
    def indicators(self) -> np.ndarray:
        """eta(T)^2 + osc_rel(T)^2, the marking indicator."""
        return self.eta_elements ** 2 + self.osc_elements ** 2


@functools.lru_cache(maxsize=None)
def _constants_by_name(name: str, density: int) -> GeometryConstants:
    from .geometry import by_name

    return geometry_constants(by_name(name), density)


def constants_for(g: GeometryMap, density: int = 128) -> GeometryConstants:
    """Sampled geometry constants, cached for the named built-in maps."""
    if g.name in ("square", "quarter-ring"):
        return _constants_by_name(g.name, density)
    return geometry_constants(g, density)


def flux_estimator(disc: Discretization, flux: FluxField) -> np.ndarray:
    """eta(T) = ||sigma_h + grad u_h||_T per active element."""
    d = disc.data
    diff = flux.sigma + disc.solution.grad
    vals = d.weights * d.det * np.sum(diff * diff, axis=1)
    return np.sqrt(np.maximum(element_sums(disc.overlay, vals), 0.0))


def _element_passes(disc: Discretization, residual: np.ndarray, gram: bool):
    """Per element: ||(1 - Upsilon) r||^2 and optionally the Riesz norm^2 of r on Q^pt.

    ``residual`` is the parameter representative r_hat = r * det at overlay points.
    """
    ov = disc.overlay
    d = disc.data
    pt = disc.ptilde
    nt = pt + 1
    nu = np.outer(1.0 / (2 * np.arange(nt) + 1), 1.0 / (2 * np.arange(nt) + 1))
    n_el = len(ov.elements)
    osc2 = np.zeros(n_el)
    riesz2 = np.zeros(n_el)
    n0 = disc.mesh.n0
    for (lev, s), elems in _element_groups(ov).items():
        nodes, _ = subcell_rule(s, ov.ng)
        n = len(nodes)
        leg, _ = legendre01(pt, nodes)
        h2 = (1.0 / (n0 << lev)) ** 2
        step = max(1, _BUDGET // (n * n))
        for a in range(0, len(elems), step):
            el = elems[a:a + step]
            idx = ov.offsets[el][:, None] + np.arange(n * n)[None, :]
            shape = (len(el), n, n)
            W = ov.weights[idx].reshape(shape)
            det = d.det[idx].reshape(shape)
            r = residual[idx].reshape(shape)
            mom = _es("exy,xa,yb->eab", W * r, leg, leg)
            proj = _es("eab,xa,yb->exy", mom / (h2 * nu), leg, leg)
            osc2[el] = np.sum(W * (r - proj) ** 2 / det, axis=(1, 2))
            if gram:
                Gm = _es("exy,xa,xc,yb,yd->eabcd", W * det, leg, leg, leg, leg).reshape(len(el), nt * nt, nt * nt)
                m = mom.reshape(len(el), nt * nt)
                riesz2[el] = np.einsum("ea,ea->e", m, np.linalg.solve(Gm, m[..., None])[..., 0])
    return osc2, riesz2


def osc_rel(disc: Discretization, flux: FluxField, constants: GeometryConstants | None = None) -> np.ndarray:
    """(C_rel / pi) diam(T_hat) ||(1 - Upsilon_Q)(f - div sigma_h)||_T per element."""
    c = constants or constants_for(disc.geometry)
    ov = disc.overlay
    osc2, _ = _element_passes(disc, disc.data.fd - flux.div_hat, gram=False)
    diam = math.sqrt(2.0) / (disc.mesh.n0 * 2.0 ** ov.level)
    return c.c_rel / math.pi * diam * np.sqrt(np.maximum(osc2, 0.0))


def equilibrium_defect(disc: Discretization, flux: FluxField) -> float:
    """sup over q in Q_h of |<f - div sigma_h, q>| / (||f|| ||q||)."""
    d = disc.data
    _, riesz2 = _element_passes(disc, d.fd - flux.div_hat, gram=True)
    fnorm = math.sqrt(float(np.sum(d.weights * d.fd ** 2 / d.det)))
    if fnorm == 0.0:
        return math.sqrt(max(float(riesz2.sum()), 0.0))
    return math.sqrt(max(float(riesz2.sum()), 0.0)) / fnorm


def effectivity(eta: float, osc: float, error: float) -> tuple[float | None, float | None]:
    """(eta / error, (eta + osc) / error), or (None, None) when error = 0."""
    if error <= 0.0:
        return None, None
    return eta / error, (eta + osc) / error


def estimate(disc: Discretization, with_osc_eff: bool = True, threads: int = 1) -> tuple[EstimatorReport, FluxField]:
    """Equilibrate, then evaluate all estimator quantities."""
    c = constants_for(disc.geometry)
    eq = Equilibrator(disc)
    flux, osc_sq = eq.run(osc=with_osc_eff, c_rel=c.c_rel, threads=threads)
    flux.diagnostics = eq.diagnostics
    eta_T = flux_estimator(disc, flux)
    osc_T = osc_rel(disc, flux, c)
    eta = float(np.sqrt(np.sum(eta_T ** 2)))
    osc = float(np.sqrt(np.sum(osc_T ** 2)))
    err = exact_error(disc.solution)
    e1, e2 = effectivity(eta, osc, err)
    report = EstimatorReport(
        eta_elements=eta_T,
        osc_elements=osc_T,
        eta=eta,
        osc_rel=osc,
        error=err,
        eff1=e1,
        eff2=e2,
        equilibrium=equilibrium_defect(disc, flux),
        osc_eff_nodes=np.sqrt(np.maximum(osc_sq, 0.0)) if osc_sq is not None else None,
    )
    return report, flux
