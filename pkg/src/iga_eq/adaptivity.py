"""Dörfler marking and the refinement loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigurationError, InvariantViolation
from .estimator import EstimatorReport, estimate
from .galerkin import problem_for_geometry
from .geometry import by_name
from .hier_mesh import HierarchicalMesh, eval_pu_sum, refine, strategy_elements
from .pipeline import discretize
from .spline_core import MAX_DEGREE

log = logging.getLogger(__name__)

STRATEGIES = ("uniform", "adaptive", "half", "corner")
CSV_COLUMNS = ("step", "N_elements", "N_dofs", "error", "eta", "osc_rel", "eff1", "eff2", "osc_eff_total", "wall_ms")


def doerfler_mark(indicators, elements, theta: float) -> list:
    """Minimal set M with sum_M ind >= theta * sum ind.

    Elements are taken by descending indicator, ties broken by
    (level, i, j). With theta = 1 every element with a nonzero indicator is
    marked.
    """
    if not 0.0 < theta <= 1.0:
        raise ConfigurationError("theta must lie in (0, 1]")
    ind = np.asarray(indicators, dtype=float)
    if len(ind) != len(elements):
        raise ValueError("one indicator per element required")
    if np.any(ind < 0) or not np.all(np.isfinite(ind)):
        raise ValueError("indicators must be finite and nonnegative")
    order = sorted(range(len(ind)), key=lambda k: (-ind[k], tuple(elements[k])))
    if theta == 1.0:
        return [elements[k] for k in order if ind[k] > 0.0]
    vals = ind[order]
    total = math.fsum(vals)
    if total == 0.0:
        return []
    target = theta * total
    acc = 0.0
    out = []
    for k, v in zip(order, vals):
        if acc >= target:
            break
        out.append(elements[k])
        acc += v
    return out


@dataclass(frozen=True)
class LoopConfig:
    """Parameters of one experiment.

    Attributes:
        geometry: "quarter-ring" or "square".
        p, m: spline degree and knot multiplicity of new knots.
        ptilde_offset: equilibration degree minus p (1 or 2).
        strategy: one of ``STRATEGIES``.
        theta: Dörfler parameter for the adaptive strategy.
        max_elements: meshes above this size are not solved.
        max_steps: maximal number of solved meshes.
        record_timing: write measured wall time (otherwise 0, for reproducible files).
        threads: worker threads for the local problems.
        seed: seed of the randomised invariant probes.
        check_invariants: run the per-step invariant checks.
    """

    geometry: str = "quarter-ring"
    p: int = 2
    m: int = 1
    ptilde_offset: int = 2
    strategy: str = "uniform"
    theta: float = 0.5
    max_elements: int = 5000
    max_steps: int = 25
    record_timing: bool = True
    threads: int = 1
    seed: int = 0
    check_invariants: bool = True
    n0: int = 2

    def __post_init__(self) -> None:
        if self.geometry not in ("quarter-ring", "square"):
            raise ConfigurationError(f"unknown geometry {self.geometry!r}")
        if not 1 <= self.p <= MAX_DEGREE:
            raise ConfigurationError(f"degree must lie in 1..{MAX_DEGREE}")
        if self.m not in (1, self.p):
            raise ConfigurationError("multiplicity must be 1 or p")
        if self.ptilde_offset not in (1, 2):
            raise ConfigurationError("ptilde offset must be 1 or 2")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if not 0.0 < self.theta <= 1.0:
            raise ConfigurationError("theta must lie in (0, 1]")
        if self.max_elements < 1 or self.max_steps < 1 or self.threads < 1:
            raise ConfigurationError("limits must be positive")

    @property
    def ptilde(self) -> int:
        return self.p + self.ptilde_offset

    @property
    def stem(self) -> str:
        return f"{self.geometry}_p{self.p}_m{self.m}_pt{self.ptilde}_{self.strategy}"


@dataclass
class StepResult:
    step: int
    n_elements: int
    n_dofs: int
    report: EstimatorReport
    wall_ms: float
    max_level: int
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        r = self.report
        return {
            "step": self.step,
            "N_elements": self.n_elements,
            "N_dofs": self.n_dofs,
            "error": r.error,
            "eta": r.eta,
            "osc_rel": r.osc_rel,
            "eff1": "" if r.eff1 is None else r.eff1,
            "eff2": "" if r.eff2 is None else r.eff2,
            "osc_eff_total": r.osc_eff_total,
            "wall_ms": self.wall_ms,
        }


def check_step(cfg: LoopConfig, disc, report: EstimatorReport, flux, rng: np.random.Generator) -> dict:
    """Per-step invariants; raises InvariantViolation on failure."""
    from .equilibration import normal_jumps

    out = {}
    if report.equilibrium > 1e-9:
        raise InvariantViolation(f"equilibrium defect {report.equilibrium:.2e}")
    if report.error > report.eta + report.osc_rel + 1e-6 * report.eta:
        raise InvariantViolation("reliability bound violated")
    pts = rng.random((64, 2))
    pu = eval_pu_sum(disc.mesh, disc.pu, pts, disc.pbar)
    if np.max(np.abs(pu - 1.0)) > 1e-12:
        raise InvariantViolation("partition of unity broken")
    jump, _ = normal_jumps(flux, max_faces=200, seed=int(rng.integers(1 << 31)))
    norm = flux.norm()
    if jump > 1e-9 * max(norm, 1e-300):
        raise InvariantViolation(f"normal jump {jump:.2e}")
    d = flux.diagnostics
    out.update(jump=jump, lifting_residual=d.lifting_residual, compat=max(d.lifting_compat, d.flux_compat))
    return out


def next_mesh(cfg: LoopConfig, mesh: HierarchicalMesh, report: EstimatorReport) -> HierarchicalMesh:
    if cfg.strategy == "adaptive":
        elems = mesh.sorted_elements()
        marked = doerfler_mark(report.indicators, elems, cfg.theta)
        return refine(mesh, marked, closure="admissible")
    return refine(mesh, strategy_elements(mesh, cfg.strategy), closure="none")


def run_loop(cfg: LoopConfig, callback: Callable[[StepResult], None] | None = None,
             inspect: Callable | None = None) -> list[StepResult]:
    """Solve, estimate, mark and refine until the element or step limit.

    ``inspect(result, disc, flux)`` sees every step's discretization and flux
    before they are dropped.
    """
    g = by_name(cfg.geometry)
    problem = problem_for_geometry(cfg.geometry)
    mesh = HierarchicalMesh.initial(cfg.p, cfg.m, cfg.n0)
    rng = np.random.default_rng(cfg.seed)
    results = []
    for step in range(cfg.max_steps):
        t0 = time.perf_counter()
        disc = discretize(mesh, g, problem, cfg.ptilde)
        report, flux = estimate(disc, threads=cfg.threads)
        wall = (time.perf_counter() - t0) * 1000.0
        extra = check_step(cfg, disc, report, flux, rng) if cfg.check_invariants else {}
        res = StepResult(step, len(mesh.elements), disc.space.n_dofs, report,
                         wall if cfg.record_timing else 0.0, mesh.max_level, extra)
        results.append(res)
        log.info("%s step %d: N=%d dofs=%d err=%.3e eta=%.3e eff2=%s",
                 cfg.stem, step, res.n_elements, res.n_dofs, report.error, report.eta, report.eff2)
        if inspect is not None:
            inspect(res, disc, flux)
        if callback is not None:
            callback(res)
        if step + 1 == cfg.max_steps:
            break
        new = next_mesh(cfg, mesh, report)
        if len(new.elements) > cfg.max_elements or new.elements == mesh.elements:
            break
        mesh = new
    return results


# ---------------------------------------------------------------------------
# output


def write_csv(path: Path, results: list[StepResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in results:
            row = r.row()
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})


def read_csv(path: Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _svg_plot(series: dict[str, tuple[list, list]], title: str, ylabel: str, logy: bool) -> str:
    """Minimal log-x line plot as an SVG document."""
    W, H, m = 640, 420, 60
    xs = [x for xv, _ in series.values() for x in xv if x > 0]
    ys = [y for _, yv in series.values() for y in yv if y is not None and np.isfinite(y) and (y > 0 or not logy)]
    if not xs or not ys:
        xs, ys = [1, 10], [0, 1]
    fx = np.log10
    fy = np.log10 if logy else (lambda v: v)
    x0, x1 = fx(min(xs)), fx(max(xs))
    y0, y1 = fy(min(ys)), fy(max(ys))
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return m + (fx(x) - x0) / (x1 - x0) * (W - 2 * m)

    def py(y):
        return H - m - (fy(y) - y0) / (y1 - y0) * (H - 2 * m)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>',
        f'<line x1="{m}" y1="{H - m}" x2="{W - m}" y2="{H - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{H - m}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle" font-family="sans-serif" font-size="12">N elements (log)</text>',
        f'<text x="16" y="{H / 2}" transform="rotate(-90 16 {H / 2})" text-anchor="middle" font-family="sans-serif" font-size="12">{ylabel}</text>',
    ]
    for k, (name, (xv, yv)) in enumerate(series.items()):
        pts = [(px(x), py(y)) for x, y in zip(xv, yv) if y is not None and np.isfinite(y) and x > 0 and (y > 0 or not logy)]
        c = colors[k % len(colors)]
        if pts:
            path = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
            parts.append(f'<polyline points="{path}" fill="none" stroke="{c}" stroke-width="2"/>')
            parts.extend(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="{c}"/>' for a, b in pts)
        parts.append(f'<text x="{W - m - 150}" y="{m + 18 * k}" font-family="sans-serif" font-size="12" fill="{c}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_plots(out: Path, results: list[StepResult]) -> None:
    n = [r.n_elements for r in results]
    eff1 = [r.report.eff1 for r in results]
    eff2 = [r.report.eff2 for r in results]
    (out / "effectivity.svg").write_text(
        _svg_plot({"eta / error": (n, eff1), "(eta + osc) / error": (n, eff2)}, "Effectivity indices", "index", logy=False))
    err = [r.report.error for r in results]
    eta = [r.report.eta for r in results]
    osc = [r.report.osc_rel for r in results]
    (out / "oscillation.svg").write_text(
        _svg_plot({"error": (n, err), "eta": (n, eta), "osc_rel": (n, osc)}, "Error, estimator and oscillation", "value (log)", logy=True))


def fitted_slope(n, values, last: int = 3) -> float:
    """Least-squares slope of log(values) against log(n) over the last points."""
    x = np.log(np.asarray(n, dtype=float)[-last:])
    y = np.log(np.asarray(values, dtype=float)[-last:])
    return float(np.polyfit(x, y, 1)[0])
