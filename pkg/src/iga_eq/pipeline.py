"""Mesh-to-solution pipeline shared by the estimator, the loop and the tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .galerkin import DiscreteSpace, ManufacturedProblem, PointData, Solution, assemble, solve
from .geometry import GeometryMap
from .hier_mesh import HierarchicalMesh, PUWeight, pu_coefficients, pu_degree_for
from .patches import LargePatch, PatchArrays, build_patches, overlay_depths
from .quadrature import ElementIndex, Overlay


@dataclass
class Discretization:
    """Everything attached to one mesh: PU, patches, overlay, Galerkin solution."""

    mesh: HierarchicalMesh
    geometry: GeometryMap
    problem: ManufacturedProblem
    pbar: int
    ptilde: int
    pu: list[PUWeight]
    patches: list[LargePatch]
    arrays: PatchArrays
    overlay: Overlay
    data: PointData
    space: DiscreteSpace
    solution: Solution

    @property
    def ng(self) -> int:
        return self.overlay.ng


def quadrature_points(ptilde: int) -> int:
    """Gauss points per direction and subcell."""
    return ptilde + 3


def discretize(mesh: HierarchicalMesh, geometry: GeometryMap, problem: ManufacturedProblem,
               ptilde: int, pbar: int | None = None, ng: int | None = None,
               coeffs: np.ndarray | None = None) -> Discretization:
    """Build PU, patches and overlay, then solve the Galerkin problem.

    ``coeffs`` replaces the Galerkin solve by given dof values (used by tests
    that need a prescribed discrete function).
    """
    if pbar is None:
        pbar = pu_degree_for(mesh.degree, mesh.mult)
    pu = pu_coefficients(mesh, pbar)
    patches = build_patches(mesh, pu, pbar)
    arrays = PatchArrays(patches)
    index = ElementIndex(mesh)
    depth = overlay_depths(mesh, arrays, index.locate_cells)
    overlay = Overlay(index, depth, ng or quadrature_points(ptilde))
    data = PointData(overlay, geometry, problem)
    space = DiscreteSpace(mesh)
    if coeffs is None:
        A, b = assemble(space, data)
        coeffs = solve(A, b)
    sol = Solution(space, coeffs, data)
    return Discretization(mesh, geometry, problem, pbar, ptilde, pu, patches, arrays, overlay, data, space, sol)
