"""Shared fixtures: hand-built hierarchical meshes and small pipelines."""

from __future__ import annotations

from fractions import Fraction

import pytest

from iga_eq.hier_mesh import HierarchicalMesh, HierElement, refine

# Refined regions of the 8x8 example mesh, as (level, x0, x1, y0, y1).
# Every region is a union of cells of the level below.
EXAMPLE_REGIONS = [
    (1, "0", "3/8", "0", "3/8"),
    (1, "1/2", "1", "1/2", "1"),
    (1, "0", "1/8", "3/4", "1"),
    (1, "0", "1/8", "3/8", "1/2"),
    (2, "0", "1/16", "0", "1/8"),
    (2, "13/16", "1", "13/16", "1"),
    (2, "0", "1/16", "15/16", "1"),
    (3, "62/64", "1", "62/64", "1"),
]


def region_mesh(degree: int, mult: int, n0: int, regions) -> HierarchicalMesh:
    """Refine level by level every active element lying inside a region of the next level."""
    mesh = HierarchicalMesh.initial(degree, mult, n0)
    boxes = [(lev, *(Fraction(v) for v in box)) for lev, *box in regions]
    for target in sorted({b[0] for b in boxes}):
        marked = set()
        for e in mesh.elements:
            if e.level != target - 1:
                continue
            h = Fraction(1, n0 << e.level)
            x0, y0 = e.i * h, e.j * h
            for lev, a0, a1, b0, b1 in boxes:
                if lev == target and a0 <= x0 and x0 + h <= a1 and b0 <= y0 and y0 + h <= b1:
                    marked.add(e)
        mesh = refine(mesh, marked)
    return mesh


@pytest.fixture(scope="session")
def example_mesh() -> HierarchicalMesh:
    """Four-level mesh over an 8x8 coarse grid, p = 2, single knots."""
    return region_mesh(2, 1, 8, EXAMPLE_REGIONS)


def corner_mesh(degree: int, mult: int, steps: int) -> HierarchicalMesh:
    mesh = HierarchicalMesh.initial(degree, mult)
    for _ in range(steps):
        mesh = refine(mesh, [HierElement(mesh.max_level, 0, 0)])
    return mesh
