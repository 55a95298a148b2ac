"""Tests for the Galerkin discretisation: spaces, assembly, solve and exact errors."""

from __future__ import annotations

import numpy as np
import numpy.testing as nptest
import pytest
import scipy.sparse as sp

from conftest import corner_mesh
from iga_eq.errors import AssemblyError, DomainError, NumericalError
from iga_eq.galerkin import (
    DiscreteSpace,
    assemble,
    eval_solution,
    exact_error,
    manufactured,
    problem_for_geometry,
    solve,
)
from iga_eq.geometry import by_name, quarter_ring, square
from iga_eq.hier_mesh import HierarchicalMesh, HierElement, pu_coefficients, refine
from iga_eq.pipeline import discretize


def run(mesh, geometry="square", ptilde=None):
    g = by_name(geometry)
    return discretize(mesh, g, problem_for_geometry(geometry), ptilde or mesh.degree + 1)


class TestManufactured:
    @pytest.mark.parametrize("kind", ["ring", "square"])
    def test_load_is_minus_laplacian(self, kind):
        prob = manufactured(kind)
        pts = np.random.default_rng(0).uniform(0.1, 0.9, (40, 2))
        h = 1e-3
        lap = sum(
            (prob.u(pts + e) - 2 * prob.u(pts) + prob.u(pts - e)) / h**2
            for e in (np.array([h, 0.0]), np.array([0.0, h]))
        )
        nptest.assert_allclose(prob.f(pts), -lap, atol=1e-4 * np.abs(lap).max())

    def test_gradient(self):
        prob = manufactured("ring")
        pts = np.random.default_rng(1).uniform(0.1, 0.9, (40, 2))
        h = 1e-6
        fd = np.stack([(prob.u(pts + e) - prob.u(pts - e)) / (2 * h) for e in (np.array([h, 0.0]), np.array([0.0, h]))], 1)
        nptest.assert_allclose(prob.grad(pts), fd, atol=1e-6)

    def test_vanishes_on_boundary(self):
        s = np.linspace(0, 1, 30)
        for name in ("square", "quarter-ring"):
            g, prob = by_name(name), problem_for_geometry(name)
            for side in (np.column_stack([s, 0 * s]), np.column_stack([s, 0 * s + 1]),
                         np.column_stack([0 * s, s]), np.column_stack([0 * s + 1, s])):
                nptest.assert_allclose(prob.u(g.eval(side)[0]), 0.0, atol=1e-14)

    def test_unknown(self):
        with pytest.raises(DomainError):
            manufactured("wave")


class TestSpace:
    def test_boundary_functions_dropped(self):
        space = DiscreteSpace(HierarchicalMesh.uniform(2, 1, 1))
        assert space.n_dofs == 16
        assert DiscreteSpace(HierarchicalMesh.uniform(2, 1, 1), boundary=False).n_dofs == 36

    def test_lookup(self):
        space = DiscreteSpace(HierarchicalMesh.initial(1, 1))
        nptest.assert_array_equal(space.lookup(0, [1, 0], [1, 1]), [0, -1])
        nptest.assert_array_equal(space.lookup(5, [1], [1]), [-1])

    def test_zero_coefficients(self):
        space = DiscreteSpace(HierarchicalMesh.initial(2, 1))
        v, g = eval_solution(space, np.zeros(space.n_dofs), np.random.default_rng(0).random((10, 2)))
        assert np.all(v == 0) and np.all(g == 0)

    def test_ones_without_mask(self):
        mesh = HierarchicalMesh.uniform(3, 1, 1)
        space = DiscreteSpace(mesh, boundary=False)
        v, g = eval_solution(space, np.ones(space.n_dofs), np.random.default_rng(0).random((30, 2)))
        nptest.assert_allclose(v, 1.0, atol=1e-13)
        nptest.assert_allclose(g, 0.0, atol=1e-11)

    def test_partition_of_unity_coefficients(self):
        """The spline PU written in the (unmasked) hierarchical basis of degree p evaluates to one."""
        mesh = corner_mesh(2, 1, 3)
        pu = pu_coefficients(mesh, 2)
        space = DiscreteSpace(mesh, boundary=False, degree=2, mult=1)
        c = np.zeros(space.n_dofs)
        for w in pu:
            c[space.lookup(w.level, [w.jx], [w.jy])[0]] = w.coef
        v, _ = eval_solution(space, c, np.random.default_rng(2).random((50, 2)))
        nptest.assert_allclose(v, 1.0, atol=1e-12)

    def test_gradient_against_differences(self):
        mesh = refine(HierarchicalMesh.initial(3, 1), [HierElement(0, 0, 0)])
        space = DiscreteSpace(mesh)
        c = np.random.default_rng(0).standard_normal(space.n_dofs)
        pts = np.random.default_rng(1).uniform(0.05, 0.95, (40, 2))
        g = quarter_ring()
        _, grad = eval_solution(space, c, pts, g)
        h = 1e-6
        # physical gradient from parameter differences: grad = J^{-T} d/dt
        dt = np.stack([(eval_solution(space, c, pts + e)[0] - eval_solution(space, c, pts - e)[0]) / (2 * h)
                       for e in (np.array([h, 0]), np.array([0, h]))], 1)
        _, jac, _ = g.eval(pts)
        want = np.linalg.solve(np.transpose(jac, (0, 2, 1)), dt[..., None])[..., 0]
        nptest.assert_allclose(grad, want, atol=1e-5)

    def test_outside(self):
        space = DiscreteSpace(HierarchicalMesh.initial(1, 1))
        with pytest.raises(DomainError):
            eval_solution(space, np.zeros(1), [[-0.1, 0.5]])


class TestAssembly:
    def test_single_hat(self):
        disc = run(HierarchicalMesh.initial(1, 1))
        A, _ = assemble(disc.space, disc.data)
        assert A.shape == (1, 1)
        assert A[0, 0] == pytest.approx(8 / 3, abs=1e-13)

    def test_symmetric(self):
        disc = run(corner_mesh(2, 1, 3), "quarter-ring")
        A, _ = assemble(disc.space, disc.data)
        assert abs(A - A.T).max() == 0.0

    def test_positive_definite(self):
        disc = run(corner_mesh(2, 2, 2), "quarter-ring")
        A, _ = assemble(disc.space, disc.data)
        assert np.linalg.eigvalsh(A.toarray()).min() > 0

    def test_constant_in_kernel(self):
        disc = run(HierarchicalMesh.uniform(2, 1, 1), "quarter-ring")
        space = DiscreteSpace(disc.mesh, boundary=False)
        A, _ = assemble(space, disc.data)
        nptest.assert_allclose(A @ np.ones(space.n_dofs), 0.0, atol=1e-12)

    def test_empty_space(self):
        mesh = HierarchicalMesh.initial(1, 1, n0=1)
        disc_space = DiscreteSpace(mesh)
        with pytest.raises(AssemblyError):
            assemble(disc_space, None)

    def test_dense_oracle(self):
        """Stiffness and load against dense quadrature of every basis pair."""
        disc = run(refine(HierarchicalMesh.initial(2, 1), [HierElement(0, 1, 1)]), "quarter-ring")
        A, b = assemble(disc.space, disc.data)
        d = disc.data
        n = disc.space.n_dofs
        grads = np.stack([eval_solution(disc.space, np.eye(n)[k], d.overlay.points, disc.geometry)[1] for k in range(n)])
        vals = np.stack([eval_solution(disc.space, np.eye(n)[k], d.overlay.points)[0] for k in range(n)])
        wd = d.weights * d.det
        dense = np.einsum("ipc,jpc,p->ij", grads, grads, wd)
        nptest.assert_allclose(A.toarray(), dense, atol=1e-12)
        nptest.assert_allclose(b, vals @ (d.weights * d.fd), atol=1e-12)


class TestSolve:
    def test_scalar(self):
        assert solve(sp.csr_matrix([[4.0]]), np.array([2.0]))[0] == 0.5

    def test_random_spd(self):
        rng = np.random.default_rng(0)
        M = rng.standard_normal((50, 50))
        A = M @ M.T + 50 * np.eye(50)
        b = rng.standard_normal(50)
        nptest.assert_allclose(solve(sp.csr_matrix(A), b), np.linalg.solve(A, b), rtol=1e-12, atol=1e-12)

    def test_singular(self):
        with pytest.raises(NumericalError):
            solve(sp.csr_matrix(np.zeros((2, 2))), np.ones(2))


class TestSolution:
    def test_galerkin_orthogonality(self):
        disc = run(corner_mesh(2, 1, 2), "quarter-ring", ptilde=4)
        d = disc.data
        rng = np.random.default_rng(4)
        err_grad = d.problem.grad(d.x) - disc.solution.grad
        scale = np.sqrt(np.sum(d.weights * d.det * np.sum(d.problem.grad(d.x) ** 2, 1)))
        for _ in range(5):
            _, gv = eval_solution(disc.space, rng.standard_normal(disc.space.n_dofs), d.overlay.points, disc.geometry)
            inner = np.sum(d.weights * d.det * np.sum(err_grad * gv, 1))
            gnorm = np.sqrt(np.sum(d.weights * d.det * np.sum(gv**2, 1)))
            assert abs(inner) <= 1e-6 * scale * gnorm

    def test_partition_of_unity_test_functions(self):
        """<grad u_h, grad psi_a> = <f, psi_a> for interior PU functions."""
        mesh = corner_mesh(2, 1, 2)
        disc = run(mesh, "quarter-ring")
        d = disc.data
        pbar = disc.pbar
        pu_space = DiscreteSpace(mesh, boundary=True, degree=pbar, mult=1)
        for w in disc.pu:
            k = pu_space.lookup(w.level, [w.jx], [w.jy])[0]
            if k < 0:
                continue
            c = np.zeros(pu_space.n_dofs)
            c[k] = w.coef
            v, gv = eval_solution(pu_space, c, d.overlay.points, disc.geometry)
            lhs = np.sum(d.weights * d.det * np.sum(disc.solution.grad * gv, 1))
            rhs = np.sum(d.weights * d.fd * v)
            assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9 * np.abs(rhs) + 1e-12)

    def test_energy_identity(self):
        disc = run(HierarchicalMesh.uniform(2, 1, 2), "quarter-ring", ptilde=4)
        d = disc.data
        wd = d.weights * d.det
        gu = d.problem.grad(d.x)
        gh = disc.solution.grad
        e = exact_error(disc.solution)
        lhs = np.sum(wd * np.sum(gu**2, 1))
        rhs = np.sum(wd * np.sum(gh**2, 1)) + e**2
        assert lhs == pytest.approx(rhs, rel=1e-8)

    def test_zero_problem(self):
        mesh = HierarchicalMesh.initial(2, 1)
        disc = discretize(mesh, square(), manufactured("zero"), 3)
        assert exact_error(disc.solution) == 0.0
        assert np.all(disc.solution.coeffs == 0.0)

    def test_refinement_does_not_increase_error(self):
        mesh = HierarchicalMesh.initial(2, 1)
        errs = []
        for _ in range(3):
            errs.append(exact_error(run(mesh, "quarter-ring").solution))
            mesh = refine(mesh, [e for e in mesh.elements if e.i == 0])
        assert all(b <= a for a, b in zip(errs, errs[1:]))

    def test_uniform_rate_p2_ring(self):
        """Energy error decays like N^{-1} for p = 2 (slope over the last three meshes)."""
        ns, errs = [], []
        for lev in range(1, 6):
            disc = run(HierarchicalMesh.uniform(2, 1, lev), "quarter-ring")
            ns.append(disc.space.n_dofs)
            errs.append(exact_error(disc.solution))
        slope = np.polyfit(np.log(ns[-3:]), np.log(errs[-3:]), 1)[0]
        assert slope == pytest.approx(-1.0, rel=0.1)
