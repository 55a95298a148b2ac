"""Tests for the NURBS maps, Piola transforms and sampled geometry constants."""

from __future__ import annotations

import math

import numpy as np
import numpy.testing as nptest
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iga_eq.errors import DomainError, GeometryError
from iga_eq.geometry import (
    GeometryMap,
    by_name,
    eval_map,
    geometry_constants,
    piola_scalar,
    piola_scalar_inverse,
    piola_vector,
    quarter_ring,
    scaling,
    square,
)

W = math.sqrt(2.0) / 2.0


def ring_closed_form(s, t):
    """Rational quadratic quarter circle scaled by the radius 1 - t/2."""
    den = (1 - s) ** 2 + 2 * W * s * (1 - s) + s**2
    x = ((1 - s) ** 2 + 2 * W * s * (1 - s)) / den
    y = (2 * W * s * (1 - s) + s**2) / den
    r = 1 - t / 2
    return np.stack([r * x, r * y], axis=-1)


def fd_jacobian(fun, pts, h=1e-6):
    cols = []
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        lo = np.clip(pts - e, 0, 1)
        hi = np.clip(pts + e, 0, 1)
        cols.append((fun(hi) - fun(lo)) / (hi[:, k] - lo[:, k])[:, None])
    return np.stack(cols, axis=-1)


class TestMaps:
    def test_identity(self):
        pts = np.random.default_rng(0).random((20, 2))
        x, jac, det = eval_map(square(), pts)
        nptest.assert_allclose(x, pts, atol=1e-15)
        nptest.assert_allclose(jac, np.broadcast_to(np.eye(2), jac.shape), atol=1e-15)
        nptest.assert_allclose(det, 1.0)

    def test_ring_corners(self):
        x, _, _ = quarter_ring().eval([[0, 0], [1, 0], [1, 1], [0, 1]])
        nptest.assert_allclose(x, [[1, 0], [0, 1], [0, 0.5], [0.5, 0]], atol=1e-15)

    def test_ring_radius_and_closed_form(self):
        pts = np.random.default_rng(1).random((100, 2))
        x, _, _ = quarter_ring().eval(pts)
        nptest.assert_allclose(np.sum(x**2, axis=1), (1 - pts[:, 1] / 2) ** 2, atol=1e-12)
        nptest.assert_allclose(x, ring_closed_form(pts[:, 0], pts[:, 1]), atol=1e-14)

    def test_ring_angle(self):
        """The angle is monotone and symmetric; it matches s*pi/2 at s = 0, 1/2, 1 only."""
        s = np.linspace(0, 1, 201)
        x, _, _ = quarter_ring().eval(np.column_stack([s, np.zeros_like(s)]))
        phi = np.arctan2(x[:, 1], x[:, 0])
        assert np.all(np.diff(phi) > 0)
        nptest.assert_allclose(phi + phi[::-1], np.pi / 2, atol=1e-14)
        nptest.assert_allclose(phi[[0, 100, 200]], [0, np.pi / 4, np.pi / 2], atol=1e-14)

    def test_positive_determinant(self):
        g = np.linspace(0, 1, 64)
        pts = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
        _, _, det = quarter_ring().eval(pts)
        assert det.min() > 0

    @pytest.mark.parametrize("name", ["square", "quarter-ring"])
    def test_jacobian_against_differences(self, name):
        g = by_name(name)
        pts = np.random.default_rng(2).uniform(0.01, 0.99, (50, 2))
        _, jac, det = g.eval(pts)
        fd = fd_jacobian(lambda q: g.eval(q)[0], pts)
        nptest.assert_allclose(jac, fd, atol=1e-7)
        nptest.assert_allclose(det, np.linalg.det(jac), atol=1e-14)

    def test_inverse(self):
        g = quarter_ring()
        pts = np.random.default_rng(3).random((100, 2))
        x, _, _ = g.eval(pts)
        nptest.assert_allclose(g.inverse(x), pts, atol=1e-10)

    def test_outside_parameter_domain(self):
        with pytest.raises(DomainError):
            square().eval([[1.2, 0.5]])

    def test_unknown_name(self):
        with pytest.raises(DomainError):
            by_name("torus")

    def test_bad_weights(self):
        g = square()
        with pytest.raises(GeometryError, match="positive"):
            GeometryMap(g.knots, g.control, -np.ones((2, 2)))

    def test_folded_map_rejected(self):
        g = square()
        ctrl = g.control.copy()
        ctrl[1, 1] = [-1.0, -1.0]
        folded = GeometryMap(g.knots, ctrl, g.weights)
        with pytest.raises(GeometryError):
            folded.eval([[0.9, 0.9]])

    def test_affine_detection(self):
        assert square().constant_jacobian is not None
        nptest.assert_allclose(scaling(2).constant_jacobian, 2 * np.eye(2))
        assert quarter_ring().constant_jacobian is None


class TestPiola:
    def test_identity(self):
        w = np.random.default_rng(0).standard_normal((10, 2))
        pts = np.random.default_rng(1).random((10, 2))
        nptest.assert_allclose(piola_vector(square(), w, pts), w)
        nptest.assert_allclose(piola_scalar(square(), w[:, 0], pts), w[:, 0])

    def test_scaling(self):
        pts = np.random.default_rng(1).random((10, 2))
        w = np.random.default_rng(0).standard_normal((10, 2))
        nptest.assert_allclose(piola_vector(scaling(2), w, pts), w / 2)
        nptest.assert_allclose(piola_scalar(scaling(2), np.ones(10), pts), 0.25)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        pts, q = rng.random((30, 2)), rng.standard_normal(30)
        back = piola_scalar_inverse(quarter_ring(), piola_scalar(quarter_ring(), q, pts), pts)
        nptest.assert_allclose(back, q, rtol=1e-13, atol=1e-15)

    @settings(max_examples=10, deadline=None)
    @given(coef=st.lists(st.floats(-2, 2), min_size=12, max_size=12))
    def test_divergence_identity(self, coef):
        """div_x of the Piola field equals the scalar Piola image of the parameter divergence."""
        a = np.array(coef).reshape(2, 6)
        g = quarter_ring()

        def w_hat(p):
            s, t = p[:, 0], p[:, 1]
            mon = np.stack([np.ones_like(s), s, t, s * t, s * s, t * t], -1)
            return mon @ a.T

        def div_hat(p):
            s, t = p[:, 0], p[:, 1]
            return a[0, 1] + a[0, 3] * t + 2 * a[0, 4] * s + a[1, 2] + a[1, 3] * s + 2 * a[1, 5] * t

        pts = np.random.default_rng(len(coef)).uniform(0.05, 0.95, (100, 2))
        _, jac, _ = g.eval(pts)
        dv = fd_jacobian(lambda q: piola_vector(g, w_hat(q), q), pts, h=1e-6)
        div_x = np.einsum("nab,nba->n", dv, np.linalg.inv(jac))
        nptest.assert_allclose(div_x, piola_scalar(g, div_hat(pts), pts), atol=1e-5 * (1 + np.abs(a).max()))


class TestConstants:
    def test_square(self):
        c = geometry_constants(square())
        assert c.c_rel == pytest.approx(1.0)
        assert c.c_f == pytest.approx(1.0)

    def test_scaling(self):
        c = geometry_constants(scaling(2))
        assert c.c_rel == pytest.approx(2.0)
        assert c.c_f == pytest.approx(1.0)

    def test_ring_regression(self):
        """Frozen from a 256x256 finite-difference oracle on the closed-form map."""
        c = geometry_constants(quarter_ring(), 256)
        assert c.sup_jac == pytest.approx(4 * (math.sqrt(2) - 1), rel=1e-12)
        assert c.sup_det == pytest.approx(2 * (math.sqrt(2) - 1), rel=1e-12)
        assert c.sup_det_inv == pytest.approx(2 * math.sqrt(2), rel=1e-12)
        assert c.sup_jac_inv == pytest.approx(2.0, rel=1e-12)
        assert c.c_rel == pytest.approx(2.5362026844977, rel=1e-12)
        assert c.c_f == pytest.approx(2.3431457505076, rel=1e-12)

        s = np.linspace(0, 1, 257)
        pts = np.stack(np.meshgrid(s, s, indexing="ij"), -1).reshape(-1, 2)
        jac = fd_jacobian(lambda q: ring_closed_form(q[:, 0], q[:, 1]), pts)
        sv = np.linalg.svd(jac, compute_uv=False)
        det = np.linalg.det(jac)
        assert c.sup_jac == pytest.approx(sv[:, 0].max(), rel=1e-8)
        assert c.sup_det == pytest.approx(det.max(), rel=1e-8)
        assert c.sup_det_inv == pytest.approx((1 / det).max(), rel=1e-6)

    def test_extra_points(self):
        base = geometry_constants(quarter_ring(), 4)
        more = geometry_constants(quarter_ring(), 4, extra_points=[[0.5, 0.0]])
        assert more.sup_jac >= base.sup_jac
