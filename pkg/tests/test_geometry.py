import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aimrl.geometry import (
    AffinelyDependentError,
    GeometryError,
    HullKind,
    affine_rank,
    barycentric_coordinates,
    caratheodory_reduce,
    hull_status,
    is_affinely_independent,
    remove_one_vertex,
)

from oracles import in_affine_hull_lstsq, in_convex_hull_lp

TRIANGLE = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


class TestBarycentric:
    def test_interior_point(self):
        np.testing.assert_allclose(barycentric_coordinates(TRIANGLE, [0.25, 0.25]), [0.5, 0.25, 0.25], atol=1e-12)

    def test_vertex(self):
        for i, v in enumerate(TRIANGLE):
            np.testing.assert_allclose(barycentric_coordinates(TRIANGLE, v), np.eye(3)[i], atol=1e-12)

    def test_off_the_line(self):
        assert barycentric_coordinates(TRIANGLE[:2], [0.0, 1.0]) is None

    def test_dependent_vertices(self):
        with pytest.raises(AffinelyDependentError):
            barycentric_coordinates(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]), [0.5, 0.5])

    def test_rank(self):
        assert affine_rank(TRIANGLE) == 3
        assert not is_affinely_independent(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
        assert is_affinely_independent(np.array([[3.0, 4.0]]))


class TestHullStatus:
    def test_in_convex(self):
        status = hull_status(TRIANGLE, [0.25, 0.25])
        assert status.kind is HullKind.IN_CONVEX
        np.testing.assert_allclose(status.alpha, [0.5, 0.25, 0.25])

    def test_outside_convex(self):
        status = hull_status(TRIANGLE, [1.0, 1.0])
        assert status.kind is HullKind.IN_AFFINE_OUTSIDE_CONVEX
        np.testing.assert_allclose(status.alpha, [-1.0, 1.0, 1.0], atol=1e-12)

    def test_outside_affine(self):
        assert hull_status(TRIANGLE[:2], [0.5, 0.5]).kind is HullKind.OUTSIDE_AFFINE

    def test_clamped_coordinates_sum_to_one(self):
        status = hull_status(TRIANGLE, [1.0 + 1e-12, -1e-12])
        assert status.kind is HullKind.IN_CONVEX
        assert np.all(status.alpha >= 0) and status.alpha.sum() == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=300, deadline=None)
    @given(st.integers(2, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_agrees_with_lp_oracle(self, dim, k, seed):
        rng = np.random.default_rng(seed)
        k = min(k, dim + 1)
        points = rng.normal(size=(k, dim))
        if rng.random() < 0.5:
            x = rng.dirichlet(np.ones(k) * 0.7) @ points
            x = x + (rng.random() < 0.5) * rng.normal(scale=0.3, size=dim)
        else:
            x = rng.normal(size=dim)
        status = hull_status(points, x)
        near_boundary = status.alpha is not None and np.min(np.abs(status.alpha)) < 1e-7
        if not near_boundary:
            assert (status.kind is HullKind.IN_CONVEX) == in_convex_hull_lp(points, x)
        assert (status.kind is not HullKind.OUTSIDE_AFFINE) == in_affine_hull_lstsq(points, x, tol=1e-7)


class TestRemoveOneVertex:
    def test_worked_example(self):
        out = remove_one_vertex(TRIANGLE, [0.3, 0.3], [0.9, 0.3])
        assert out.theta == pytest.approx(2 / 3)
        np.testing.assert_allclose(out.point, [0.7, 0.3], atol=1e-12)
        np.testing.assert_array_equal(out.keep, [False, True, True])

    def test_target_on_facet(self):
        out = remove_one_vertex(TRIANGLE, [0.3, 0.3], [0.7, 0.3])
        assert out.theta == pytest.approx(1.0)
        np.testing.assert_allclose(out.point, [0.7, 0.3], atol=1e-12)
        np.testing.assert_array_equal(out.keep, [False, True, True])

    def test_inside_target_is_refused(self):
        with pytest.raises(GeometryError):
            remove_one_vertex(TRIANGLE, [0.3, 0.3], [0.25, 0.25])

    def test_ties_drop_the_lowest_index(self):
        # the segment leaves through the corner shared by two facets
        out = remove_one_vertex(TRIANGLE, [0.25, 0.25], [1.5, -0.5])
        assert out.keep.sum() <= 2
        assert not out.keep[2]

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 3), st.integers(0, 2**31 - 1))
    def test_output_on_facet(self, dim, seed):
        rng = np.random.default_rng(seed)
        points = rng.normal(size=(dim + 1, dim))
        x_prev = rng.dirichlet(np.ones(dim + 1)) @ points
        alpha_t = rng.normal(size=dim + 1)
        alpha_t[rng.integers(dim + 1)] = -abs(alpha_t[0]) - 0.1
        alpha_t = alpha_t / alpha_t.sum() if abs(alpha_t.sum()) > 0.2 else np.r_[-0.5, np.full(dim, 1.5 / dim)]
        if np.all(alpha_t > 0):
            return
        x_t = alpha_t @ points
        out = remove_one_vertex(points, x_prev, x_t)
        full = barycentric_coordinates(points, out.point)
        assert np.min(full) >= -1e-9
        assert np.sum(full <= 1e-9) >= 1
        assert 0.0 <= out.theta <= 1.0
        np.testing.assert_allclose(out.alpha @ points[out.keep], out.point, atol=1e-9)


class TestCaratheodory:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4), st.integers(2, 9), st.integers(0, 2**31 - 1))
    def test_reduction_keeps_the_point(self, dim, k, seed):
        rng = np.random.default_rng(seed)
        points = rng.normal(size=(k, dim))
        w = rng.dirichlet(np.ones(k))
        idx, w2 = caratheodory_reduce(points, w)
        assert len(idx) <= dim + 1
        assert is_affinely_independent(points[idx])
        assert np.all(w2 > 0) and w2.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(w2 @ points[idx], w @ points, atol=1e-9)

    def test_duplicates_collapse(self):
        points = np.array([[1.0, 2.0], [1.0, 2.0], [3.0, 0.0]])
        idx, w = caratheodory_reduce(points, [0.25, 0.25, 0.5])
        np.testing.assert_allclose(w @ points[idx], [2.0, 1.0])
        assert len(idx) == 2
