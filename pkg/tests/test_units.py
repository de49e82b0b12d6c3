import sys
from pathlib import Path

src = str((Path(__file__).parent / "../src").resolve())
sys.path.insert(0, src)

from math import cos, isclose, log, pi, sqrt
from unittest import TestCase

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from pytest import raises

from multigrasp import functions as fun
from multigrasp.classes import (
    AxisRect,
    CyclicSupport,
    DanglingSupport,
    DuplicateId,
    NonFinite,
    NotARectangle,
    OrientedRect,
    OrphanGrasp,
    SceneAnnotation,
    SceneGrasp,
    SceneObject,
    find_cycle,
)
from multigrasp.geometry import aabb, angle_difference, axis_iou, rect_from_vertices, rotated_iou, vertices
from multigrasp.selftest import monte_carlo_iou

angles = st.floats(min_value=-100, max_value=100, allow_nan=False)
extents = st.floats(min_value=0.5, max_value=200)
coords = st.floats(min_value=-500, max_value=500)
rects = st.builds(OrientedRect, coords, coords, extents, extents, st.floats(min_value=0, max_value=3.14))


class Test_Functions(TestCase):
    @given(angles)
    def test_normalize_angle(self, theta):
        t = fun.normalize_angle(theta)
        assert 0 <= t < pi
        assert isclose(cos(2 * (t - theta)), 1, abs_tol=1e-9)

    @given(angles)
    def test_wrap_angle(self, delta):
        w = fun.wrap_angle(delta)
        assert -pi / 2 - 1e-12 < w <= pi / 2 + 1e-12
        assert isclose(cos(2 * (w - delta)), 1, abs_tol=1e-9)

    @given(st.floats(min_value=-10, max_value=10))
    def test_logit_inverts_sigmoid(self, t):
        assert isclose(fun.logit(fun.sigmoid(t)), t, abs_tol=1e-6)

    @given(st.floats(min_value=-500, max_value=500))
    def test_softplus_identity(self, t):
        assert isclose(fun.softplus(t) - fun.softplus(-t), t, abs_tol=1e-9)

    def test_sigmoid_extremes(self):
        assert fun.sigmoid(1000.0) == 1.0
        assert fun.sigmoid(-1000.0) >= 0.0
        assert fun.sigmoid(0.0) == 0.5

    def test_softmax_rows(self):
        p = fun.softmax(np.array([[1000.0, 0.0], [0.0, 0.0]]))
        assert np.allclose(p.sum(axis=1), 1.0)
        assert p[0, 0] == 1.0
        assert np.allclose(p[1], 0.5)

    @given(st.floats(min_value=1e-6, max_value=1))
    def test_focal_without_modulation_is_cross_entropy(self, p):
        assert isclose(fun.focal(0)(p), -log(p), abs_tol=1e-12)

    def test_focal(self):
        assert fun.focal(2)(1.0) == 0.0
        assert isclose(fun.focal(2)(0.5), 0.25 * log(2), rel_tol=1e-12)
        assert fun.focal(2)(0.0) > 0
        with raises(AssertionError):
            fun.focal(-1)

    def test_binary_focal(self):
        f = fun.binary_focal(2)
        assert isclose(f(0.5, True), f(0.5, False))
        assert f(1.0, True) < 1e-10
        assert f(0.0, False) < 1e-10

    def test_finite(self):
        assert fun.finite(1.0, np.zeros(3))
        assert not fun.finite(float("nan"))
        assert not fun.finite(1.0, np.array([0.0, np.inf]))


class Test_Rectangles(TestCase):
    def test_theta_is_normalized(self):
        assert OrientedRect(0, 0, 4, 2, pi).theta == 0.0
        assert isclose(OrientedRect(0, 0, 4, 2, -pi / 4).theta, 3 * pi / 4)

    def test_bad_rectangles(self):
        with raises(NotARectangle):
            OrientedRect(0, 0, 0, 2)
        with raises(NotARectangle):
            OrientedRect(0, 0, 2, -1)
        with raises(NonFinite):
            OrientedRect(float("nan"), 0, 2, 2)
        with raises(NotARectangle):
            AxisRect(2, 0, 1, 1)
        with raises(NonFinite):
            AxisRect(0, 0, float("inf"), 1)

    def test_axis_rect(self):
        b = AxisRect.from_center(5, 5, 4, 2)
        assert b.as_tuple() == (3.0, 4.0, 7.0, 6.0)
        assert (b.w, b.h, b.area, b.center) == (4.0, 2.0, 8.0, (5.0, 5.0))


def _same_points(a, b):
    key = lambda p: (round(p[0], 9), round(p[1], 9))
    return sorted(map(key, a)) == sorted(map(key, b))


class Test_Geometry(TestCase):
    def test_vertices_examples(self):
        assert _same_points(vertices(OrientedRect(0, 0, 4, 2, 0)), [(2, 1), (-2, 1), (-2, -1), (2, -1)])
        assert _same_points(vertices(OrientedRect(0, 0, 4, 2, pi / 2)), [(1, 2), (-1, 2), (-1, -2), (1, -2)])
        r2 = sqrt(2)
        assert _same_points(
            vertices(OrientedRect(1, 1, 2, 2, pi / 4)), [(1, 1 + r2), (1 - r2, 1), (1, 1 - r2), (1 + r2, 1)]
        )

    def test_rect_from_vertices(self):
        r = rect_from_vertices([(2, 1), (-2, 1), (-2, -1), (2, -1)])
        assert isclose(r.x, 0, abs_tol=1e-12) and isclose(r.y, 0, abs_tol=1e-12)
        assert isclose(r.w, 2) and isclose(r.h, 4)
        assert isclose(r.theta, pi / 2)

    def test_rect_from_vertices_errors(self):
        with raises(NotARectangle):
            rect_from_vertices([(0, 0), (4, 0), (4, 1), (0, 3)])
        with raises(NotARectangle):
            rect_from_vertices([(0, 0), (1, 0), (1, 1)])
        with raises(NonFinite):
            rect_from_vertices([(0, 0), (float("nan"), 0), (1, 1), (0, 1)])

    @given(rects)
    def test_vertex_round_trip(self, r):
        back = rect_from_vertices(vertices(r))
        for p, q in zip(back.as_tuple()[:4], r.as_tuple()[:4]):
            assert isclose(p, q, rel_tol=1e-9, abs_tol=1e-6)
        assert angle_difference(back.theta, r.theta) < 1e-6

    def test_aabb(self):
        assert aabb(OrientedRect(0, 0, 4, 2, 0)).as_tuple() == (-2.0, -1.0, 2.0, 1.0)
        box = aabb(OrientedRect(0, 0, 2, 2, pi / 4))
        assert all(isclose(v, s * sqrt(2)) for v, s in zip(box.as_tuple(), (-1, -1, 1, 1)))

    def test_axis_iou(self):
        a = AxisRect(0, 0, 2, 2)
        assert axis_iou(a, a) == 1.0
        assert axis_iou(a, AxisRect(3, 3, 4, 4)) == 0.0
        assert isclose(axis_iou(a, AxisRect(1, 1, 3, 3)), 1 / 7)

    def test_rotated_iou_examples(self):
        r = OrientedRect(0, 0, 4, 2, 0)
        assert rotated_iou(r, r) == 1.0
        assert isclose(rotated_iou(r, OrientedRect(0, 0, 4, 2, pi / 2)), 1 / 3)
        assert rotated_iou(r, OrientedRect(100, 100, 4, 2, 0.3)) == 0.0

    @given(rects, rects)
    @settings(max_examples=50, deadline=None)
    def test_rotated_iou_symmetric(self, a, b):
        iou = rotated_iou(a, b)
        assert 0 <= iou <= 1
        assert isclose(iou, rotated_iou(b, a), abs_tol=1e-9)

    @given(coords, coords, extents, extents, coords, coords, extents, extents)
    @settings(max_examples=50, deadline=None)
    def test_rotated_iou_agrees_on_axis_aligned(self, x1, y1, w1, h1, x2, y2, w2, h2):
        a, b = OrientedRect(x1, y1, w1, h1), OrientedRect(x2, y2, w2, h2)
        assert isclose(rotated_iou(a, b), axis_iou(aabb(a), aabb(b)), abs_tol=1e-9)

    def test_rotated_iou_against_sampling(self):
        pairs = [
            (OrientedRect(50, 50, 30, 12, 0.3), OrientedRect(55, 48, 25, 15, 1.1)),
            (OrientedRect(50, 50, 20, 20, 0.0), OrientedRect(52, 51, 20, 20, pi / 4)),
            (OrientedRect(50, 50, 40, 6, 2.0), OrientedRect(50, 50, 40, 6, 2.5)),
            (OrientedRect(50, 50, 10, 30, 0.7), OrientedRect(58, 44, 18, 9, 0.2)),
        ]
        for k, (a, b) in enumerate(pairs):
            assert abs(rotated_iou(a, b) - monte_carlo_iou(a, b, 10**6, seed=k)) < 0.01

    def test_angle_difference(self):
        assert isclose(angle_difference(0, pi / 2), pi / 2)
        assert angle_difference(0.1, pi + 0.1) < 1e-12
        assert isclose(angle_difference(0.1, pi - 0.1), 0.2)


def _obj(i, on=(), grasps=()):
    return SceneObject(i, i, f"class-{i}", AxisRect(0, 0, 10, 10), tuple(on), tuple(grasps))


class Test_Scenes(TestCase):
    def test_loose_grasps_are_attached(self):
        g = OrientedRect(5, 5, 4, 2)
        scene = SceneAnnotation(32, 32, (_obj(0), _obj(1, on=(0,))), (SceneGrasp(1, g),))
        assert scene.object(1).grasps == (g,)
        assert scene.object(0).grasps == ()
        assert scene.resting_on(0) == [1]

    def test_invalid_scenes(self):
        with raises(DuplicateId) as e:
            SceneAnnotation(32, 32, (_obj(0), _obj(0)))
        assert e.value.object_id == 0
        with raises(DanglingSupport):
            SceneAnnotation(32, 32, (_obj(0, on=(5,)),))
        with raises(CyclicSupport):
            SceneAnnotation(32, 32, (_obj(0, on=(1,)), _obj(1, on=(0,))))
        with raises(CyclicSupport):
            SceneAnnotation(32, 32, (_obj(0, on=(0,)),))
        with raises(OrphanGrasp):
            SceneAnnotation(32, 32, (_obj(0),), (SceneGrasp(3, OrientedRect(1, 1, 1, 1)),))

    def test_find_cycle(self):
        assert find_cycle({0: [1], 1: [2], 2: []}) is None
        assert find_cycle({0: [1], 1: [2], 2: [0]}) == [0, 1, 2]
        assert find_cycle({}) is None
