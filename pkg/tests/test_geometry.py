import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenplan.geometry import (
    BoxDims, Polygon, Polyline, Pose2, SceneMap, box_corners_batch, box_in_drivable,
    boxes_in_polygon_batch, boxes_intersect, boxes_overlap_batch, oriented_box_corners,
    project_batch, project_to_centerline, time_to_collision, wrap_angle,
)


def test_wrap_angle_range():
    a = np.linspace(-20, 20, 4001)
    w = wrap_angle(a)
    assert np.all(w > -math.pi) and np.all(w <= math.pi)
    assert np.allclose(np.cos(w), np.cos(a)) and np.allclose(np.sin(w), np.sin(a))
    assert wrap_angle(-math.pi) == math.pi
    assert Pose2(0, 0, 3 * math.pi).heading == pytest.approx(math.pi)


class TestCorners:
    def test_axis_aligned(self):
        c = oriented_box_corners(Pose2(0, 0, 0), BoxDims(4, 2))
        np.testing.assert_allclose(c, [[2, 1], [2, -1], [-2, -1], [-2, 1]])

    def test_quarter_turn(self):
        c = oriented_box_corners(Pose2(0, 0, math.pi / 2), BoxDims(4, 2))
        np.testing.assert_allclose(c, [[-1, 2], [1, 2], [1, -2], [-1, -2]], atol=1e-12)

    def test_square_symmetry(self):
        c = oriented_box_corners(Pose2(1, 1, math.pi / 4), BoxDims(2, 2))
        np.testing.assert_allclose(np.linalg.norm(c - [1, 1], axis=1), math.sqrt(2))
        np.testing.assert_allclose(c.mean(axis=0), [1, 1])

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            BoxDims(0, 1)


def _sample_boundary(corners, n=200):
    t = np.linspace(0.0, 1.0, n, endpoint=False)[:, None]
    return np.concatenate([corners[i] + t * (corners[(i + 1) % 4] - corners[i]) for i in range(4)])


def _inside_box(pts, pose, dims, tol=1e-9):
    c, s = math.cos(pose[2]), math.sin(pose[2])
    d = pts - pose[:2]
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    return (np.abs(lx) <= dims[0] / 2 + tol) & (np.abs(ly) <= dims[1] / 2 + tol)


def sampling_overlap_oracle(pa, da, pb, db):
    """Two rectangles overlap iff a boundary point of one lies in the other."""
    ca = box_corners_batch(pa, da)
    cb = box_corners_batch(pb, db)
    return bool(_inside_box(_sample_boundary(ca), pb, db).any() or _inside_box(_sample_boundary(cb), pa, da).any())


class TestBoxesIntersect:
    def test_self(self):
        a = (Pose2(3, -1, 0.4), BoxDims(4.5, 2))
        assert boxes_intersect(a, a)

    def test_disjoint(self):
        assert not boxes_intersect((Pose2(0, 0, 0), BoxDims(4, 2)), (Pose2(10, 0, 0), BoxDims(4, 2)))

    def test_near_contact(self):
        a = (Pose2(0, 0, 0), BoxDims(4, 2))
        b = (Pose2(3.9, 0, 0), BoxDims(4, 2))
        expected = sampling_overlap_oracle(a[0].as_array(), np.array([4, 2.0]), b[0].as_array(), np.array([4, 2.0]))
        assert expected is True
        assert boxes_intersect(a, b) is expected

    def test_touching_counts(self):
        assert boxes_intersect((Pose2(0, 0, 0), BoxDims(4, 2)), (Pose2(4.0, 0, 0), BoxDims(4, 2)))
        assert not boxes_intersect((Pose2(0, 0, 0), BoxDims(4, 2)), (Pose2(4.001, 0, 0), BoxDims(4, 2)))

    def test_agrees_with_sampling_oracle(self):
        rng = np.random.default_rng(0)
        n = 10_000
        pa = np.c_[rng.uniform(-3, 3, (n, 2)), rng.uniform(-math.pi, math.pi, n)]
        pb = np.c_[rng.uniform(-3, 3, (n, 2)), rng.uniform(-math.pi, math.pi, n)]
        da = rng.uniform(0.5, 5, (n, 2))
        db = rng.uniform(0.5, 5, (n, 2))
        got = boxes_overlap_batch(box_corners_batch(pa, da), box_corners_batch(pb, db))
        want = np.array([sampling_overlap_oracle(pa[i], da[i], pb[i], db[i]) for i in range(n)])
        assert 0.2 < want.mean() < 0.95
        assert np.array_equal(got, want)

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-4, 4), st.floats(-4, 4), st.floats(-4, 4),
           st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0.1, 5))
    def test_symmetric(self, x, y, h1, h2, h3, l1, w1, l2, w2):
        a = (Pose2(0, 0, h1), BoxDims(l1, w1))
        b = (Pose2(x, y, h2 + h3), BoxDims(l2, w2))
        assert boxes_intersect(a, b) == boxes_intersect(b, a)


def ray_cast_inside(pt, ring):
    x, y = pt
    inside = False
    n = len(ring)
    for i in range(n):
        x1, y1 = ring[i]
        x2, y2 = ring[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xc:
                inside = not inside
    return inside


def _scene_map(poly):
    return SceneMap(poly, Polyline([[0, 0], [1, 0]]), 10.0)


class TestDrivable:
    square = Polygon.ccw([[-50, -50], [50, -50], [50, 50], [-50, 50]])

    def test_centered(self):
        assert box_in_drivable(Pose2(0, 0, 0.3), BoxDims(4.5, 2), _scene_map(self.square))

    def test_straddling(self):
        assert not box_in_drivable(Pose2(49, 0, 0), BoxDims(4.5, 2), _scene_map(self.square))

    def test_rejects_bad_polygons(self):
        with pytest.raises(ValueError):
            Polygon([[0, 0], [0, 1], [1, 1], [1, 0]])  # clockwise
        with pytest.raises(ValueError):
            Polygon([[0, 0], [1, 1], [1, 0], [0, 1]])  # bow-tie
        with pytest.raises(ValueError):
            Polygon([[0, 0], [1, 1]])

    def test_hole(self):
        poly = Polygon.ccw([[-50, -50], [50, -50], [50, 50], [-50, 50]],
                           holes=[[[-5, -5], [-5, 5], [5, 5], [5, -5]]])
        m = _scene_map(poly)
        assert not box_in_drivable(Pose2(0, 0, 0), BoxDims(2, 1), m)
        assert not box_in_drivable(Pose2(5.5, 0, 0), BoxDims(2, 1), m)
        assert box_in_drivable(Pose2(20, 0, 0), BoxDims(2, 1), m)

    def test_random_boxes_vs_ray_cast(self):
        # concave L-shape with a square hole
        outer = np.array([[0, 0], [40, 0], [40, 15], [15, 15], [15, 40], [0, 40]], float)
        hole = np.array([[5, 5], [5, 10], [10, 10], [10, 5]], float)
        poly = Polygon(outer, (hole,))
        rng = np.random.default_rng(1)
        n = 1000
        poses = np.c_[rng.uniform(-5, 45, (n, 2)), rng.uniform(-math.pi, math.pi, n)]
        dims = np.c_[rng.uniform(1, 5, n), rng.uniform(0.5, 2.5, n)]
        got = boxes_in_polygon_batch(poses, dims, poly)
        corners = box_corners_batch(poses, dims)
        want = np.array([all(ray_cast_inside(c, outer) and not ray_cast_inside(c, hole) for c in cs)
                         for cs in corners])
        assert 0.1 < want.mean() < 0.9
        assert np.array_equal(got, want)
        scalar = [box_in_drivable(Pose2(*poses[i]), BoxDims(*dims[i]), _scene_map(poly)) for i in range(50)]
        assert scalar == list(got[:50])


class TestProjection:
    def test_midpoint(self):
        s, d = project_to_centerline([5, 0], Polyline([[0, 0], [10, 0]]))
        assert s == pytest.approx(5) and d == pytest.approx(0)

    def test_left_positive(self):
        s, d = project_to_centerline([1, 2], Polyline([[0, 0], [10, 0]]))
        assert (s, d) == pytest.approx((1, 2))
        s, d = project_to_centerline([1, -2], Polyline([[0, 0], [10, 0]]))
        assert (s, d) == pytest.approx((1, -2))

    def test_clamped_to_range(self):
        line = Polyline([[0, 0], [10, 0], [10, 10]])
        s, _ = project_to_centerline([-5, 1], line)
        assert s == 0
        s, _ = project_to_centerline([10, 25], line)
        assert s == pytest.approx(20)

    def test_dense_sampling_oracle(self):
        rng = np.random.default_rng(2)
        v = np.cumsum(rng.uniform(1, 6, (8, 2)) * [1, 0.6] - [0, 1.5], axis=0)
        line = Polyline(v)
        dense_s = np.linspace(0, line.length, 200_001)
        cum = line.cumulative_arclength
        i = np.clip(np.searchsorted(cum, dense_s, side="right") - 1, 0, len(cum) - 2)
        seg = line.vertices[i + 1] - line.vertices[i]
        dense = line.vertices[i] + seg * ((dense_s - cum[i]) / (cum[i + 1] - cum[i]))[:, None]
        pts = rng.uniform(v.min(0) - 3, v.max(0) + 3, (200, 2))
        s, _ = project_batch(pts, line)
        for p, si in zip(pts, s):
            dist = np.linalg.norm(dense - p, axis=1)
            best = dist.min()
            # nearest dense sample(s); ties toward smaller s
            s_oracle = dense_s[np.flatnonzero(dist <= best + 1e-9)[0]]
            assert abs(si - s_oracle) < 1e-3

    @given(st.floats(-30, 30), st.floats(-30, 30), st.floats(-3, 3), st.floats(1, 40))
    def test_reconstruction_straight(self, px, py, ang, length):
        a = np.array([1.0, -2.0])
        b = a + length * np.array([math.cos(ang), math.sin(ang)])
        line = Polyline([a, b, b + (b - a)])
        s, d = project_to_centerline([px, py], line)
        if 1e-9 < s < line.length - 1e-9:
            np.testing.assert_allclose(line.point_at(s, d), [px, py], atol=1e-6)


class TestTTC:
    car = BoxDims(4, 2)

    def test_head_on(self):
        # bumper-to-bumper gap 20 m, closing at 10 m/s
        ego = (Pose2(0, 0, 0), self.car, (5.0, 0.0))
        other = (Pose2(24, 0, math.pi), self.car, (-5.0, 0.0))
        ttc = time_to_collision(ego, [other], t_max=5.0, dt_sub=0.1)
        analytic = 20.0 / 10.0
        assert abs(ttc - analytic) <= 0.1 + 1e-9

    def test_parallel(self):
        ego = (Pose2(0, 0, 0), self.car, (10.0, 0.0))
        other = (Pose2(0, 3.5, 0), self.car, (12.0, 0.0))
        assert time_to_collision(ego, [other]) == math.inf
        assert time_to_collision(ego, []) == math.inf

    def test_overlapping(self):
        ego = (Pose2(0, 0, 0), self.car, (1.0, 0.0))
        assert time_to_collision(ego, [(Pose2(1, 0, 0), self.car, (0.0, 0.0))]) == 0.0

    @settings(max_examples=50)
    @given(st.floats(6, 40), st.floats(0.5, 20), st.floats(0.1, 10))
    def test_monotone_in_closing_speed(self, gap, v, dv):
        ego_slow = (Pose2(0, 0, 0), self.car, (v, 0.0))
        ego_fast = (Pose2(0, 0, 0), self.car, (v + dv, 0.0))
        lead = [(Pose2(gap, 0.3, 0), self.car, (0.0, 0.0))]
        assert time_to_collision(ego_fast, lead, 5.0) <= time_to_collision(ego_slow, lead, 5.0)
