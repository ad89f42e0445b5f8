import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from copo.env import geometry as geo


def brute_neighbors(points, radius):
    out = []
    for i, p in enumerate(points):
        d2 = np.sum((points - p) ** 2, axis=1)
        out.append(np.array([j for j in range(len(points)) if j != i and d2[j] <= radius * radius], dtype=int))
    return out


class TestBoxes:
    def test_corners_axis_aligned(self):
        c = geo.box_corners(1.0, 2.0, 0.0, 4.0, 2.0)
        np.testing.assert_allclose(c, [[3, 3], [-1, 3], [-1, 1], [3, 1]])

    def test_overlap_and_separation(self):
        a = geo.box_corners(0, 0, 0, 4, 2)
        assert geo.boxes_overlap(a, geo.box_corners(3, 0, 0.3, 4, 2))
        assert not geo.boxes_overlap(a, geo.box_corners(5, 0, 0, 4, 2))
        # rotated box clear of the corner along a diagonal axis
        assert not geo.boxes_overlap(a, geo.box_corners(3.6, 2.6, math.pi / 4, 2, 1))

    def test_touching_counts_as_overlap(self):
        a = geo.box_corners(0, 0, 0, 4, 2)
        assert geo.boxes_overlap(a, geo.box_corners(4, 0, 0, 4, 2))

    @given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-3.2, 3.2), st.floats(-3.2, 3.2))
    @settings(max_examples=200, deadline=None)
    def test_overlap_symmetric(self, x, y, h1, h2):
        a = geo.box_corners(0, 0, h1, 4.5, 2)
        b = geo.box_corners(x, y, h2, 4.5, 2)
        assert geo.boxes_overlap(a, b) == geo.boxes_overlap(b, a)


class TestRays:
    def test_ray_hits_box_front_face(self):
        box = geo.box_corners(10, 0, 0, 4, 2)
        a, b = geo.box_edges(box)
        d = geo.ray_segment_hits(np.zeros(2), np.array([[1.0, 0.0], [0.0, 1.0]]), a, b, 40.0)
        np.testing.assert_allclose(d, [8.0, 40.0])

    def test_slab_matches_segments(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            box = geo.box_corners(*rng.uniform(-10, 10, 2), rng.uniform(-3, 3), 4.5, 2.0)
            ang = rng.uniform(-np.pi, np.pi)
            d = np.array([math.cos(ang), math.sin(ang)])
            origin = rng.uniform(-20, 20, 2)
            if geo.boxes_overlap(geo.box_corners(*origin, 0, 1e-6, 1e-6), box):
                continue
            a, b = geo.box_edges(box)
            seg = geo.ray_segment_hits(origin, d[None], a, b, 1e9)[0]
            slab = geo.ray_box_distance(origin, d, box)
            if np.isinf(slab):
                assert seg == 1e9
            else:
                assert seg == pytest.approx(slab, abs=1e-9)


class TestPolyline:
    def test_projection_signed_lateral(self):
        line = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]])
        s, lat, dist, k = geo.project_to_polyline(np.array([4.0, 1.0]), line)
        assert (s, lat, dist, k) == (4.0, 1.0, 1.0, 0)
        s, lat, _, k = geo.project_to_polyline(np.array([11.0, 5.0]), line)
        assert s == pytest.approx(15.0) and lat == pytest.approx(-1.0) and k == 1

    def test_point_at_arclength(self):
        line = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]])
        cum = geo.polyline_arclength(line)
        p, h = geo.polyline_point(line, cum, 12.0)
        np.testing.assert_allclose(p, [10.0, 2.0])
        assert h == pytest.approx(math.pi / 2)

    def test_wrap_angle_range(self):
        a = np.linspace(-20, 20, 101)
        w = geo.wrap_angle(a)
        assert np.all(w >= -np.pi) and np.all(w < np.pi)
        np.testing.assert_allclose(np.cos(w), np.cos(a), atol=1e-12)


class TestNeighbors:
    def test_worked_example(self):
        pts = np.array([[0.0, 0.0], [5.0, 0.0], [20.0, 0.0]])
        n = geo.radius_neighbors(pts, 10.0)
        assert [x.tolist() for x in n] == [[1], [0], []]

    def test_boundary_inclusive(self):
        n = geo.radius_neighbors(np.array([[0.0, 0.0], [10.0, 0.0]]), 10.0)
        assert n[0].tolist() == [1]

    def test_infinite_radius_is_everyone_else(self):
        pts = np.random.default_rng(0).uniform(-500, 500, (7, 2))
        n = geo.radius_neighbors(pts, math.inf)
        for i, row in enumerate(n):
            assert row.tolist() == [j for j in range(7) if j != i]

    @given(st.integers(0, 60), st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_matches_brute_force_and_symmetric(self, k, seed):
        pts = np.random.default_rng(seed).uniform(-40, 40, (k, 2))
        fast = geo.radius_neighbors(pts, 10.0)
        slow = brute_neighbors(pts, 10.0)
        assert [f.tolist() for f in fast] == [s.tolist() for s in slow]
        for i, row in enumerate(fast):
            for j in row:
                assert i in fast[j]

    def test_spatial_hash_pairs_cover_overlaps(self):
        rng = np.random.default_rng(1)
        grid = geo.SpatialHash(10.0)
        boxes = {}
        for i in range(40):
            c = geo.box_corners(*rng.uniform(0, 60, 2), rng.uniform(-3, 3), 4.5, 2.0)
            boxes[i] = c
            lo, hi = c.min(axis=0), c.max(axis=0)
            grid.insert_extent(i, lo[0], lo[1], hi[0], hi[1])
        pairs = {tuple(sorted(p)) for p in grid.candidate_pairs()}
        for i in boxes:
            for j in boxes:
                if i < j and geo.boxes_overlap(boxes[i], boxes[j]):
                    assert (i, j) in pairs
