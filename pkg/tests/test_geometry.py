import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_star_polygon, square
from reassemble.errors import (
    DegeneratePolygon,
    EmptyContour,
    EmptyMask,
    KTooLarge,
    MultipleComponents,
    NonUnitRotation,
    TooFewPoints,
)
from reassemble.geometry import (
    Contour,
    RigidTransform2D,
    apply_transform,
    convex_clip_intersection_area,
    curvature_at,
    edge_angle_at,
    extract_contour,
    farthest_point_sampling,
    harris_keypoints,
    harris_response,
    polygon_area,
    polygon_intersection_area,
    polygon_perimeter,
    signed_area,
)


def brute_force_fps(points, k, seed):
    """Recompute every min-distance from scratch at each greedy step."""
    pts = [tuple(map(float, p)) for p in points]
    chosen = [seed]
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i, p in enumerate(pts):
            if i in chosen:
                continue
            d = min(math.dist(p, pts[j]) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return sorted(chosen)


def hand_traced_square_boundary(n):
    """Boundary pixels of an n x n block, walked around the rim."""
    ring = []
    for c in range(n):
        ring.append((c, 0))
    for r in range(1, n):
        ring.append((n - 1, r))
    for c in range(n - 2, -1, -1):
        ring.append((c, n - 1))
    for r in range(n - 2, 0, -1):
        ring.append((0, r))
    return ring


class TestExtractContour:
    def test_square_ring_matches_hand_trace(self):
        c = extract_contour(np.ones((10, 10), dtype=bool))
        assert len(c) == 36
        assert set(map(tuple, c.points.astype(int))) == set(hand_traced_square_boundary(10))
        assert signed_area(c.points) > 0

    def test_consecutive_points_are_neighbours(self):
        mask = np.zeros((30, 30), bool)
        yy, xx = np.mgrid[:30, :30]
        mask[(xx - 14) ** 2 + (yy - 15) ** 2 < 100] = True
        mask[5:10, 14:25] = True
        c = extract_contour(mask)
        step = np.abs(np.diff(np.vstack([c.points, c.points[:1]]), axis=0)).max(axis=1)
        assert np.all(step == 1)

    def test_empty(self):
        with pytest.raises(EmptyMask):
            extract_contour(np.zeros((5, 5)))

    def test_single_pixel(self):
        m = np.zeros((5, 5))
        m[2, 2] = 1
        with pytest.raises(EmptyMask):
            extract_contour(m)

    def test_two_components(self):
        m = np.zeros((10, 10))
        m[0:4, 0:4] = 1
        m[6:10, 6:10] = 1
        with pytest.raises(MultipleComponents):
            extract_contour(m)

    def test_holes_ignored(self):
        m = np.ones((12, 12))
        m[4:8, 4:8] = 0
        assert len(extract_contour(m)) == 44

    def test_json_round_trip(self):
        c = extract_contour(np.ones((5, 5)))
        assert np.array_equal(Contour.from_json(c.to_json()).points, c.points)


class TestHarris:
    def test_square_corners(self):
        img = np.zeros((64, 64))
        img[16:48, 16:48] = 1.0
        contour = extract_contour(img > 0)
        kps = harris_keypoints(img, contour, min_count=3)
        assert len(kps) == 4
        # oracle: argmax of the full response map in each quadrant
        resp = harris_response(img)
        for qy in (slice(0, 32), slice(32, 64)):
            for qx in (slice(0, 32), slice(32, 64)):
                sub = resp[qy, qx]
                r, c = np.unravel_index(sub.argmax(), sub.shape)
                peak = np.array([c + qx.start, r + qy.start])
                assert min(np.linalg.norm(k.position - peak) for k in kps) <= 2.0
        for k in kps:
            corner_d = min(np.linalg.norm(k.position - np.array(cc)) for cc in [(16, 16), (47, 16), (47, 47), (16, 47)])
            assert corner_d <= 2.0

    def test_sorted_by_contour_order_and_on_contour(self):
        img = np.zeros((40, 40))
        img[5:35, 5:15] = 1
        img[25:35, 5:35] = 1
        contour = extract_contour(img > 0)
        kps = harris_keypoints(img, contour, min_count=3)
        idx = [k.contour_index for k in kps]
        assert idx == sorted(idx)
        for k in kps:
            d = np.linalg.norm(contour.points - k.position, axis=1).min()
            assert d <= 0.5
            assert 0 <= k.edge_angle < 360 and np.isfinite(k.curvature)

    def test_disk_falls_back_to_uniform(self):
        yy, xx = np.mgrid[:64, :64]
        disk = (((xx - 31.5) ** 2 + (yy - 31.5) ** 2) < 400).astype(float)
        contour = extract_contour(disk > 0)
        kps = harris_keypoints(disk, contour, min_count=8)
        assert len(kps) == 8
        idx = np.array([k.contour_index for k in kps])
        gaps = np.diff(np.concatenate([idx, [idx[0] + len(contour)]]))
        assert gaps.max() - gaps.min() <= 2

    def test_blank(self):
        with pytest.raises(EmptyContour):
            harris_keypoints(np.zeros((8, 8)), None, 3)


def circle_contour(radius, n=None):
    n = n or max(int(2 * np.pi * radius), 16)
    a = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return Contour(np.column_stack([radius * np.cos(a), radius * np.sin(a)]))


class TestCurvature:
    @pytest.mark.parametrize("radius", [5, 20, 100])
    def test_circle(self, radius):
        c = circle_contour(radius)
        vals = [curvature_at(c, i, window=4) for i in range(len(c))]
        np.testing.assert_allclose(vals, 1.0 / radius, rtol=0.10)

    def test_straight_line(self):
        c = Contour(np.column_stack([np.arange(20.0), 2 * np.arange(20.0)]))
        assert abs(curvature_at(c, 10, window=4)) < 1e-6

    def test_corner_beats_mid_edge(self):
        c = Contour(square(n_per_side=8))
        corner = curvature_at(c, 0, window=1)
        mids = [curvature_at(c, i, window=1) for i in range(len(c)) if i % 8 != 0]
        assert np.isfinite(corner) and corner > 0
        assert corner > max(mids)
        # three points (0,1/8), (0,0), (1/8,0) lie on a circle of radius sqrt(2)/16
        assert corner == pytest.approx(16 / math.sqrt(2), rel=1e-9)


class TestEdgeAngle:
    @pytest.mark.parametrize(
        "pts,expected",
        [
            ([(0, 0), (1, 0), (2, 0), (1, 5)], 0.0),
            ([(0, 0), (0, 1), (0, 2), (-3, 1)], 90.0),
            ([(0, 0), (1, 1), (2, 2), (3, 0)], 45.0),
        ],
    )
    def test_directions(self, pts, expected):
        assert edge_angle_at(Contour(np.array(pts, float)), 1) == pytest.approx(expected, abs=1e-6)

    def test_range(self):
        c = circle_contour(10)
        vals = [edge_angle_at(c, i) for i in range(len(c))]
        assert min(vals) >= 0 and max(vals) < 360


class TestAreaPerimeter:
    def test_values(self):
        assert polygon_area(square()) == pytest.approx(1.0, abs=1e-9)
        assert polygon_area([(0, 0), (4, 0), (0, 3)]) == pytest.approx(6.0, abs=1e-9)
        assert polygon_area([(0, 0), (1, 1), (2, 2)]) == 0.0
        assert polygon_perimeter(square()) == pytest.approx(4.0, abs=1e-9)
        assert polygon_perimeter([(0, 0), (3, 0), (0, 4)]) == pytest.approx(12.0, abs=1e-9)

    def test_too_few(self):
        with pytest.raises(TooFewPoints):
            polygon_area([(0, 0), (1, 1)])
        with pytest.raises(TooFewPoints):
            polygon_perimeter([(0, 0), (1, 1)])

    def test_duplicate_point_rejected_by_contour(self):
        with pytest.raises(TooFewPoints):
            Contour(np.array([(0.0, 0.0), (1.0, 0.0)]))

    @settings(max_examples=60, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        shift=st.integers(0, 30),
        angle=st.floats(-360, 360),
        tx=st.floats(-100, 100),
        ty=st.floats(-100, 100),
    )
    def test_invariances(self, seed, shift, angle, tx, ty):
        poly = random_star_polygon(np.random.default_rng(seed), 31)
        a0, p0 = polygon_area(poly), polygon_perimeter(poly)
        assert polygon_area(np.roll(poly, shift, axis=0)) == pytest.approx(a0, rel=1e-9)
        moved = apply_transform(poly, RigidTransform2D.from_angle(angle, (tx, ty)))
        assert polygon_area(moved) == pytest.approx(a0, rel=1e-9)
        assert polygon_perimeter(moved) == pytest.approx(p0, rel=1e-9)


class TestFPS:
    def test_collinear_triple(self):
        assert farthest_point_sampling([(0, 0), (10, 0), (4, 0)], 2, 0).tolist() == [0, 1]

    def test_exhaustion_and_single(self, rng):
        pts = rng.normal(size=(9, 2))
        assert farthest_point_sampling(pts, 9, 3).tolist() == list(range(9))
        assert farthest_point_sampling(pts, 1, 5).tolist() == [5]

    def test_k_too_large(self):
        with pytest.raises(KTooLarge):
            farthest_point_sampling([(0, 0), (1, 0)], 3, 0)

    @settings(max_examples=80, deadline=None)
    @given(data=st.data())
    def test_matches_brute_force(self, data):
        n = data.draw(st.integers(1, 64))
        # integer grid coordinates make exact ties common
        coords = data.draw(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=n, max_size=n))
        k = data.draw(st.integers(1, n))
        seed = data.draw(st.integers(0, n - 1))
        got = farthest_point_sampling(np.array(coords, float), k, seed).tolist()
        assert got == brute_force_fps(coords, k, seed)


class TestTransform:
    def test_identity(self, rng):
        pts = rng.normal(size=(5, 2))
        np.testing.assert_array_equal(apply_transform(pts, RigidTransform2D()), pts)

    def test_quarter_turn(self):
        out = apply_transform([(1.0, 0.0)], RigidTransform2D(rotation=(0.0, 1.0)))
        np.testing.assert_allclose(out, [[0.0, 1.0]], atol=1e-9)

    def test_translate(self):
        out = apply_transform([(1.0, 0.0)], RigidTransform2D(translation=(3.0, 4.0)))
        np.testing.assert_allclose(out, [[4.0, 4.0]])

    def test_non_unit(self):
        with pytest.raises(NonUnitRotation):
            apply_transform([(1.0, 0.0)], RigidTransform2D(rotation=(1.0, 1.0)))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), angle=st.floats(-720, 720))
    def test_preserves_distances(self, seed, angle):
        r = np.random.default_rng(seed)
        pts = r.normal(scale=50, size=(12, 2))
        t = RigidTransform2D.from_angle(angle, r.normal(scale=100, size=2))
        moved = apply_transform(pts, t)
        d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        d1 = np.linalg.norm(moved[:, None] - moved[None], axis=2)
        np.testing.assert_allclose(d1, d0, rtol=1e-9, atol=1e-9)

    def test_compose_inverse(self, rng):
        a = RigidTransform2D.from_angle(37.0, (2.0, -1.0))
        b = RigidTransform2D.from_angle(-112.0, (0.5, 4.0))
        pts = rng.normal(size=(4, 2))
        np.testing.assert_allclose(apply_transform(pts, a.compose(b)), apply_transform(apply_transform(pts, b), a))
        np.testing.assert_allclose(apply_transform(apply_transform(pts, a), a.inverse()), pts, atol=1e-12)


TRIANGLE = np.array([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)])


class TestIntersectionArea:
    RES = 200.0

    def test_self(self):
        assert polygon_intersection_area(square(), square(), self.RES) == pytest.approx(1.0, abs=0.02)

    def test_offset(self):
        moved = square() + [0.5, 0.0]
        assert polygon_intersection_area(square(), moved, self.RES) == pytest.approx(0.5, abs=0.02)

    def test_triangle_against_finer_raster(self):
        # oracle: same rasteriser at 4x the resolution
        fine = polygon_intersection_area(square(), TRIANGLE, 4 * self.RES)
        got = polygon_intersection_area(square(), TRIANGLE, self.RES)
        assert got == pytest.approx(fine, abs=0.02)
        assert got == pytest.approx(0.5, abs=0.02)

    def test_disjoint(self):
        assert polygon_intersection_area(square(), square() + 5, self.RES) == 0.0

    def test_degenerate(self):
        with pytest.raises(DegeneratePolygon):
            polygon_intersection_area([(0, 0), (1, 1), (2, 2)], square())

    def test_exact_clip_agrees_on_convex(self, rng):
        for _ in range(20):
            a = random_star_polygon(rng, 3)  # triangles are convex
            b = square(size=1.2) - 0.6 + rng.normal(scale=0.3, size=2)
            exact = convex_clip_intersection_area(a, b)
            raster = polygon_intersection_area(a, b, 400.0)
            assert raster == pytest.approx(exact, rel=0.02, abs=1e-3)

    def test_exact_clip_against_shapely(self, rng):
        shapely = pytest.importorskip("shapely.geometry")
        for _ in range(20):
            a = random_star_polygon(rng, 12)
            b = square(size=1.2) - 0.6 + rng.normal(scale=0.3, size=2)
            ref = shapely.Polygon(a).intersection(shapely.Polygon(b)).area
            assert convex_clip_intersection_area(a, b) == pytest.approx(ref, abs=1e-9)

    def test_self_intersection_matches_area(self, rng):
        for _ in range(50):
            poly = random_star_polygon(rng, int(rng.integers(5, 40)), 5.0, 20.0)
            area = polygon_area(poly)
            assert polygon_intersection_area(poly, poly, 4.0) == pytest.approx(area, rel=0.02)
