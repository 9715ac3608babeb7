import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from asis.errors import ContractError, EmptyMaskError
from asis.raster import (InstanceMap, bounding_box, caliper_area, connected_components,
                         convex_hull, hull_of_points, min_area_rect, point_in_polygon,
                         polygon_area, rasterize_polygon)
from asis.synth import stroke_polyline
from oracles import flood_fill_count, gift_wrap

masks = arrays(bool, st.tuples(st.integers(1, 24), st.integers(1, 24)))
nonempty = masks.filter(lambda m: m.any())


def test_instance_map_requires_class_entries():
    with pytest.raises(ContractError):
        InstanceMap(np.array([[0, 1], [2, 2]]), {1: 1})


def test_instance_map_rejects_background_class():
    with pytest.raises(ContractError):
        InstanceMap(np.array([[1]]), {1: 0})


def test_components_full_block():
    assert len(connected_components(np.ones((3, 3), bool), 4)) == 1


def test_components_diagonal_pair():
    m = np.array([[1, 0], [0, 1]], bool)
    assert len(connected_components(m, 4)) == 2
    assert len(connected_components(m, 8)) == 1


def test_components_empty():
    assert connected_components(np.zeros((4, 4), bool)) == []


@pytest.mark.parametrize("conn", [4, 8])
def test_components_match_flood_fill(conn):
    rng = np.random.default_rng(3)
    m = rng.random((32, 32)) < 0.45
    assert len(connected_components(m, conn)) == flood_fill_count(m, conn)


@settings(max_examples=60, deadline=None)
@given(masks, st.sampled_from([4, 8]))
def test_components_partition_input(m, conn):
    comps = connected_components(m, conn)
    total = np.zeros(m.shape, int)
    for c in comps:
        total += c
        assert flood_fill_count(c, conn) == 1
    assert total.max(initial=0) <= 1
    assert np.array_equal(total.astype(bool), m)
    # ordering by first pixel in row-major order
    firsts = [np.flatnonzero(c.ravel())[0] for c in comps]
    assert firsts == sorted(firsts)


def test_bbox_examples():
    m = np.zeros((10, 10), bool)
    m[7, 5] = True
    assert bounding_box(m) == (5, 7, 5, 7)
    m = np.zeros((10, 12), bool)
    m[0, 0] = m[3, 9] = True
    assert bounding_box(m) == (0, 0, 9, 3)


def test_bbox_empty():
    with pytest.raises(EmptyMaskError):
        bounding_box(np.zeros((3, 3), bool))


@settings(max_examples=60, deadline=None)
@given(nonempty)
def test_bbox_matches_scan(m):
    ys, xs = np.nonzero(m)
    assert bounding_box(m) == (xs.min(), ys.min(), xs.max(), ys.max())


def test_hull_triangle():
    m = np.zeros((10, 10), bool)
    m[1, 1] = m[1, 8] = m[6, 3] = True
    hull = convex_hull(m)
    assert {tuple(p) for p in hull} == {(1.0, 1.0), (8.0, 1.0), (3.0, 6.0)}


def test_hull_square_and_ccw():
    m = np.zeros((14, 14), bool)
    m[2:12, 2:12] = True
    hull = convex_hull(m)
    assert len(hull) == 4
    x, y = hull[:, 0], hull[:, 1]
    signed = 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    assert signed > 0


def test_hull_collinear_is_segment():
    m = np.zeros((5, 9), bool)
    m[2, 1:8] = True
    hull = convex_hull(m)
    assert len(hull) == 2 and polygon_area(hull) == 0.0


def test_hull_empty():
    with pytest.raises(EmptyMaskError):
        convex_hull(np.zeros((2, 2), bool))


def test_hull_matches_gift_wrap_on_random_points():
    rng = np.random.default_rng(11)
    m = np.zeros((40, 40), bool)
    pts = rng.integers(0, 40, size=(50, 2))
    m[pts[:, 1], pts[:, 0]] = True
    ys, xs = np.nonzero(m)
    ref = gift_wrap(list(zip(xs.astype(float), ys.astype(float))))
    assert {tuple(p) for p in convex_hull(m)} == set(ref)


@settings(max_examples=60, deadline=None)
@given(nonempty)
def test_hull_contains_every_pixel(m):
    hull = convex_hull(m)
    ys, xs = np.nonzero(m)
    if len(hull) >= 3:
        assert point_in_polygon(hull, xs, ys, eps=1e-7).all()
    else:
        # degenerate hull: every pixel lies on the segment (or point)
        a, b = hull[0], hull[-1]
        d = b - a
        cross = d[0] * (ys - a[1]) - d[1] * (xs - a[0])
        assert np.allclose(cross, 0)


def test_min_rect_axis_bar():
    m = np.zeros((30, 40), bool)
    m[10:14, 5:25] = True
    r = min_area_rect(m)
    assert r.extents == pytest.approx((20.0, 4.0))
    assert r.aspect_ratio == pytest.approx(5.0)


def test_min_rect_rotated_bar():
    # a 20x4 bar rotated by 30 degrees, rasterized through its corner polygon
    c, s = math.cos(math.radians(30)), math.sin(math.radians(30))
    u, v = np.array([c, s]), np.array([-s, c])
    center = np.array([30.0, 30.0])
    poly = np.array([center + a * 10 * u + b * 2 * v
                     for a, b in [(-1, -1), (1, -1), (1, 1), (-1, 1)]])
    m = rasterize_polygon(poly, 60, 60)
    assert min_area_rect(m).aspect_ratio == pytest.approx(5.0, abs=0.2)


def test_min_rect_footprint_matches_pixel_count():
    m = np.zeros((30, 30), bool)
    m[3:10, 4:9] = True
    r = min_area_rect(m)
    assert r.area == pytest.approx(35.0)


def test_min_rect_thin_line_clamps_short_side():
    m = np.zeros((5, 20), bool)
    m[2, 3:15] = True
    r = min_area_rect(m)
    assert r.extents[1] == 1.0
    assert r.aspect_ratio == pytest.approx(12.0)


def test_min_rect_beats_angle_sweep():
    rng = np.random.default_rng(5)
    m = np.zeros((40, 40), bool)
    pts = rng.integers(5, 35, size=(25, 2))
    m[pts[:, 1], pts[:, 0]] = True
    hull = convex_hull(m)
    fit = caliper_area(m)
    for k in range(360):
        t = math.radians(0.5 * k)
        pu = hull @ np.array([math.cos(t), math.sin(t)])
        pv = hull @ np.array([-math.sin(t), math.cos(t)])
        assert fit <= (pu.max() - pu.min()) * (pv.max() - pv.min()) + 1e-9


@settings(max_examples=60, deadline=None)
@given(nonempty)
def test_min_rect_covers_mask_area(m):
    assert min_area_rect(m).area >= m.sum() - 1e-9


def test_min_rect_empty():
    with pytest.raises(EmptyMaskError):
        min_area_rect(np.zeros((3, 3), bool))


def test_rasterize_square_exact():
    sq = np.array([[0.5, 0.5], [10.5, 0.5], [10.5, 10.5], [0.5, 10.5]])
    assert rasterize_polygon(sq, 20, 20).sum() == 100


def test_rasterize_tiny_triangle():
    tri = np.array([[3.1, 3.1], [3.4, 3.1], [3.1, 3.4]])
    assert 0 <= rasterize_polygon(tri, 8, 8).sum() <= 1


def test_rasterize_random_convex_near_area():
    rng = np.random.default_rng(8)
    for _ in range(10):
        pts = rng.uniform(2, 60, size=(12, 2))
        poly = hull_of_points(pts)
        area = polygon_area(poly)
        perim = float(np.sum(np.hypot(*(np.roll(poly, -1, 0) - poly).T)))
        assert abs(rasterize_polygon(poly, 64, 64).sum() - area) <= perim


def test_rasterize_rejects_nonfinite():
    with pytest.raises(ContractError):
        rasterize_polygon(np.array([[0, 0], [np.inf, 1], [1, 1]]), 4, 4)


def test_operations_are_pure():
    m = stroke_polyline(np.array([[5, 5], [40, 30], [60, 8]]), np.array([3.0, 3, 3]), 64, 64)
    before = m.copy()
    a = (convex_hull(m), min_area_rect(m), bounding_box(m))
    b = (convex_hull(m), min_area_rect(m), bounding_box(m))
    assert np.array_equal(a[0], b[0]) and a[1] == b[1] and a[2] == b[2]
    assert np.array_equal(m, before)
