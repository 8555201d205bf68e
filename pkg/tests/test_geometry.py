"""Geometry kernels verified against brute-force oracles."""

import numpy as np
import pytest

from bpdo import geometry as geo
from bpdo.errors import DegenerateComponentError, InvalidInputError
from bpdo.geometry import BinaryMask, Polygon


def brute_force_distance(bits):
    """Exhaustive min-over-all-false-cells oracle."""
    rows, cols = bits.shape
    out = np.zeros((rows, cols))
    fy, fx = np.nonzero(~bits)
    if fy.size == 0:
        raise AssertionError("oracle needs at least one false cell")
    false_pts = np.stack([fy, fx], axis=1).astype(float)
    for r in range(rows):
        for c in range(cols):
            if bits[r, c]:
                d = np.hypot(false_pts[:, 0] - r, false_pts[:, 1] - c)
                out[r, c] = d.min()
    return out


def flood_fill_count(bits):
    """Independent component count via explicit 8-neighbor flood fill."""
    seen = np.zeros_like(bits, dtype=bool)
    count = 0
    rows, cols = bits.shape
    for r in range(rows):
        for c in range(cols):
            if bits[r, c] and not seen[r, c]:
                count += 1
                stack = [(r, c)]
                seen[r, c] = True
                while stack:
                    y, x = stack.pop()
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = y + dy, x + dx
                            if (
                                0 <= ny < rows
                                and 0 <= nx < cols
                                and bits[ny, nx]
                                and not seen[ny, nx]
                            ):
                                seen[ny, nx] = True
                                stack.append((ny, nx))
    return count


class TestPolygon:
    def test_orientation_normalized(self):
        cw = Polygon([(0, 0), (0, 1), (1, 1), (1, 0)])
        ccw = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
        assert cw.signed_area > 0
        assert ccw.signed_area > 0
        assert cw.area == pytest.approx(1.0)

    def test_consecutive_duplicates_dropped(self):
        p = Polygon([(0, 0), (0, 0), (1, 0), (1, 1), (0, 1), (0, 0)])
        assert p.n_vertices == 4

    def test_too_few_vertices(self):
        with pytest.raises(InvalidInputError):
            Polygon([(0, 0), (1, 1)])

    def test_zero_area_rejected(self):
        with pytest.raises(InvalidInputError):
            Polygon([(0, 0), (1, 1), (2, 2)])

    def test_degenerate_allowed_when_asked(self):
        p = Polygon([(0, 0), (1, 1), (2, 2)], allow_degenerate=True)
        assert p.area == 0.0


class TestResample:
    def test_unit_square_corners(self):
        sq = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
        pts = geo.resample_polygon(sq, 4).points
        assert tuple(pts[0]) == (0.0, 0.0)  # lexicographically smallest (y, x)
        got = {tuple(p) for p in np.round(pts, 9)}
        assert got == {(0, 0), (1, 0), (1, 1), (0, 1)}

    def test_unit_square_k8_midpoints(self):
        sq = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
        pts = geo.resample_polygon(sq, 8).points
        got = {tuple(p) for p in np.round(pts, 9)}
        assert got == {
            (0, 0), (0.5, 0), (1, 0), (1, 0.5), (1, 1), (0.5, 1), (0, 1), (0, 0.5),
        }

    @staticmethod
    def arc_position(poly, point):
        """Independent measurement: arc length from vertex 0 to a boundary point."""
        v = poly.vertices
        edges = np.roll(v, -1, axis=0) - v
        lengths = np.hypot(edges[:, 0], edges[:, 1])
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        best = (np.inf, 0.0)
        for i in range(len(v)):
            t = np.dot(point - v[i], edges[i]) / max(lengths[i] ** 2, 1e-300)
            t = min(max(t, 0.0), 1.0)
            closest = v[i] + t * edges[i]
            d = np.hypot(*(point - closest))
            if d < best[0]:
                best = (d, cum[i] + t * lengths[i])
        assert best[0] <= 1e-9  # resampled points must lie on the boundary
        return best[1]

    def test_uniform_spacing_on_random_14gon(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            ang = np.sort(rng.uniform(0, 2 * np.pi, 14))
            rad = rng.uniform(3, 9, 14)
            poly = Polygon(np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1))
            pts = geo.resample_polygon(poly, 20).points
            total = poly.perimeter
            pos = np.array([self.arc_position(poly, p) for p in pts])
            spacing = np.diff(pos)
            spacing = np.where(spacing < 0, spacing + total, spacing)
            np.testing.assert_allclose(
                spacing, np.full(19, total / 20), atol=1e-6 * total
            )

    def test_k_too_small(self):
        sq = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
        with pytest.raises(InvalidInputError):
            geo.resample_polygon(sq, 2)


class TestDistanceTransform:
    def test_all_false_is_zero(self):
        out = geo.distance_transform(BinaryMask(np.zeros((4, 5), bool)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4, 5)))

    def test_single_cell(self):
        bits = np.zeros((3, 3), bool)
        bits[1, 1] = True
        out = geo.distance_transform(BinaryMask(bits))
        assert out.data[0, 1, 1] == pytest.approx(1.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(123)
        for _ in range(12):
            rows = int(rng.integers(4, 33))
            cols = int(rng.integers(4, 33))
            bits = rng.random((rows, cols)) < 0.55
            bits[0, 0] = False  # keep at least one false cell
            got = geo.distance_transform(BinaryMask(bits)).data[0]
            np.testing.assert_allclose(got, brute_force_distance(bits), atol=1e-6)

    def test_all_true_rejected(self):
        with pytest.raises(InvalidInputError):
            geo.distance_transform(BinaryMask(np.ones((3, 3), bool)))


class TestConnectedComponents:
    def test_two_blobs(self):
        bits = np.zeros((8, 8), bool)
        bits[0:3, 0:3] = True
        bits[5:8, 5:8] = True
        _labels, n = geo.connected_components(BinaryMask(bits))
        assert n == 2

    def test_diagonal_touch_is_one_component(self):
        bits = np.zeros((4, 4), bool)
        bits[0, 0] = bits[1, 1] = bits[2, 2] = True
        _labels, n = geo.connected_components(BinaryMask(bits))
        assert n == 1

    def test_matches_flood_fill(self):
        rng = np.random.default_rng(99)
        for _ in range(15):
            bits = rng.random((20, 24)) < 0.35
            _labels, n = geo.connected_components(BinaryMask(bits))
            assert n == flood_fill_count(bits)

    def test_labels_partition_and_raster_order(self):
        rng = np.random.default_rng(5)
        bits = rng.random((16, 16)) < 0.3
        labels, n = geo.connected_components(BinaryMask(bits))
        assert set(np.unique(labels[bits])) == set(range(1, n + 1)) if n else True
        assert np.all(labels[~bits] == 0)
        # first occurrences appear in increasing label order
        firsts = [np.argmax(labels.ravel() == i) for i in range(1, n + 1)]
        assert firsts == sorted(firsts)


class TestTraceBoundary:
    def test_3x3_square(self):
        lab = np.zeros((5, 5), np.int32)
        lab[1:4, 1:4] = 1
        poly = geo.trace_boundary(lab, 1)
        assert poly.n_vertices == 8
        got = {tuple(v) for v in poly.vertices}
        assert got == {
            (1, 1), (2, 1), (3, 1), (3, 2), (3, 3), (2, 3), (1, 3), (1, 2),
        }

    def test_1x5_bar_visits_border_path(self):
        lab = np.zeros((3, 7), np.int32)
        lab[1, 1:6] = 1
        poly = geo.trace_boundary(lab, 1)
        visited = {tuple(v) for v in poly.vertices}
        assert visited == {(x, 1.0) for x in (1.0, 2.0, 3.0, 4.0, 5.0)}

    def test_too_small(self):
        lab = np.zeros((3, 3), np.int32)
        lab[1, 1] = 1
        with pytest.raises(DegenerateComponentError):
            geo.trace_boundary(lab, 1)

    def test_contour_contains_component(self):
        rng = np.random.default_rng(17)
        for _ in range(8):
            bits = np.zeros((24, 24), bool)
            r, c = rng.integers(4, 14), rng.integers(4, 14)
            h, w = rng.integers(3, 9), rng.integers(3, 9)
            bits[r : r + h, c : c + w] = True
            labels, n = geo.connected_components(BinaryMask(bits))
            poly = geo.trace_boundary(labels, 1)
            back = geo.rasterize(poly, 24, 24)
            assert np.all(back.bits[bits])  # original cells inside or on contour


class TestRasterize:
    def test_square_covering_centers(self):
        mask = geo.rasterize(Polygon([(1, 1), (3, 1), (3, 3), (1, 3)]), 5, 5)
        assert mask.bits.sum() == 9
        assert np.all(mask.bits[1:4, 1:4])

    def test_fully_outside(self):
        mask = geo.rasterize(Polygon([(10, 10), (12, 10), (12, 12), (10, 12)]), 5, 5)
        assert not mask.bits.any()

    def test_area_close_to_analytic(self):
        rng = np.random.default_rng(31)
        for _ in range(5):
            ang = np.sort(rng.uniform(0, 2 * np.pi, 9))
            rad = rng.uniform(100, 220, 9)
            verts = np.stack(
                [256 + rad * np.cos(ang), 256 + rad * np.sin(ang)], axis=1
            )
            poly = Polygon(verts)
            mask = geo.rasterize(poly, 512, 512)
            assert mask.bits.sum() == pytest.approx(poly.area, rel=0.02)

    def test_roundtrip_recovers_cells(self):
        # convex polygon with area >= 100 cells survives trace+rasterize
        poly = Polygon([(3, 4), (20, 3), (24, 14), (10, 20), (4, 15)])
        mask = geo.rasterize(poly, 28, 28)
        assert mask.bits.sum() >= 100
        labels, _ = geo.connected_components(mask)
        traced = geo.trace_boundary(labels, 1)
        back = geo.rasterize(traced, 28, 28)
        recovered = (back.bits & mask.bits).sum() / mask.bits.sum()
        assert recovered >= 0.95


class TestPolygonIoU:
    def test_identical(self):
        p = Polygon([(0, 0), (2, 0), (2, 1), (0, 1)])
        assert geo.polygon_iou(p, p) == 1.0

    def test_disjoint(self):
        a = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
        b = Polygon([(5, 5), (6, 5), (6, 6), (5, 6)])
        assert geo.polygon_iou(a, b) == 0.0

    def test_half_overlap_third(self):
        a = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
        b = Polygon([(0.5, 0), (1.5, 0), (1.5, 1), (0.5, 1)])
        assert geo.polygon_iou(a, b) == pytest.approx(1 / 3, abs=0.01)

    def test_symmetry(self):
        rng = np.random.default_rng(8)
        for _ in range(6):
            a = Polygon(rng.uniform(0, 30, size=(5, 2)), allow_degenerate=True)
            b = Polygon(rng.uniform(10, 40, size=(5, 2)), allow_degenerate=True)
            assert abs(geo.polygon_iou(a, b) - geo.polygon_iou(b, a)) <= 1e-12


class TestNearestBoundary:
    def test_adjacent_cell(self):
        bits = np.zeros((5, 5), bool)
        bits[1:4, 1:4] = True
        d, direction = geo.point_to_nearest_boundary(BinaryMask(bits), (1, 2))
        assert d == pytest.approx(1.0)
        np.testing.assert_allclose(direction, [0.0, -1.0])  # straight up

    def test_tie_broken_toward_smallest_yx(self):
        bits = np.zeros((5, 5), bool)
        bits[1:4, 1:4] = True
        d, direction = geo.point_to_nearest_boundary(BinaryMask(bits), (2, 2))
        assert d == pytest.approx(2.0)
        # candidates at distance 2: (0,2), (2,0), (2,4), (4,2); smallest (y,x) is (0,2)
        np.testing.assert_allclose(direction, [0.0, -1.0])

    def test_outside_region_rejected(self):
        bits = np.zeros((3, 3), bool)
        bits[1, 1] = True
        with pytest.raises(InvalidInputError):
            geo.point_to_nearest_boundary(BinaryMask(bits), (0, 0))

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(55)
        for _ in range(8):
            bits = rng.random((14, 15)) < 0.6
            bits[0, :] = False
            mask = BinaryMask(bits)
            dist, dir_x, dir_y = geo.nearest_exterior(mask)
            fy, fx = np.nonzero(~bits)
            for r, c in zip(*np.nonzero(bits)):
                d2 = (fy - r) ** 2 + (fx - c) ** 2
                dmin = np.sqrt(d2.min())
                assert dist[r, c] == pytest.approx(dmin, abs=1e-9)
                # oracle tie rule: smallest (y, x) among nearest candidates
                cand = np.nonzero(d2 == d2.min())[0]
                order = np.lexsort((fx[cand], fy[cand]))
                by, bx = fy[cand[order[0]]], fx[cand[order[0]]]
                np.testing.assert_allclose(
                    [dir_x[r, c], dir_y[r, c]],
                    [(bx - c) / dmin, (by - r) / dmin],
                    atol=1e-9,
                )
