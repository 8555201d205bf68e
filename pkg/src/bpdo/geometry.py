"""Polygon arithmetic, mask morphology, and rasterized region metrics.

Grid convention (used everywhere): x indexes columns, y indexes rows, and
integer coordinates land on cell centers. Polygon orientation is normalized
so the shoelace sum  sum(x_i * y_{i+1} - x_{i+1} * y_i)  is positive; we
call that counter-clockwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import DegenerateComponentError, InvalidInputError
from .fields import TensorField

_AREA_EPS = 1e-12
_ON_EDGE_EPS = 1e-9


class Polygon:
    """An ordered ring of sub-pixel vertices.

    Construction drops consecutive duplicate vertices (including a closing
    repeat of the first), requires at least 3 distinct vertices, rejects
    zero signed area, and normalizes orientation to counter-clockwise.

    ``allow_degenerate=True`` relaxes only the nonzero-area requirement; it
    exists for traced contours of one-cell-wide regions, whose back-and-forth
    boundary path is a legitimate ring with zero enclosed area.
    """

    __slots__ = ("vertices",)

    def __init__(self, vertices, allow_degenerate=False):
        arr = np.asarray(vertices, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise InvalidInputError(f"polygon vertices must be (N, 2), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("polygon vertices must be finite")
        keep = np.any(arr != np.roll(arr, 1, axis=0), axis=1)
        arr = arr[keep]
        if arr.shape[0] < 3:
            raise InvalidInputError("polygon needs at least 3 distinct vertices")
        area2 = _shoelace2(arr)
        if not allow_degenerate and abs(area2) < _AREA_EPS:
            raise InvalidInputError("polygon has zero signed area")
        if area2 < 0:
            arr = arr[::-1].copy()
        self.vertices = arr

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def signed_area(self) -> float:
        return 0.5 * _shoelace2(self.vertices)

    @property
    def area(self) -> float:
        return abs(self.signed_area)

    @property
    def perimeter(self) -> float:
        d = np.diff(np.vstack([self.vertices, self.vertices[:1]]), axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())

    def translated(self, dx, dy) -> "Polygon":
        return Polygon(self.vertices + np.array([dx, dy]), allow_degenerate=True)

    def scaled(self, sx, sy) -> "Polygon":
        return Polygon(self.vertices * np.array([sx, sy]), allow_degenerate=True)

    def __repr__(self):
        return f"Polygon(n={self.n_vertices}, area={self.area:.2f})"


def _shoelace2(arr: np.ndarray) -> float:
    x, y = arr[:, 0], arr[:, 1]
    return float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass
class BoundaryPoints:
    """Exactly K ordered sub-pixel boundary positions."""

    points: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.points, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 1:
            raise InvalidInputError(f"boundary points must be (K, 2), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("boundary points must be finite")
        self.points = arr

    @property
    def k(self) -> int:
        return self.points.shape[0]


@dataclass
class BinaryMask:
    """Row-major boolean grid."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise InvalidInputError(f"mask must be 2-d, got shape {arr.shape}")
        if arr.size == 0:
            raise InvalidInputError("mask must be non-empty")
        self.bits = arr.astype(bool)

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]


def resample_polygon(poly: Polygon, k: int) -> BoundaryPoints:
    """Place k points equally spaced by arc length along the closed ring.

    The walk starts at the vertex with lexicographically smallest (y, x)
    and follows the polygon's stored orientation, so the output is a
    deterministic function of the ring shape.
    """
    if k < 3:
        raise InvalidInputError("resampling needs k >= 3")
    verts = poly.vertices
    start = int(np.lexsort((verts[:, 0], verts[:, 1]))[0])
    ring = np.roll(verts, -start, axis=0)
    closed = np.vstack([ring, ring[:1]])
    seg = np.diff(closed, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    total = float(seg_len.sum())
    if total <= _AREA_EPS:
        raise InvalidInputError("cannot resample a zero-perimeter polygon")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    targets = np.arange(k) * (total / k)
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, len(seg_len) - 1)
    frac = (targets - cum[idx]) / np.where(seg_len[idx] > 0, seg_len[idx], 1.0)
    pts = closed[idx] + frac[:, None] * seg[idx]
    return BoundaryPoints(pts)


def distance_transform(mask: BinaryMask) -> TensorField:
    """Exact Euclidean distance from each true cell to the nearest false cell.

    False cells map to 0. A mask with no false cell has no defined distance
    and is rejected.
    """
    bits = mask.bits
    if not bits.any():
        return TensorField(np.zeros((1,) + bits.shape))
    if bits.all():
        raise InvalidInputError("distance undefined: mask has no false cell")
    d = ndimage.distance_transform_edt(bits)
    return TensorField(d[None, :, :])


def connected_components(mask: BinaryMask):
    """8-connectivity labeling with labels dense 1..n in raster-scan order.

    Returns (label_grid, n_components).
    """
    lab, n = ndimage.label(mask.bits, structure=np.ones((3, 3), bool))
    if n == 0:
        return lab.astype(np.int32), 0
    # force label order to first occurrence in row-major scan
    flat = lab.ravel()
    first_idx = {}
    uniq, first = np.unique(flat, return_index=True)
    for u, f in zip(uniq, first):
        if u > 0:
            first_idx[int(u)] = int(f)
    order = sorted(first_idx, key=first_idx.get)
    remap = np.zeros(n + 1, dtype=np.int32)
    for new, old in enumerate(order, start=1):
        remap[old] = new
    return remap[lab].astype(np.int32), n


_MOORE = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
_MOORE_INDEX = {d: i for i, d in enumerate(_MOORE)}


def trace_boundary(label_grid: np.ndarray, component_id: int) -> Polygon:
    """Moore-neighbor trace of one component's outer contour.

    Vertices are the centers of the boundary cells visited, in order,
    normalized counter-clockwise when the ring encloses area. Components
    with fewer than 3 cells cannot form a ring.
    """
    inside = label_grid == component_id
    n_cells = int(inside.sum())
    if n_cells < 3:
        raise DegenerateComponentError(
            f"component {component_id} has {n_cells} cells; need at least 3"
        )
    rows, cols = inside.shape
    start_flat = int(np.argmax(inside))
    sr, sc = divmod(start_flat, cols)
    start = (sr, sc)

    def is_in(cell):
        r, c = cell
        return 0 <= r < rows and 0 <= c < cols and inside[r, c]

    contour = [start]
    cur = start
    back = (sr, sc - 1)  # raster-scan start guarantees the west neighbor is outside
    transitions = set()
    while True:
        bi = _MOORE_INDEX[(back[0] - cur[0], back[1] - cur[1])]
        found = None
        new_back = back
        for step in range(1, 9):
            i = (bi + step) % 8
            cand = (cur[0] + _MOORE[i][0], cur[1] + _MOORE[i][1])
            if is_in(cand):
                found = cand
                pr, pc = _MOORE[(i - 1) % 8]
                new_back = (cur[0] + pr, cur[1] + pc)
                break
        if found is None:
            break  # unreachable for components of >= 3 connected cells
        move = (cur, found)
        if move in transitions:
            break  # contour closed: the walk is repeating itself
        transitions.add(move)
        contour.append(found)
        cur, back = found, new_back
    # drop the duplicated closing vertex if present
    pts = np.array([(c, r) for r, c in contour], dtype=np.float64)
    if len(pts) >= 2 and np.all(pts[0] == pts[-1]):
        pts = pts[:-1]
    if pts.shape[0] < 3:
        raise DegenerateComponentError(
            f"component {component_id} trace has fewer than 3 distinct cells"
        )
    return Polygon(pts, allow_degenerate=True)


def rasterize(poly: Polygon, rows: int, cols: int) -> BinaryMask:
    """Even-odd scanline fill over cell centers; centers on the boundary count.

    Robust to self-touching and self-intersecting rings (parity rule), which
    refined proposals can produce.
    """
    if rows < 1 or cols < 1:
        raise InvalidInputError("grid dimensions must be positive")
    v = poly.vertices
    x1, y1 = v[:, 0], v[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    bits = np.zeros((rows, cols), dtype=bool)

    dy = y2 - y1
    nonflat = dy != 0
    xs1, ys1, xs2, ys2 = x1[nonflat], y1[nonflat], x2[nonflat], y2[nonflat]
    slope = (xs2 - xs1) / (ys2 - ys1)
    ymin = np.minimum(ys1, ys2)
    ymax = np.maximum(ys1, ys2)
    for r in range(rows):
        cross = (ymin <= r) & (r < ymax)
        if not cross.any():
            continue
        xc = xs1[cross] + (r - ys1[cross]) * slope[cross]
        xc.sort()
        counts = np.searchsorted(xc, np.arange(cols), side="left")
        bits[r] = (counts % 2) == 1

    _mark_boundary_centers(bits, v)
    return BinaryMask(bits)


def _mark_boundary_centers(bits: np.ndarray, verts: np.ndarray):
    """Set cells whose center lies exactly on a polygon edge."""
    rows, cols = bits.shape
    n = verts.shape[0]
    for i in range(n):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % n]
        dx, dy = bx - ax, by - ay
        if abs(dx) >= abs(dy):
            lo = int(np.ceil(min(ax, bx) - _ON_EDGE_EPS))
            hi = int(np.floor(max(ax, bx) + _ON_EDGE_EPS))
            if dx == 0:  # degenerate point edge
                continue
            for xi in range(max(lo, 0), min(hi, cols - 1) + 1):
                y = ay + (xi - ax) * dy / dx
                yi = int(np.rint(y))
                if abs(y - yi) <= _ON_EDGE_EPS and 0 <= yi < rows:
                    bits[yi, xi] = True
        else:
            lo = int(np.ceil(min(ay, by) - _ON_EDGE_EPS))
            hi = int(np.floor(max(ay, by) + _ON_EDGE_EPS))
            for yi in range(max(lo, 0), min(hi, rows - 1) + 1):
                x = ax + (yi - ay) * dx / dy
                xi = int(np.rint(x))
                if abs(x - xi) <= _ON_EDGE_EPS and 0 <= xi < cols:
                    bits[yi, xi] = True


def polygon_iou(a: Polygon, b: Polygon, resolution: int = 512) -> float:
    """Rasterized intersection-over-union on a shared grid.

    Both polygons are mapped into the tight joint bounding box, scaled so
    its long side spans ``resolution`` cells. An empty union yields 0.
    """
    if resolution < 2:
        raise InvalidInputError("resolution must be at least 2")
    pts = np.vstack([a.vertices, b.vertices])
    xmin, ymin = pts.min(axis=0)
    xmax, ymax = pts.max(axis=0)
    w, h = xmax - xmin, ymax - ymin
    long_side = max(w, h)
    if long_side <= 0:
        return 0.0
    scale = (resolution - 1) / long_side
    cols = max(int(np.floor(w * scale)) + 1, 1)
    rows = max(int(np.floor(h * scale)) + 1, 1)
    ma = rasterize(a.translated(-xmin, -ymin).scaled(scale, scale), rows, cols)
    mb = rasterize(b.translated(-xmin, -ymin).scaled(scale, scale), rows, cols)
    union = int((ma.bits | mb.bits).sum())
    if union == 0:
        return 0.0
    inter = int((ma.bits & mb.bits).sum())
    return inter / union


@lru_cache(maxsize=4096)
def _offsets_for_square_distance(r2: int):
    """All integer (dy, dx) with dy^2 + dx^2 == r2, lexicographically sorted."""
    r = int(np.sqrt(r2)) + 1
    offs = []
    for dy in range(-r, r + 1):
        rem = r2 - dy * dy
        if rem < 0:
            continue
        s = int(np.sqrt(rem))
        for cand in (s - 1, s, s + 1):
            if cand >= 0 and cand * cand == rem:
                offs.append((dy, -cand))
                if cand != 0:
                    offs.append((dy, cand))
                break
    return tuple(sorted(set(offs)))


def nearest_exterior(mask: BinaryMask):
    """Per-cell nearest false cell, with deterministic tie-breaking.

    For every true cell: the exact Euclidean distance to the nearest false
    cell and the unit vector toward it. Ties go to the candidate false cell
    with lexicographically smallest (y, x). False cells yield zeros.

    Returns (dist, dir_x, dir_y), each a (rows, cols) float64 array.
    """
    bits = mask.bits
    rows, cols = bits.shape
    dist = np.zeros((rows, cols))
    dir_x = np.zeros((rows, cols))
    dir_y = np.zeros((rows, cols))
    if not bits.any():
        return dist, dir_x, dir_y
    if bits.all():
        raise InvalidInputError("mask has no false cell")
    d = ndimage.distance_transform_edt(bits)
    r2 = np.rint(d * d).astype(np.int64)
    for v in np.unique(r2[bits]):
        ys, xs = np.nonzero((r2 == v) & bits)
        unresolved = np.ones(ys.shape[0], dtype=bool)
        dd = float(np.sqrt(v))
        for dy_off, dx_off in _offsets_for_square_distance(int(v)):
            ny = ys + dy_off
            nx = xs + dx_off
            ok = unresolved & (ny >= 0) & (ny < rows) & (nx >= 0) & (nx < cols)
            if not ok.any():
                continue
            hit = ok.copy()
            hit[ok] = ~bits[ny[ok], nx[ok]]
            if not hit.any():
                continue
            dist[ys[hit], xs[hit]] = dd
            dir_x[ys[hit], xs[hit]] = dx_off / dd
            dir_y[ys[hit], xs[hit]] = dy_off / dd
            unresolved &= ~hit
            if not unresolved.any():
                break
        if unresolved.any():
            raise AssertionError("nearest-exterior search failed to resolve a cell")
    return dist, dir_x, dir_y


def point_to_nearest_boundary(mask: BinaryMask, cell):
    """Distance and unit direction from a true cell to its nearest false cell.

    ``cell`` is (row, col). Ties among equally near false cells are broken
    toward the smallest (y, x). The direction is returned as (dx, dy) in the
    x=column, y=row convention.
    """
    r, c = int(cell[0]), int(cell[1])
    if not (0 <= r < mask.rows and 0 <= c < mask.cols) or not mask.bits[r, c]:
        raise InvalidInputError(f"cell ({r}, {c}) is not inside a true region")
    dist, dir_x, dir_y = nearest_exterior(mask)
    return float(dist[r, c]), np.array([dir_x[r, c], dir_y[r, c]])
