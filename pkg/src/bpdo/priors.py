"""Ground-truth supervision maps: classification, distance, and direction.

Conventions (this artifact's, stated once):
  * the distance map is normalized per instance by that instance's maximum
    interior distance, so every instance peaks at 1.0 and the binarization
    threshold is scale-free;
  * direction maps hold the unit vector from each text cell toward its
    nearest exterior cell (pointing outward to the boundary), zero on
    background;
  * where instances overlap, the instance with the smaller index wins
    every per-cell value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import InvalidInputError
from .fields import TensorField
from .geometry import BinaryMask, Polygon


@dataclass
class PriorMaps:
    """The four supervision rasters for one scene, all rows x cols."""

    cls: TensorField
    dist: TensorField
    dir_x: TensorField
    dir_y: TensorField

    def __post_init__(self):
        shapes = {m.shape for m in (self.cls, self.dist, self.dir_x, self.dir_y)}
        if len(shapes) != 1:
            raise InvalidInputError(f"prior maps disagree on shape: {shapes}")
        if self.cls.channels != 1:
            raise InvalidInputError("prior maps must be single-channel")

    @property
    def rows(self) -> int:
        return self.cls.rows

    @property
    def cols(self) -> int:
        return self.cls.cols

    def stacked(self) -> np.ndarray:
        """(4, rows, cols) array ordered cls, dist, dir_x, dir_y."""
        return np.concatenate(
            [self.cls.data, self.dist.data, self.dir_x.data, self.dir_y.data], axis=0
        )


def make_prior_maps(polygons, rows: int, cols: int) -> PriorMaps:
    """Build ground-truth prior maps from instance polygons.

    An empty polygon list produces four all-zero maps. Overlapping
    instances are permitted; earlier instances claim contested cells.
    """
    if rows < 1 or cols < 1:
        raise InvalidInputError("grid dimensions must be positive")
    cls = np.zeros((rows, cols))
    dist = np.zeros((rows, cols))
    dir_x = np.zeros((rows, cols))
    dir_y = np.zeros((rows, cols))
    claimed = np.zeros((rows, cols), dtype=bool)

    for poly in polygons:
        if not isinstance(poly, Polygon):
            raise InvalidInputError("make_prior_maps expects Polygon instances")
        inst = geometry.rasterize(poly, rows, cols).bits
        if not inst.any():
            continue
        cls[inst] = 1.0
        write = inst & ~claimed
        claimed |= inst
        if not write.any():
            continue
        if inst.all():
            raise InvalidInputError("an instance covers the whole grid")
        d, ux, uy = geometry.nearest_exterior(BinaryMask(inst))
        # per-instance normalization; the 1.0 floor guards one-cell-thick shapes
        norm = max(float(d[inst].max()), 1.0)
        dist[write] = d[write] / norm
        dir_x[write] = ux[write]
        dir_y[write] = uy[write]

    return PriorMaps(
        cls=TensorField(cls[None]),
        dist=TensorField(dist[None]),
        dir_x=TensorField(dir_x[None]),
        dir_y=TensorField(dir_y[None]),
    )


def binarize_distance(dist: TensorField, theta: float) -> BinaryMask:
    """Threshold a distance map: true where dist > theta."""
    if not (0.0 < theta < 1.0):
        raise InvalidInputError(f"theta must lie in (0, 1), got {theta}")
    if dist.channels != 1:
        raise InvalidInputError("binarize_distance expects a 1-channel field")
    return BinaryMask(dist.data[0] > theta)
