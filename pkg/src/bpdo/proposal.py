"""Boundary proposals: binarized distance map -> component contours -> rings.

Proposals are the shrunken core of each detected region, not the full text
boundary; the refinement stage is responsible for pushing them outward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry, priors
from .errors import DegenerateComponentError, InvalidInputError
from .fields import TensorField


@dataclass(frozen=True)
class ProposalConfig:
    theta: float = 0.3
    min_area: int = 16
    k_points: int = 20

    def __post_init__(self):
        if not (0.0 < self.theta < 1.0):
            raise InvalidInputError(f"theta must lie in (0, 1), got {self.theta}")
        if self.k_points < 4:
            raise InvalidInputError("k_points must be at least 4")
        if self.min_area < 1:
            raise InvalidInputError("min_area must be positive")


def extract_proposals(dist: TensorField, cfg: ProposalConfig = ProposalConfig()):
    """Turn a distance map into a list of K-point boundary rings.

    Binarize at ``cfg.theta``, drop components smaller than ``cfg.min_area``
    cells, Moore-trace each survivor's outer contour, and resample it to
    ``cfg.k_points`` points. Proposals come back ordered by component label.
    An empty or all-background map yields an empty list.
    """
    if dist.channels != 1:
        raise InvalidInputError("extract_proposals expects a 1-channel distance field")
    mask = priors.binarize_distance(dist, cfg.theta)
    labels, n = geometry.connected_components(mask)
    out = []
    for cid in range(1, n + 1):
        if int((labels == cid).sum()) < cfg.min_area:
            continue
        try:
            contour = geometry.trace_boundary(labels, cid)
        except DegenerateComponentError:
            continue  # unreachable for min_area >= 3, kept for prediction noise
        out.append(geometry.resample_polygon(contour, cfg.k_points))
    return out


def proposal_arrays(proposals) -> np.ndarray:
    """Stack proposals into an (n, k, 2) array (empty -> (0, 0, 2))."""
    if not proposals:
        return np.zeros((0, 0, 2))
    return np.stack([p.points for p in proposals], axis=0)
