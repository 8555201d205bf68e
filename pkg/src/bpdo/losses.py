"""The multi-objective training loss and its scheduled combination.

Component losses return scalar graph Tensors so training and gradient
checking run through the same code; use ``float(x.data)`` or ``.item()``
for plain numbers. The point-matching term decays over training by the
sigmoid factor gamma / (1 + exp((epoch - eps) / eps)) with eps the maximum
epoch; epochs are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import Tensor, as_tensor
from .errors import InvalidInputError

_CLS_CLAMP = 1e-7
_DIR_NORM_FLOOR = 1e-6


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 3.0
    gamma: float = 0.1
    eps_epochs: int = 200

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise InvalidInputError("loss weights must be nonnegative")
        if self.eps_epochs < 1:
            raise InvalidInputError("eps_epochs must be at least 1")


@dataclass
class LossReport:
    l_cls: float
    l_dis: float
    l_dir: float
    l_pm: float
    schedule_factor: float
    total: float
    epoch: int

    def as_dict(self):
        return {
            "l_cls": self.l_cls,
            "l_dis": self.l_dis,
            "l_dir": self.l_dir,
            "l_pm": self.l_pm,
            "schedule_factor": self.schedule_factor,
            "total": self.total,
            "epoch": self.epoch,
        }


def _as_map(x, like=None) -> Tensor:
    t = as_tensor(x, like=like)
    if t.ndim == 3 and t.shape[0] == 1:
        t = t.reshape(t.shape[1], t.shape[2])
    if t.ndim != 2:
        raise InvalidInputError(f"expected a single-channel map, got shape {t.shape}")
    return t


def _check_same_shape(*maps):
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise InvalidInputError(f"map shapes disagree: {shapes}")


def cls_loss(pred_cls, gt_cls) -> Tensor:
    """Mean binary cross-entropy over all cells.

    Predictions are clamped to [1e-7, 1 - 1e-7]; ground truth must be
    strictly binary.
    """
    pred = _as_map(pred_cls)
    gt = _as_map(gt_cls, like=pred)
    _check_same_shape(pred, gt)
    gdata = gt.data
    if not np.all((gdata == 0) | (gdata == 1)):
        raise InvalidInputError("gt_cls must contain only 0 and 1")
    p = ad.clip(pred, _CLS_CLAMP, 1.0 - _CLS_CLAMP)
    bce = -(gt * ad.log(p) + (1.0 - gt) * ad.log(1.0 - p))
    return bce.mean()


def dis_loss(pred_dist, gt_dist, gt_cls, include_background=False) -> Tensor:
    """L2 regression of the distance map.

    By default the mean runs over text cells only, so the empty background
    cannot drown the signal; ``include_background=True`` averages over the
    full grid instead.
    """
    pred = _as_map(pred_dist)
    gt = _as_map(gt_dist, like=pred)
    cls = _as_map(gt_cls, like=pred)
    _check_same_shape(pred, gt, cls)
    sq = (pred - gt) ** 2
    if include_background:
        return sq.mean()
    mask = (cls.data == 1).astype(pred.data.dtype)
    count = float(mask.sum())
    if count == 0:
        return as_tensor(np.zeros((), dtype=pred.data.dtype))
    return (sq * mask).sum() * (1.0 / count)


def dir_loss(pred_dir_x, pred_dir_y, gt_dir_x, gt_dir_y, gt_cls) -> Tensor:
    """Magnitude-plus-angle regression of the direction field on text cells.

    Per text cell: (|pred| - |gt|)^2 + (1 - cos angle(pred, gt)). Cells
    where the predicted norm is under 1e-6 contribute angle term 1 (the
    angle is meaningless there).
    """
    px = _as_map(pred_dir_x)
    py = _as_map(pred_dir_y, like=px)
    gx = _as_map(gt_dir_x, like=px)
    gy = _as_map(gt_dir_y, like=px)
    cls = _as_map(gt_cls, like=px)
    _check_same_shape(px, py, gx, gy, cls)
    mask = (cls.data == 1).astype(px.data.dtype)
    count = float(mask.sum())
    if count == 0:
        return as_tensor(np.zeros((), dtype=px.data.dtype))

    # 1e-12 inside the sqrt keeps the norm differentiable at zero
    pnorm = ad.sqrt(px * px + py * py + 1e-12)
    gnorm = ad.sqrt(gx * gx + gy * gy + 1e-12)
    magnitude = (pnorm - gnorm) ** 2

    tiny = (pnorm.data < _DIR_NORM_FLOOR).astype(px.data.dtype)
    # keep the cosine's denominator away from zero on degenerate cells;
    # their contribution is replaced by the constant 1 below
    safe_norm = pnorm + tiny
    cos = (px * gx + py * gy) / (safe_norm * gnorm)
    angle = (1.0 - cos) * (1.0 - tiny) + tiny

    per_cell = (magnitude + angle) * mask
    return per_cell.sum() * (1.0 / count)


def _alignment_bank(gt_pts: np.ndarray) -> np.ndarray:
    """All 2k cyclic/orientation alignments of a k-point ring: (2k, k, 2)."""
    k = gt_pts.shape[0]
    both = [gt_pts, gt_pts[::-1]]
    bank = np.empty((2 * k, k, 2))
    for oi, ring in enumerate(both):
        for s in range(k):
            bank[oi * k + s] = np.roll(ring, -s, axis=0)
    return bank


def pm_loss_rings(snapshots, gt_ring: np.ndarray) -> Tensor:
    """Point-matching loss against a precomputed k-point ground-truth ring.

    ``snapshots`` lists the refinement states (input first); the input
    state is not scored. See :func:`pm_loss` for the cost definition.
    """
    if len(snapshots) < 2:
        raise InvalidInputError("pm_loss needs the input state plus at least one step")
    gt_ring = np.asarray(gt_ring, dtype=np.float64)
    k = gt_ring.shape[0]
    bank = _alignment_bank(gt_ring)

    terms = []
    for snap in snapshots[1:]:
        t = snap if isinstance(snap, Tensor) else as_tensor(
            snap.points if isinstance(snap, geometry.BoundaryPoints) else np.asarray(snap)
        )
        if t.shape != (k, 2):
            raise InvalidInputError(f"snapshot shape {t.shape} != ({k}, 2)")
        diffs = t.data[None].astype(np.float64) - bank  # (2k, k, 2)
        costs = (diffs ** 2).sum(axis=2).mean(axis=1)
        best = bank[int(np.argmin(costs))].astype(t.data.dtype)
        d = t - best
        terms.append((d * d).sum(axis=1).mean())
    total = terms[0]
    for extra in terms[1:]:
        total = total + extra
    return total * (1.0 / len(terms))


def pm_loss_stacked(snapshots, gt_rings: np.ndarray, banks=None) -> Tensor:
    """Point-matching loss over several proposals refined in one stack.

    ``snapshots`` holds (n * k, 2) tensors (input state first); row block i
    of every snapshot is proposal i, scored against ``gt_rings[i]`` with its
    own best alignment. Because all rings share k, the mean over stacked
    points equals the mean over proposals of each ring's mean squared
    distance. ``banks`` can carry the precomputed (n, 2k, k, 2) alignment
    bank for hot loops.
    """
    if len(snapshots) < 2:
        raise InvalidInputError("pm_loss needs the input state plus at least one step")
    gt_rings = np.asarray(gt_rings, dtype=np.float64)
    n, k, _ = gt_rings.shape
    if banks is None:
        banks = np.stack([_alignment_bank(r) for r in gt_rings])  # (n, 2k, k, 2)

    terms = []
    for snap in snapshots[1:]:
        t = snap if isinstance(snap, Tensor) else as_tensor(np.asarray(snap))
        if t.shape != (n * k, 2):
            raise InvalidInputError(f"snapshot shape {t.shape} != ({n * k}, 2)")
        data = t.data.astype(np.float64).reshape(n, 1, k, 2)
        costs = ((data - banks) ** 2).sum(axis=3).mean(axis=2)  # (n, 2k)
        best = banks[np.arange(n), np.argmin(costs, axis=1)]  # (n, k, 2)
        target = best.reshape(n * k, 2).astype(t.data.dtype)
        d = t - target
        terms.append((d * d).sum(axis=1).mean())
    total = terms[0]
    for extra in terms[1:]:
        total = total + extra
    return total * (1.0 / len(terms))


def pm_loss(snapshots, gt_poly: geometry.Polygon, k: int) -> Tensor:
    """Alignment-invariant point-matching loss, averaged over iterations.

    The ground-truth ring is the polygon resampled to k points. For each
    snapshot after the input state, the cost is the minimum over the 2k
    cyclic-shift / orientation alignments of the mean squared point-to-point
    distance; the best alignment is chosen per evaluation and the gradient
    flows through it as if fixed.
    """
    gt_ring = geometry.resample_polygon(gt_poly, k).points
    return pm_loss_rings(snapshots, gt_ring)


def schedule_factor(weights: LossWeights, epoch: int) -> float:
    """gamma / (1 + exp((epoch - eps) / eps)) with eps the max epoch."""
    if not 0 <= epoch <= weights.eps_epochs:
        raise InvalidInputError(
            f"epoch {epoch} outside [0, {weights.eps_epochs}]"
        )
    eps = float(weights.eps_epochs)
    return weights.gamma / (1.0 + math.exp((epoch - eps) / eps))


def total_loss(parts, weights: LossWeights, epoch: int) -> LossReport:
    """Assemble the scheduled multi-objective report from component values.

    ``parts`` is (l_cls, l_dis, l_dir, l_pm) as floats or scalar Tensors.
    """
    vals = []
    for p in parts:
        v = float(p.data) if isinstance(p, Tensor) else float(p)
        vals.append(v)
    if len(vals) != 4:
        raise InvalidInputError("expected exactly four loss components")
    l_cls, l_dis, l_dir, l_pm = vals
    sf = schedule_factor(weights, epoch)
    total = l_cls + weights.alpha * l_dis + weights.beta * l_dir + sf * l_pm
    return LossReport(
        l_cls=l_cls,
        l_dis=l_dis,
        l_dir=l_dir,
        l_pm=l_pm,
        schedule_factor=sf,
        total=total,
        epoch=epoch,
    )
