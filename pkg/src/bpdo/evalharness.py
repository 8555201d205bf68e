"""Detection scoring: greedy IoU matching, precision/recall/F, diagnostics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import InvalidInputError
from .geometry import BoundaryPoints, Polygon


@dataclass
class EvalReport:
    precision: float
    recall: float
    f_measure: float
    n_gt: int
    n_pred: int
    n_matched: int
    iou_threshold: float
    per_scene: list = field(default_factory=list)

    def as_dict(self):
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f_measure": self.f_measure,
            "n_gt": self.n_gt,
            "n_pred": self.n_pred,
            "n_matched": self.n_matched,
            "iou_threshold": self.iou_threshold,
            "per_scene": self.per_scene,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


def _prf(matched, n_pred, n_gt):
    precision = matched / n_pred if n_pred > 0 else 0.0
    recall = matched / n_gt if n_gt > 0 else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f


def evaluate(preds, gts, iou_threshold=0.5, resolution=512) -> EvalReport:
    """Score predictions against ground truth with greedy IoU matching.

    Args:
        preds: mapping scene_id -> list of predicted Polygons.
        gts: mapping scene_id -> list of (Polygon, ignore) pairs; ignored
            instances are do-not-care regions.
        iou_threshold: minimum IoU for a pair to count as a match.

    Matching is one-to-one in descending IoU order, ties broken by lower
    prediction index then lower ground-truth index. Predictions whose match
    is a do-not-care instance are excluded from the precision denominator;
    do-not-care instances never count toward recall. Counts are summed over
    scenes before computing the final precision/recall/F.
    """
    if set(preds.keys()) != set(gts.keys()):
        missing = set(preds) ^ set(gts)
        raise InvalidInputError(f"scene ids misaligned between preds and gts: {missing}")

    total_matched = 0
    total_preds_counted = 0
    total_gts_counted = 0
    per_scene = []
    for sid in sorted(preds.keys()):
        scene_preds = list(preds[sid])
        scene_gts = list(gts[sid])
        n_p = len(scene_preds)
        pairs = []
        for pi, pp in enumerate(scene_preds):
            for gi, (gp, _ignore) in enumerate(scene_gts):
                iou = geometry.polygon_iou(pp, gp, resolution=resolution)
                if iou >= iou_threshold:
                    pairs.append((-iou, pi, gi))
        pairs.sort()
        used_p = set()
        used_g = set()
        matched = 0
        pred_hit_ignore = 0
        for neg_iou, pi, gi in pairs:
            if pi in used_p or gi in used_g:
                continue
            used_p.add(pi)
            used_g.add(gi)
            if scene_gts[gi][1]:
                pred_hit_ignore += 1
            else:
                matched += 1
        gts_counted = sum(1 for _p, ignore in scene_gts if not ignore)
        preds_counted = n_p - pred_hit_ignore
        total_matched += matched
        total_preds_counted += preds_counted
        total_gts_counted += gts_counted
        p, r, f = _prf(matched, preds_counted, gts_counted)
        per_scene.append(
            {
                "scene_id": sid,
                "n_gt": gts_counted,
                "n_pred": preds_counted,
                "n_matched": matched,
                "precision": p,
                "recall": r,
                "f_measure": f,
            }
        )

    precision, recall, f = _prf(total_matched, total_preds_counted, total_gts_counted)
    return EvalReport(
        precision=precision,
        recall=recall,
        f_measure=f,
        n_gt=total_gts_counted,
        n_pred=total_preds_counted,
        n_matched=total_matched,
        iou_threshold=iou_threshold,
        per_scene=per_scene,
    )


def boundary_error(pred_pts: BoundaryPoints, gt_poly: Polygon) -> float:
    """Mean distance from each predicted point to the ground-truth boundary.

    Distance is the exact point-to-segment minimum over the polygon's edges.
    """
    if not isinstance(gt_poly, Polygon):
        raise InvalidInputError("gt_poly must be a Polygon")
    pts = pred_pts.points if isinstance(pred_pts, BoundaryPoints) else np.asarray(pred_pts)
    v = gt_poly.vertices
    a = v
    b = np.roll(v, -1, axis=0)
    ab = b - a  # (E, 2)
    ab_len2 = (ab ** 2).sum(axis=1)
    ab_len2 = np.where(ab_len2 > 0, ab_len2, 1.0)

    ap = pts[:, None, :] - a[None, :, :]  # (K, E, 2)
    t = np.clip((ap * ab[None]).sum(axis=2) / ab_len2[None], 0.0, 1.0)
    closest = a[None] + t[:, :, None] * ab[None]
    d = np.hypot(*(pts[:, None, :] - closest).transpose(2, 0, 1))
    return float(d.min(axis=1).mean())
