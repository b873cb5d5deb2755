"""Open-world evaluation metrics: mAP, absorption count, wilderness impact.

All metrics consume flat lists of Detection / GroundTruth records; boxes are
center-format [x, y, w, h] and matching uses IoU at a configurable threshold
(0.5 everywhere by default). The label `unknown` marks ground truth outside
the known class set and detections the model itself flags as unknown.

Matching is greedy in descending score order; score ties resolve to the
lower image_id and then to the earlier record in input order, and equal-IoU
candidates resolve to the earlier ground truth.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .openworld import iou
from .topology import UNKNOWN_NAME

DEFAULT_IOU_THRESH = 0.5
DEFAULT_AOSE_SCORE_THRESH = 0.05
DEFAULT_WI_RECALL_LEVEL = 0.8


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    class_name: str
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_name: str
    score: float
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class MapResult:
    per_class: dict[str, float]
    mean: float | None


@dataclass(frozen=True)
class MetricsRecord:
    """One evaluation time point: wilderness impact, absorption count, mAP splits.

    ``wi`` is None when the recall level is unreachable; ``map_prev`` is None
    before any class is previously known (the first task).
    """

    wi: float | None
    a_ose: int
    map_prev: float | None
    map_curr: float | None
    map_both: float | None

    def __post_init__(self):
        if self.a_ose < 0:
            raise MetricsError("a_ose must be >= 0")
        for name in ("map_prev", "map_curr", "map_both"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise MetricsError(f"{name} must lie in [0, 1]")


def _sorted_indices(detections: Sequence[Detection]) -> list[int]:
    # score ties resolve to lower image_id, then input order
    return sorted(range(len(detections)),
                  key=lambda i: (-detections[i].score, detections[i].image_id, i))


def _gt_index(gts: Iterable[GroundTruth]):
    """Group ground truths by (image_id, class_name), keeping input order."""
    by_key: dict[tuple[int, str], list[GroundTruth]] = defaultdict(list)
    for gt in gts:
        by_key[(gt.image_id, gt.class_name)].append(gt)
    return by_key


def _best_match(box, candidates: list[GroundTruth]) -> tuple[int, float]:
    """Index and IoU of the best-overlapping candidate (-1 when empty)."""
    best_idx, best_iou = -1, 0.0
    for j, gt in enumerate(candidates):
        ov = iou(box, gt.box)
        if ov > best_iou:
            best_idx, best_iou = j, ov
    return best_idx, best_iou


def average_precision(recalls: np.ndarray, precisions: np.ndarray,
                      use_11point: bool = False) -> float:
    """AP from a PR curve: all-point interpolation, or the older 11-point mean."""
    rec = np.asarray(recalls, dtype=np.float64)
    prec = np.asarray(precisions, dtype=np.float64)
    if rec.shape != prec.shape:
        raise MetricsError("recall/precision arrays must have equal length")
    if use_11point:
        ap = 0.0
        for t in np.arange(0.0, 1.1, 0.1):
            mask = rec >= t
            ap += (np.max(prec[mask]) if np.any(mask) else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def compute_class_ap(detections: Sequence[Detection], gts: Sequence[GroundTruth],
                     class_name: str, iou_thresh: float = DEFAULT_IOU_THRESH,
                     use_11point: bool = False) -> float | None:
    """AP for one class; None when the class has no ground truth."""
    gt_by_image: dict[int, list[GroundTruth]] = defaultdict(list)
    npos = 0
    for gt in gts:
        if gt.class_name == class_name:
            gt_by_image[gt.image_id].append(gt)
            npos += 1
    if npos == 0:
        return None
    matched: dict[int, list[bool]] = {img: [False] * len(v) for img, v in gt_by_image.items()}

    class_dets = [d for d in detections if d.class_name == class_name]
    order = _sorted_indices(class_dets)
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        det = class_dets[i]
        candidates = gt_by_image.get(det.image_id, [])
        j, ov = _best_match(det.box, candidates)
        if j >= 0 and ov >= iou_thresh and not matched[det.image_id][j]:
            matched[det.image_id][j] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recalls = tp_cum / npos
    precisions = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    return average_precision(recalls, precisions, use_11point=use_11point)


def compute_map(detections: Sequence[Detection], gts: Sequence[GroundTruth],
                classes: Sequence[str] | None = None,
                iou_thresh: float = DEFAULT_IOU_THRESH,
                use_11point: bool = False) -> MapResult:
    """Mean AP over known classes with at least one ground truth.

    ``classes`` defaults to every non-unknown label present in the ground
    truth (sorted). Classes without ground truth contribute no AP and are
    left out of the mean; an empty effective class set yields mean None.
    """
    if classes is None:
        classes = sorted({gt.class_name for gt in gts if gt.class_name != UNKNOWN_NAME})
    per_class: dict[str, float] = {}
    for name in classes:
        if name == UNKNOWN_NAME:
            raise MetricsError("mAP is defined over known classes; drop the unknown label")
        ap = compute_class_ap(detections, gts, name, iou_thresh, use_11point)
        if ap is not None:
            per_class[name] = ap
    mean = float(np.mean(list(per_class.values()))) if per_class else None
    return MapResult(per_class=per_class, mean=mean)


def _known_detections(detections: Sequence[Detection],
                      known_set: Sequence[str] | None) -> list[Detection]:
    """Detections carrying a known-class label; unexpected labels are errors."""
    if known_set is None:
        return [d for d in detections if d.class_name != UNKNOWN_NAME]
    allowed = set(known_set)
    for det in detections:
        if det.class_name != UNKNOWN_NAME and det.class_name not in allowed:
            raise MetricsError(
                f"detection labeled {det.class_name!r} is outside the known set")
    return [d for d in detections if d.class_name != UNKNOWN_NAME]


def compute_aose(detections: Sequence[Detection], gts: Sequence[GroundTruth],
                 known_set: Sequence[str] | None = None,
                 iou_thresh: float = DEFAULT_IOU_THRESH,
                 score_thresh: float = DEFAULT_AOSE_SCORE_THRESH) -> int:
    """Count unknown ground truths absorbed by confident known-class detections.

    Known-labeled detections with score >= score_thresh are matched greedily
    (descending score) against the unmatched unknown ground truths of their
    image; each unknown object is counted at most once. Passing ``known_set``
    additionally rejects detections labeled outside it.
    """
    unknown_by_image: dict[int, list[GroundTruth]] = defaultdict(list)
    for gt in gts:
        if gt.class_name == UNKNOWN_NAME:
            unknown_by_image[gt.image_id].append(gt)
    matched: dict[int, list[bool]] = {img: [False] * len(v) for img, v in unknown_by_image.items()}

    known_dets = [d for d in _known_detections(detections, known_set)
                  if d.score >= score_thresh]
    absorbed = 0
    for i in _sorted_indices(known_dets):
        det = known_dets[i]
        candidates = unknown_by_image.get(det.image_id, [])
        free = [j for j in range(len(candidates)) if not matched[det.image_id][j]]
        best_j, best_iou = -1, 0.0
        for j in free:
            ov = iou(det.box, candidates[j].box)
            if ov > best_iou:
                best_j, best_iou = j, ov
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[det.image_id][best_j] = True
            absorbed += 1
    return absorbed


def compute_wi(detections: Sequence[Detection], gts: Sequence[GroundTruth],
               known_set: Sequence[str] | None = None,
               iou_thresh: float = DEFAULT_IOU_THRESH,
               recall_level: float = DEFAULT_WI_RECALL_LEVEL) -> float | None:
    """Wilderness impact: relative precision drop when unknowns enter the pool.

    Known-labeled detections are walked in descending score order and each is
    classified once: true positive (matches an unmatched same-class ground
    truth), open false positive (overlaps an unknown ground truth), or closed
    false positive. At the shortest prefix whose pooled known recall reaches
    ``recall_level`` this returns P_K / P_KU - 1 where P_K = tp / (tp + fp_closed)
    and P_KU = tp / (tp + fp_closed + fp_open), i.e. fp_open / (tp + fp_closed).
    None when recall never reaches the level or there is no known ground truth.
    """
    known_gts = _gt_index(gt for gt in gts if gt.class_name != UNKNOWN_NAME)
    matched = {key: [False] * len(v) for key, v in known_gts.items()}
    unknown_by_image: dict[int, list[GroundTruth]] = defaultdict(list)
    for gt in gts:
        if gt.class_name == UNKNOWN_NAME:
            unknown_by_image[gt.image_id].append(gt)
    npos = sum(len(v) for v in known_gts.values())
    if npos == 0:
        return None

    known_dets = _known_detections(detections, known_set)
    tp = fp_closed = fp_open = 0
    for i in _sorted_indices(known_dets):
        det = known_dets[i]
        key = (det.image_id, det.class_name)
        candidates = known_gts.get(key, [])
        j, ov = _best_match(det.box, candidates)
        if j >= 0 and ov >= iou_thresh and not matched[key][j]:
            matched[key][j] = True
            tp += 1
        else:
            _, unk_ov = _best_match(det.box, unknown_by_image.get(det.image_id, []))
            if unk_ov >= iou_thresh:
                fp_open += 1
            else:
                fp_closed += 1
        if tp / npos >= recall_level:
            return fp_open / (tp + fp_closed)
    return None
