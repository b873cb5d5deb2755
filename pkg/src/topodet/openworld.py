"""Open-world helpers: box overlap, unknown-proposal mining, ensemble scoring.

Boxes are center-format ``[x, y, w, h]`` real 4-vectors throughout. Proposal
mining follows the unknown-aware selection rule: among a frame's background
proposals, the top-k by objectness whose overlap with every annotated box
stays at or below a threshold are relabeled as `unknown` training instances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class OpenWorldError(ValueError):
    """Malformed boxes, posteriors, or selection arguments."""


@dataclass(frozen=True)
class Proposal:
    """A class-agnostic region proposal with its objectness score."""

    image_id: int
    objectness: float
    input: tuple[float, ...]
    box: tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.box) != 4:
            raise OpenWorldError("proposal box must be [x, y, w, h]")
        if not np.isfinite(self.objectness) or not 0.0 <= self.objectness <= 1.0:
            raise OpenWorldError("proposal objectness must lie in [0, 1]")

    @property
    def input_array(self) -> np.ndarray:
        return np.asarray(self.input, dtype=np.float64)

    @property
    def box_array(self) -> np.ndarray:
        return np.asarray(self.box, dtype=np.float64)


def box_corners(box) -> tuple[float, float, float, float]:
    """Center-format [x, y, w, h] to (x0, y0, x1, y1)."""
    x, y, w, h = (float(v) for v in box)
    return x - w / 2.0, y - h / 2.0, x + w / 2.0, y + h / 2.0


def iou(box_a, box_b) -> float:
    """Intersection over union of two center-format boxes.

    A box with non-positive width or height has zero area; any overlap with
    it is 0 by definition rather than an error, so degenerate annotations
    never poison a whole evaluation run.
    """
    ax, ay, aw, ah = (float(v) for v in box_a)
    bx, by, bw, bh = (float(v) for v in box_b)
    if aw <= 0.0 or ah <= 0.0 or bw <= 0.0 or bh <= 0.0:
        return 0.0
    ax0, ay0, ax1, ay1 = box_corners(box_a)
    bx0, by0, bx1, by1 = box_corners(box_b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union


def select_unknown_proposals(proposals: Sequence[Proposal], gt_boxes: Sequence,
                             k: int = 1, overlap_thresh: float = 0.0) -> list[int]:
    """Indices of up to k background proposals to relabel as `unknown`.

    A proposal qualifies when its IoU with every ground-truth box is at most
    ``overlap_thresh`` (with no ground truth, everything qualifies). Selection
    is by descending objectness; equal objectness resolves to the earlier
    proposal in the input order. Fewer than k candidates returns them all.
    """
    if k < 0:
        raise OpenWorldError("k must be >= 0")
    if not 0.0 <= overlap_thresh < 1.0:
        raise OpenWorldError("overlap_thresh must lie in [0, 1)")
    candidates = []
    for idx, prop in enumerate(proposals):
        worst = max((iou(prop.box, gt) for gt in gt_boxes), default=0.0)
        if worst <= overlap_thresh:
            candidates.append((-prop.objectness, idx))
    candidates.sort()
    return [idx for _, idx in candidates[:k]]


def ensemble_predict(p_roi: np.ndarray, p_sem: np.ndarray) -> tuple[int, float, np.ndarray]:
    """Combine the two classifier posteriors by elementwise product.

    Returns (slot, score, combined posterior); the winning slot is the argmax
    of the renormalized product, ties resolving to the lower slot index.
    """
    a = np.asarray(p_roi, dtype=np.float64)
    b = np.asarray(p_sem, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise OpenWorldError(f"posterior shapes differ: {a.shape} vs {b.shape}")
    if np.any(a < 0) or np.any(b < 0):
        raise OpenWorldError("posteriors must be non-negative")
    prod = a * b
    total = prod.sum()
    if total <= 0.0:
        raise OpenWorldError("posterior product has no mass to renormalize")
    post = prod / total
    slot = int(np.argmax(post))
    return slot, float(post[slot]), post
