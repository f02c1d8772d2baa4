"""
Box geometry for pycascade.

Overlap measures, per-class non-maximum suppression and the greedy
detection-to-ground-truth matching shared by the losses, the pseudo-label
audit and the evaluation suite.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .core import Annotation, BBox, DetectionRecord


def intersection_area(a: BBox, b: BBox) -> float:
    """Area of the overlap of two boxes, 0 when they are disjoint."""
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def hull_area(a: BBox, b: BBox) -> float:
    """Area of the smallest box enclosing both boxes."""
    w = max(a.x_max, b.x_max) - min(a.x_min, b.x_min)
    h = max(a.y_max, b.y_max) - min(a.y_min, b.y_min)
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """
    Intersection over union of two boxes.

    A zero-area box has IoU 0 against anything, itself included.

    Examples:
        >>> iou(BBox(0, 0, 2, 2), BBox(0, 0, 2, 2))
        1.0
        >>> round(iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)), 6)
        0.142857
    """
    if a.area <= 0 or b.area <= 0:
        return 0.0
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def giou(a: BBox, b: BBox) -> float:
    """
    Generalized IoU: ``iou - (hull - union) / hull``, in ``[-1, 1]``.

    Examples:
        >>> giou(BBox(0, 0, 1, 1), BBox(1, 1, 2, 2))
        -0.5
    """
    hull = hull_area(a, b)
    if hull <= 0:
        return 0.0
    union = a.area + b.area - intersection_area(a, b)
    return iou(a, b) - (hull - union) / hull


def pairwise_iou(boxes_a: Sequence[BBox], boxes_b: Sequence[BBox]) -> np.ndarray:
    """IoU matrix of shape ``(len(boxes_a), len(boxes_b))``."""
    out = np.zeros((len(boxes_a), len(boxes_b)), dtype=float)
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou(a, b)
    return out


def nms_indices(
    boxes: Sequence[BBox],
    scores: Sequence[float],
    labels: Sequence[int],
    iou_threshold: float,
) -> list[int]:
    """
    Greedy per-class suppression over parallel box/score/label sequences.

    Candidates are visited by descending score, lower index first on ties. A
    candidate is dropped when it overlaps an already kept box of the same
    label with IoU above ``iou_threshold``.

    Returns:
        Indices of the survivors in ascending order
    """
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(
            labels[j] != labels[i] or iou(boxes[i], boxes[j]) <= iou_threshold for j in kept
        ):
            kept.append(i)
    return sorted(kept)


def nms(records: Sequence[DetectionRecord], iou_threshold: float) -> list[DetectionRecord]:
    """
    Non-maximum suppression of one image's records, per class.

    Args:
        records: Records from a single image
        iou_threshold: Overlap above which the lower-scored record is removed

    Returns:
        The surviving records in input order

    Examples:
        >>> a = DetectionRecord(1, 1, (0.9, 0.1), BBox(0, 0, 2, 2))
        >>> b = DetectionRecord(1, 1, (0.8, 0.2), BBox(0, 0, 2, 2))
        >>> nms([a, b], 0.5) == [a]
        True
    """
    keep = nms_indices(
        [r.box for r in records], [r.score for r in records], [r.label for r in records], iou_threshold
    )
    return [records[i] for i in keep]


@dataclass(frozen=True)
class MatchResult:
    """Outcome of greedy matching: index pairs and the leftovers on both sides."""
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)
    unmatched_annotations: list[int] = field(default_factory=list)

    @property
    def true_positives(self) -> int:
        return len(self.pairs)


def greedy_match_boxes(
    det_boxes: Sequence[BBox],
    det_scores: Sequence[float],
    gt_boxes: Sequence[BBox],
    iou_threshold: float,
) -> MatchResult:
    """
    Greedy matching on raw boxes and scores.

    Detections are visited by descending score, lower index first on ties.
    Each takes the still unmatched ground-truth box with the highest IoU that
    is at least ``iou_threshold``; ties go to the lowest ground-truth index.
    """
    overlaps = pairwise_iou(det_boxes, gt_boxes)
    taken = [False] * len(gt_boxes)
    pairs: list[tuple[int, int, float]] = []
    unmatched: list[int] = []
    for d in sorted(range(len(det_boxes)), key=lambda i: (-det_scores[i], i)):
        best, best_iou = -1, -1.0
        for g in range(len(gt_boxes)):
            if taken[g]:
                continue
            value = float(overlaps[d, g])
            if value >= iou_threshold and value > best_iou:
                best, best_iou = g, value
        if best < 0:
            unmatched.append(d)
        else:
            taken[best] = True
            pairs.append((d, best, best_iou))
    return MatchResult(
        pairs=pairs,
        unmatched_detections=sorted(unmatched),
        unmatched_annotations=[g for g, used in enumerate(taken) if not used],
    )


def greedy_match(
    detections: Sequence[DetectionRecord],
    annotations: Sequence[Annotation],
    iou_threshold: float,
) -> MatchResult:
    """
    COCO-style greedy matching of one image's detections of one class.

    Args:
        detections: Detection records, ranked by their score
        annotations: Ground truth of the same image and class
        iou_threshold: Minimum IoU of a pair

    Returns:
        A :class:`MatchResult` whose indices refer to the input sequences
    """
    return greedy_match_boxes(
        [d.box for d in detections],
        [d.score for d in detections],
        [a.box for a in annotations],
        iou_threshold,
    )
