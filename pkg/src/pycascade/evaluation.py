"""
Evaluation for long-tailed detection and pseudo-label quality.

Precision/recall at fixed confidence thresholds, COCO-style interpolated
average precision, Fixed AP (a dataset-wide per-class detection cap instead
of a per-image one) aggregated per class group, pseudo-label accuracy audits
against hidden ground truth, and retained pseudo-label counts.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .apm import FixedThresholds, ThresholdSchedule
from .core import (
    Annotation,
    AuditError,
    ClassIndex,
    ConfigError,
    ConfigMixin,
    DatasetBundle,
    DetectionRecord,
    GroupScheme,
    group_names,
)
from .cpl import PseudoBox, PseudoLabelSet, ensemble, group_by_proposal, head_pseudo_boxes, unlabeled_batch
from .geometry import greedy_match_boxes

logger = logging.getLogger(__name__)

# 101 recall points of COCO-style interpolation
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_TAU_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)
FEDERATED_NOTE = (
    "Per-image negative-category metadata is ignored; every unmatched detection counts as a false positive."
)


@dataclass(frozen=True)
class EvalConfig(ConfigMixin):
    """
    Evaluation settings.

    Args:
        iou_threshold: IoU for PR curves, pseudo accuracy and the default AP
        profile: ``"default"`` (AP at ``iou_threshold``) or ``"coco"`` (AP averaged over 0.5:0.95)
        cap_per_class: Dataset-wide detections kept per class for Fixed AP
        tau_grid: Fixed confidence thresholds for PR curves
        group_scheme: ``"lvis3"`` or ``"cocolt4"``
    """
    iou_threshold: float = 0.5
    profile: str = "default"
    cap_per_class: int = 10000
    tau_grid: tuple[float, ...] = DEFAULT_TAU_GRID
    group_scheme: str = "lvis3"

    def __post_init__(self) -> None:
        if self.profile not in ("default", "coco"):
            raise ConfigError(f"profile must be 'default' or 'coco', got {self.profile!r}")
        if self.cap_per_class < 1:
            raise ConfigError("cap_per_class must be >= 1")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError("iou_threshold must lie in (0, 1]")
        try:
            GroupScheme(self.group_scheme)
        except ValueError:
            raise ConfigError(f"Unknown group scheme {self.group_scheme!r}") from None

    @property
    def iou_thresholds(self) -> tuple[float, ...]:
        return COCO_IOU_THRESHOLDS if self.profile == "coco" else (self.iou_threshold,)


def _slot_of(annotation: Annotation, class_index: ClassIndex | None) -> int:
    return class_index.slot(annotation.category_id) if class_index else annotation.category_id


def _cells(
    detections: Sequence[DetectionRecord],
    annotations: Sequence[Annotation],
    class_index: ClassIndex | None,
    class_aware: bool = True,
) -> dict[tuple[int, int], tuple[list[int], list[int]]]:
    """Indices of detections and annotations per (image, class) cell."""
    cells: dict[tuple[int, int], tuple[list[int], list[int]]] = {}
    for i, d in enumerate(detections):
        key = (d.image_id, d.label if class_aware else 0)
        cells.setdefault(key, ([], []))[0].append(i)
    for j, a in enumerate(annotations):
        key = (a.image_id, _slot_of(a, class_index) if class_aware else 0)
        cells.setdefault(key, ([], []))[1].append(j)
    return cells


def true_positive_flags(
    detections: Sequence[DetectionRecord],
    annotations: Sequence[Annotation],
    iou_threshold: float,
    class_index: ClassIndex | None = None,
) -> list[bool]:
    """Whether each detection is greedily matched within its (image, class) cell."""
    flags = [False] * len(detections)
    for det_idx, gt_idx in _cells(detections, annotations, class_index).values():
        if not det_idx or not gt_idx:
            continue
        result = greedy_match_boxes(
            [detections[i].box for i in det_idx],
            [detections[i].score for i in det_idx],
            [annotations[j].box for j in gt_idx],
            iou_threshold,
        )
        for d, _, _ in result.pairs:
            flags[det_idx[d]] = True
    return flags


def pr_at_threshold(
    detections: Sequence[DetectionRecord],
    annotations: Sequence[Annotation],
    score_threshold: float,
    iou_threshold: float = 0.5,
    class_index: ClassIndex | None = None,
) -> tuple[float, float]:
    """
    Precision and recall of the detections scoring at least ``score_threshold``.

    Matching is greedy per image and class. Precision is 1.0 when no
    detection survives the threshold and recall is 1.0 when there are no
    annotations.

    Examples:
        >>> from pycascade.core import BBox
        >>> det = DetectionRecord(1, 1, (0.9, 0.1), BBox(0, 0, 2, 2))
        >>> gt = Annotation(1, 1, 0, BBox(0, 0, 2, 2))
        >>> pr_at_threshold([det], [gt], 0.5)
        (1.0, 1.0)
        >>> pr_at_threshold([], [gt], 0.5)
        (1.0, 0.0)
    """
    kept = [d for d in detections if d.score >= score_threshold]
    tp = sum(true_positive_flags(kept, annotations, iou_threshold, class_index))
    precision = tp / len(kept) if kept else 1.0
    recall = tp / len(annotations) if annotations else 1.0
    return precision, recall


@dataclass(frozen=True)
class PRPoint:
    tau: float
    precision: float
    recall: float


def pr_curve(
    detections: Sequence[DetectionRecord],
    annotations: Sequence[Annotation],
    grid: Sequence[float] = DEFAULT_TAU_GRID,
    iou_threshold: float = 0.5,
    class_index: ClassIndex | None = None,
) -> list[PRPoint]:
    """Precision and recall at every fixed threshold of ``grid``."""
    return [
        PRPoint(tau, *pr_at_threshold(detections, annotations, tau, iou_threshold, class_index))
        for tau in grid
    ]


def interpolated_ap(ranked_tp: Sequence[bool], num_annotations: int) -> float:
    """
    101-point interpolated AP of a ranked list of TP/FP flags.

    Precision is replaced by its running maximum from the right, then read
    at the first rank reaching each recall point; recall points beyond the
    last reached recall contribute zero.
    """
    if num_annotations == 0:
        return math.nan
    if not ranked_tp:
        return 0.0
    tp = np.cumsum(np.asarray(ranked_tp, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(ranked_tp, dtype=float))
    recall = tp / num_annotations
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    inds = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
    sampled = np.where(inds < len(envelope), envelope[np.minimum(inds, len(envelope) - 1)], 0.0)
    return float(np.mean(sampled))


def rank(detections: Sequence[DetectionRecord]) -> list[int]:
    """Indices by descending score, lower index first on ties."""
    return sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))


def average_precision(
    detections: Sequence[DetectionRecord],
    annotations: Sequence[Annotation],
    iou_threshold: float | Sequence[float] = 0.5,
) -> float:
    """
    Interpolated average precision of one class.

    All inputs are treated as the same class; images are matched separately.
    With a sequence of IoU thresholds the AP is averaged over them.

    Returns:
        AP in ``[0, 1]``, or NaN when there are no annotations

    Examples:
        >>> from pycascade.core import BBox
        >>> det = DetectionRecord(1, 1, (0.9, 0.1), BBox(0, 0, 2, 2))
        >>> average_precision([det], [Annotation(1, 1, 0, BBox(0, 0, 2, 2))])
        1.0
    """
    thresholds = [iou_threshold] if isinstance(iou_threshold, (int, float)) else list(iou_threshold)
    if not annotations:
        return math.nan
    order = rank(detections)
    ranked = [detections[i] for i in order]
    values = []
    for thr in thresholds:
        flags = [False] * len(ranked)
        cells = _cells(ranked, annotations, None, class_aware=False)
        for det_idx, gt_idx in cells.values():
            if not det_idx or not gt_idx:
                continue
            result = greedy_match_boxes(
                [ranked[i].box for i in det_idx],
                [-float(i) for i in det_idx],
                [annotations[j].box for j in gt_idx],
                float(thr),
            )
            for d, _, _ in result.pairs:
                flags[det_idx[d]] = True
        values.append(interpolated_ap(flags, len(annotations)))
    return float(np.mean(values))


@dataclass(frozen=True)
class FixedAPResult:
    ap_overall: float
    ap_per_group: dict[str, float | None]
    ap_per_class: dict[int, float]
    excluded_classes: list[int]
    cap_per_class: int


def fixed_ap(
    detections: Sequence[DetectionRecord],
    bundle: DatasetBundle,
    cap_per_class: int = 10000,
    iou_threshold: float | Sequence[float] = 0.5,
) -> FixedAPResult:
    """
    Fixed AP: per-class AP with a dataset-wide detection cap.

    Detections are attributed to their top class. For each class the
    ``cap_per_class`` highest-scoring detections over the whole dataset are
    kept, with no per-image limit. Classes without annotations are excluded
    from every mean and listed separately. Group values are means over member
    classes, the overall value the mean over all evaluated classes.

    Args:
        detections: Detections pooled over the dataset
        bundle: Ground truth with class groups assigned
        cap_per_class: Detections kept per class
        iou_threshold: IoU threshold, or a sequence to average over

    Returns:
        Per-class, per-group and overall AP (category ids as keys)
    """
    index = bundle.class_index
    annotations = bundle.audit_annotations()
    gts_by_slot: dict[int, list[Annotation]] = {}
    for a in annotations:
        gts_by_slot.setdefault(index.slot(a.category_id), []).append(a)
    dets_by_slot: dict[int, list[DetectionRecord]] = {}
    for d in detections:
        dets_by_slot.setdefault(d.label, []).append(d)

    per_class: dict[int, float] = {}
    excluded: list[int] = []
    for slot, category_id in enumerate(index.category_ids):
        gts = gts_by_slot.get(slot, [])
        if not gts:
            excluded.append(category_id)
            continue
        dets = dets_by_slot.get(slot, [])
        capped = [dets[i] for i in rank(dets)[:cap_per_class]]
        per_class[category_id] = average_precision(capped, gts, iou_threshold)

    groups = {c.id: c.group for c in bundle.categories}
    names = group_names(bundle.group_scheme) if bundle.group_scheme else tuple(sorted(set(groups.values())))
    per_group: dict[str, float | None] = {}
    for name in names:
        members = [ap for cid, ap in per_class.items() if groups.get(cid) == name]
        per_group[name] = float(np.mean(members)) if members else None
    overall = float(np.mean(list(per_class.values()))) if per_class else math.nan
    if excluded:
        logger.info("Classes without annotations excluded from AP: %s", excluded)
    return FixedAPResult(overall, per_group, per_class, excluded, cap_per_class)


def audit_sources(
    records: Iterable[DetectionRecord],
    schedule: ThresholdSchedule,
    stage: int = 1,
    nms_threshold: float | None = None,
) -> dict[str, list[PseudoBox]]:
    """
    Pseudo-labels of every single head and of the ensemble teacher.

    Each source is gated at the same ``stage`` of ``schedule``.
    """
    records = list(records)
    sources = {
        f"head_{k}": head_pseudo_boxes(records, schedule, k, stage)
        for k in range(1, schedule.num_stages + 1)
    }
    sources["ensemble"] = unlabeled_batch(records, schedule, nms_threshold).pseudo_boxes(stage)
    return sources


def source_accuracy(
    boxes: Sequence[PseudoBox],
    hidden: Sequence[Annotation],
    class_index: ClassIndex | None,
    iou_threshold: float = 0.5,
) -> tuple[int, int]:
    """``(correct, total)`` for one pseudo-label source."""
    by_image: dict[int, tuple[list[PseudoBox], list[Annotation]]] = {}
    for b in boxes:
        by_image.setdefault(b.image_id, ([], []))[0].append(b)
    for a in hidden:
        if a.image_id in by_image:
            by_image[a.image_id][1].append(a)
    correct = 0
    for preds, gts in by_image.values():
        if not gts:
            continue
        result = greedy_match_boxes(
            [p.box for p in preds], [p.score for p in preds], [g.box for g in gts], iou_threshold
        )
        correct += sum(1 for d, g, _ in result.pairs if preds[d].label == _slot_of(gts[g], class_index))
    return correct, len(boxes)


def pseudo_accuracy(
    sources: Mapping[str, Sequence[PseudoBox]] | PseudoLabelSet,
    hidden: Sequence[Annotation] | None,
    class_index: ClassIndex | None = None,
    iou_threshold: float = 0.5,
) -> dict[str, float]:
    """
    Fraction of each source's pseudo-labels that hit a ground-truth box of their class.

    Pseudo-labels are greedily matched to the hidden annotations of their
    image regardless of class; a pseudo-label is correct when it is matched
    and the classes agree. A source without pseudo-labels scores 1.0.

    Args:
        sources: Pseudo-labels per source name, or a set audited per stage
        hidden: Hidden ground truth of the unlabeled split
        class_index: Category id to slot mapping of the annotations
        iou_threshold: Minimum IoU of a match

    Raises:
        AuditError: If no hidden ground truth is available
    """
    if hidden is None:
        raise AuditError("Pseudo-label accuracy needs hidden ground truth")
    if isinstance(sources, PseudoLabelSet):
        sources = {f"stage_{k}": sources.pseudo_boxes(k) for k in range(1, sources.num_stages + 1)}
    out: dict[str, float] = {}
    for name, boxes in sources.items():
        correct, total = source_accuracy(boxes, hidden, class_index, iou_threshold)
        out[name] = correct / total if total else 1.0
    return out


def retained_counts(pseudo: PseudoLabelSet, class_index: ClassIndex) -> dict[int, list[int]]:
    """Retained pseudo-labels per category id, one count per stage."""
    table = pseudo.retained_counts(class_index.num_classes)
    return {
        class_index.category_id(slot): [table[k][slot] for k in range(pseudo.num_stages)]
        for slot in range(class_index.num_classes)
    }


@dataclass(frozen=True)
class RetentionRow:
    schedule: str
    retained_per_group: dict[str, int]
    retained: int
    precision: float


def retention_comparison(
    records: Sequence[DetectionRecord],
    store: ThresholdSchedule,
    hidden: Sequence[Annotation],
    bundle: DatasetBundle,
    grid: Sequence[float] = DEFAULT_TAU_GRID,
    stage: int = 1,
    iou_threshold: float = 0.5,
) -> list[RetentionRow]:
    """
    Retained pseudo-labels per class group under APM and under each fixed tau.

    The first row is the adaptive schedule, followed by one row per fixed
    threshold. Precision is the pseudo-label accuracy of the retained set.
    """
    index = bundle.class_index
    group_of = {index.slot(c.id): c.group for c in bundle.categories}
    names = group_names(bundle.group_scheme) if bundle.group_scheme else tuple(sorted(set(group_of.values())))
    schedules: list[tuple[str, ThresholdSchedule]] = [("apm", store)]
    schedules += [(f"tau={tau:g}", FixedThresholds.uniform(tau, store.num_stages)) for tau in grid]
    rows = []
    for name, schedule in schedules:
        boxes = unlabeled_batch(records, schedule, None).pseudo_boxes(stage)
        per_group = {g: 0 for g in names}
        for b in boxes:
            per_group[group_of[b.label]] = per_group.get(group_of[b.label], 0) + 1
        correct, total = source_accuracy(boxes, hidden, index, iou_threshold)
        rows.append(RetentionRow(name, per_group, total, correct / total if total else 1.0))
    return rows


def best_fixed_at_precision(rows: Sequence[RetentionRow], precision: float) -> RetentionRow | None:
    """The fixed-tau row retaining the most pseudo-labels at no lower precision."""
    candidates = [r for r in rows if r.schedule != "apm" and r.precision >= precision]
    if not candidates:
        return None
    return max(candidates, key=lambda r: (r.retained, -rows.index(r)))


def collapse_stages(records: Sequence[DetectionRecord], stage: int | None = None) -> list[DetectionRecord]:
    """
    Reduce multi-stage records to one record per proposal.

    With ``stage`` given only that stage's records are kept; otherwise
    records of several stages are ensembled per proposal and single-stage
    input is returned unchanged.
    """
    if stage is not None:
        return [r for r in records if r.stage == stage]
    if len({r.stage for r in records}) <= 1:
        return list(records)
    return [ensemble(group).as_record() for group in group_by_proposal(records).values()]


@dataclass
class EvalReport:
    """All metrics of one evaluation run, serializable to JSON and CSV."""
    ap_overall: float
    ap_per_group: dict[str, float | None]
    ap_per_class: dict[int, float] = field(default_factory=dict)
    excluded_classes: list[int] = field(default_factory=list)
    pr_curve: list[PRPoint] = field(default_factory=list)
    pseudo_accuracy: dict[str, float] = field(default_factory=dict)
    retained_counts: dict[int, list[int]] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)
    notes: list[str] = field(default_factory=lambda: [FEDERATED_NOTE])

    def to_dict(self) -> dict[str, Any]:
        def clean(value: float | None) -> float | None:
            return None if value is None or math.isnan(value) else value

        return {
            "ap_overall": clean(self.ap_overall),
            "ap_per_group": {k: clean(v) for k, v in self.ap_per_group.items()},
            "ap_per_class": {str(k): clean(v) for k, v in self.ap_per_class.items()},
            "excluded_classes": list(self.excluded_classes),
            "pr_curve": [{"tau": p.tau, "precision": p.precision, "recall": p.recall} for p in self.pr_curve],
            "pseudo_accuracy": dict(self.pseudo_accuracy),
            "retained_counts": {str(k): v for k, v in self.retained_counts.items()},
            "config": dict(self.config),
            "notes": list(self.notes),
        }

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    def rows(self) -> list[tuple[str, str, Any]]:
        """Flat ``(metric, key, value)`` rows."""
        data = self.to_dict()
        out: list[tuple[str, str, Any]] = [("ap_overall", "", data["ap_overall"])]
        out += [("ap_group", k, v) for k, v in data["ap_per_group"].items()]
        out += [("ap_class", k, v) for k, v in data["ap_per_class"].items()]
        out += [("pseudo_accuracy", k, v) for k, v in data["pseudo_accuracy"].items()]
        for p in self.pr_curve:
            out += [("precision", f"{p.tau:g}", p.precision), ("recall", f"{p.tau:g}", p.recall)]
        for k, counts in data["retained_counts"].items():
            out += [(f"retained_stage_{s}", k, c) for s, c in enumerate(counts, start=1)]
        return out

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["metric", "key", "value"])
            writer.writerows(self.rows())
        return path

    def pr_to_csv(self, path: str | Path) -> Path:
        """Plot-ready ``tau,precision,recall`` rows."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["tau", "precision", "recall"])
            writer.writerows((p.tau, p.precision, p.recall) for p in self.pr_curve)
        return path


def evaluate(
    detections: Sequence[DetectionRecord],
    bundle: DatasetBundle,
    config: EvalConfig | None = None,
    pseudo: PseudoLabelSet | None = None,
    unlabeled: DatasetBundle | None = None,
) -> EvalReport:
    """
    Fixed AP per group plus the fixed-threshold PR curve of a detection set.

    When a gated pseudo-label set is passed, its per-class retained counts are
    reported too, and its per-stage accuracy when ``unlabeled`` carries hidden
    ground truth.

    Args:
        detections: One record per detection (see :func:`collapse_stages`)
        bundle: Ground truth with class groups
        config: Evaluation settings
        pseudo: Pseudo-labels gated on the unlabeled split
        unlabeled: The unlabeled bundle the pseudo-labels were gated on

    Returns:
        The report, with the effective config echoed
    """
    config = config or EvalConfig()
    result = fixed_ap(detections, bundle, config.cap_per_class, config.iou_thresholds)
    curve = pr_curve(
        detections, bundle.audit_annotations(), config.tau_grid, config.iou_threshold, bundle.class_index
    )
    logger.info("Evaluated %d detections: AP^Fix %.4f", len(detections), result.ap_overall)
    report = EvalReport(
        ap_overall=result.ap_overall,
        ap_per_group=result.ap_per_group,
        ap_per_class=result.ap_per_class,
        excluded_classes=result.excluded_classes,
        pr_curve=curve,
        config=config.to_dict(),
    )
    if pseudo is not None:
        index = (unlabeled or bundle).class_index
        report.retained_counts = retained_counts(pseudo, index)
        if unlabeled is not None and unlabeled.has_hidden_annotations:
            report.pseudo_accuracy = pseudo_accuracy(
                pseudo, unlabeled.audit_annotations(), index, config.iou_threshold
            )
        else:
            logger.warning("No hidden ground truth for the pseudo-labels; accuracy not reported")
    return report
