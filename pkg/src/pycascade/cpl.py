"""
Cascade pseudo-labeling.

The K stage predictions of one unlabeled proposal are averaged into a teacher
target, which is then gated per stage against a threshold schedule: a target
is kept at stage ``k`` when its top foreground confidence reaches the stage
threshold of its predicted class.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum

from .apm import ThresholdSchedule
from .core import AlignmentError, BBox, DetectionRecord, ScoreSemantics
from .geometry import nms_indices

logger = logging.getLogger(__name__)


class TeacherMode(Enum):
    """Where the pseudo-label of each head comes from."""
    ENSEMBLE = "ensemble"
    SELF_PER_HEAD = "self_per_head"


@dataclass(frozen=True)
class TeacherTarget:
    """
    Teacher prediction for one unlabeled proposal.

    Examples:
        >>> t = TeacherTarget(1, 0, (0.6, 0.4), BBox(0, 0, 3, 3))
        >>> t.q_t, t.y_hat, t.is_background
        (0.6, 0, False)
    """
    image_id: int
    proposal_id: int
    p_t: tuple[float, ...]
    b_t: BBox
    semantics: ScoreSemantics = ScoreSemantics.SOFTMAX

    @property
    def q_t(self) -> float:
        """Maximum foreground probability."""
        return max(self.p_t[:-1])

    @property
    def y_hat(self) -> int:
        """Foreground slot of ``q_t``, lowest slot on ties."""
        fg = self.p_t[:-1]
        return fg.index(max(fg))

    @property
    def is_background(self) -> bool:
        """Whether the background slot beats every foreground slot."""
        return self.p_t[-1] > self.q_t

    @classmethod
    def from_record(cls, record: DetectionRecord) -> TeacherTarget:
        """A single head's prediction used as its own teacher."""
        return cls(record.image_id, record.proposal_id, record.class_probs, record.box, record.semantics)

    def as_record(self, stage: int = 1) -> DetectionRecord:
        return DetectionRecord(
            image_id=self.image_id,
            stage=stage,
            class_probs=self.p_t,
            box=self.b_t,
            proposal_id=self.proposal_id,
            semantics=self.semantics,
        )


def ensemble(stage_records: Sequence[DetectionRecord], num_stages: int | None = None) -> TeacherTarget:
    """
    Average the aligned stage predictions of one proposal.

    ``p_t`` is the element-wise mean of the stage probability vectors and
    ``b_t`` the coordinate-wise mean of the stage boxes. The result does not
    depend on the order of ``stage_records``.

    Args:
        stage_records: One record per stage, all for the same image and proposal
        num_stages: Expected number of stages, if known

    Raises:
        AlignmentError: On a wrong record count, mixed images or proposals,
            repeated stages, mixed score semantics or vector lengths

    Examples:
        >>> a = DetectionRecord(1, 1, (0.7, 0.3), BBox(0, 0, 2, 2), proposal_id=5)
        >>> b = DetectionRecord(1, 2, (0.5, 0.5), BBox(0, 0, 4, 4), proposal_id=5)
        >>> t = ensemble([a, b])
        >>> t.p_t, t.b_t.as_tuple()
        ((0.6, 0.4), (0.0, 0.0, 3.0, 3.0))
    """
    if not stage_records:
        raise AlignmentError("Cannot ensemble an empty set of stage records")
    if num_stages is not None and len(stage_records) != num_stages:
        raise AlignmentError(f"Expected {num_stages} stage records, got {len(stage_records)}")
    records = sorted(stage_records, key=lambda r: r.stage)
    first = records[0]
    if len({r.stage for r in records}) != len(records):
        raise AlignmentError(f"Repeated stages for proposal {first.proposal_id}")
    for r in records[1:]:
        if r.image_id != first.image_id:
            raise AlignmentError(f"Stage records span images {first.image_id} and {r.image_id}")
        if r.proposal_id != first.proposal_id:
            raise AlignmentError(f"Stage records span proposals {first.proposal_id} and {r.proposal_id}")
        if r.semantics is not first.semantics:
            raise AlignmentError("Stage records mix score semantics")
        if len(r.class_probs) != len(first.class_probs):
            raise AlignmentError("Stage records have different class counts")
    k = len(records)
    p_t = tuple(math.fsum(column) / k for column in zip(*(r.class_probs for r in records)))
    return TeacherTarget(first.image_id, first.proposal_id, p_t, BBox.mean([r.box for r in records]), first.semantics)


@dataclass(frozen=True)
class PseudoBox:
    """A retained pseudo-label reduced to what audits need."""
    image_id: int
    label: int
    box: BBox
    score: float


@dataclass(frozen=True)
class PseudoLabel:
    """
    Gate outcome for one proposal.

    ``stage_targets`` is only set when heads are taught by their own
    predictions; otherwise every stage learns from ``target``.
    """
    target: TeacherTarget
    passes: tuple[bool, ...]
    stage_targets: tuple[TeacherTarget, ...] | None = None

    def target_for(self, stage: int) -> TeacherTarget:
        if self.stage_targets is None:
            return self.target
        return self.stage_targets[stage - 1]


@dataclass(frozen=True)
class PseudoLabelSet:
    """Per-proposal gate outcomes of one unlabeled batch."""
    labels: tuple[PseudoLabel, ...]
    num_stages: int

    def rows(self) -> tuple[PseudoLabel, ...]:
        return self.labels

    def __len__(self) -> int:
        return len(self.labels)

    def stage(self, k: int) -> list[tuple[TeacherTarget, bool]]:
        """The (target, passes) list of stage ``k``."""
        return [(row.target_for(k), row.passes[k - 1]) for row in self.labels]

    def retained(self, k: int) -> list[TeacherTarget]:
        return [row.target_for(k) for row in self.labels if row.passes[k - 1]]

    def sizes(self) -> tuple[int, ...]:
        return tuple(sum(row.passes[k] for row in self.labels) for k in range(self.num_stages))

    def is_nested(self) -> bool:
        """Whether every proposal kept at stage k+1 is also kept at stage k."""
        return all(
            not (later and not earlier)
            for row in self.labels
            for earlier, later in zip(row.passes, row.passes[1:])
        )

    def retained_counts(self, num_classes: int) -> list[list[int]]:
        """Retained pseudo-labels per stage (outer) and class slot (inner)."""
        counts = [[0] * num_classes for _ in range(self.num_stages)]
        for k in range(1, self.num_stages + 1):
            for target in self.retained(k):
                counts[k - 1][target.y_hat] += 1
        return counts

    def pseudo_boxes(self, stage: int = 1) -> list[PseudoBox]:
        """Pseudo-labels retained at ``stage``."""
        return [PseudoBox(t.image_id, t.y_hat, t.b_t, t.q_t) for t in self.retained(stage)]


def _passes(target: TeacherTarget, schedule: ThresholdSchedule, stage: int) -> bool:
    if target.is_background:
        return False
    return target.q_t >= schedule.threshold(target.y_hat, stage)


def gate(targets: Iterable[TeacherTarget], schedule: ThresholdSchedule) -> PseudoLabelSet:
    """
    Gate teacher targets against a threshold schedule.

    A target passes stage ``k`` iff its argmax is a foreground class and
    ``q_t >= tau[y_hat, k]``. Background-argmax targets pass no stage.

    Examples:
        >>> from pycascade.apm import FixedThresholds
        >>> t = TeacherTarget(1, 0, (0.65, 0.35), BBox(0, 0, 1, 1))
        >>> gate([t], FixedThresholds((0.5, 0.6, 0.7))).sizes()
        (1, 1, 0)
    """
    k = schedule.num_stages
    labels = tuple(
        PseudoLabel(t, tuple(_passes(t, schedule, s) for s in range(1, k + 1))) for t in targets
    )
    return PseudoLabelSet(labels, k)


def group_by_proposal(records: Iterable[DetectionRecord]) -> dict[tuple[int, int], list[DetectionRecord]]:
    """
    Group stage records by ``(image_id, proposal_id)``, sorted by key.

    Raises:
        AlignmentError: If a record carries no proposal id
    """
    groups: dict[tuple[int, int], list[DetectionRecord]] = {}
    for record in records:
        if record.proposal_id < 0:
            raise AlignmentError(f"Record of image {record.image_id} has no proposal id")
        groups.setdefault((record.image_id, record.proposal_id), []).append(record)
    return dict(sorted(groups.items()))


def suppress_targets(targets: Sequence[TeacherTarget], iou_threshold: float) -> list[TeacherTarget]:
    """Per-image, per-class NMS over foreground teacher targets."""
    by_image: dict[int, list[int]] = {}
    for i, t in enumerate(targets):
        by_image.setdefault(t.image_id, []).append(i)
    keep: set[int] = set()
    for indices in by_image.values():
        candidates = [i for i in indices if not targets[i].is_background]
        keep.update(i for i in indices if targets[i].is_background)
        survivors = nms_indices(
            [targets[i].b_t for i in candidates],
            [targets[i].q_t for i in candidates],
            [targets[i].y_hat for i in candidates],
            iou_threshold,
        )
        keep.update(candidates[j] for j in survivors)
    return [t for i, t in enumerate(targets) if i in keep]


def gate_per_head(
    groups: Iterable[Sequence[DetectionRecord]], schedule: ThresholdSchedule
) -> PseudoLabelSet:
    """
    Gate each head on its own prediction.

    Head ``k`` is kept when its own top foreground score reaches its own
    stage-``k`` threshold. The ensemble target is still attached for
    reporting. Retained sets need not be nested in this mode.
    """
    labels = []
    for group in groups:
        records = sorted(group, key=lambda r: r.stage)
        heads = tuple(TeacherTarget.from_record(r) for r in records)
        passes = tuple(_passes(h, schedule, s) for s, h in enumerate(heads, start=1))
        labels.append(PseudoLabel(ensemble(records), passes, heads))
    return PseudoLabelSet(tuple(labels), schedule.num_stages)


def unlabeled_batch(
    records: Iterable[DetectionRecord],
    schedule: ThresholdSchedule,
    nms_threshold: float | None = 0.5,
    mode: TeacherMode | str = TeacherMode.ENSEMBLE,
) -> PseudoLabelSet:
    """
    Turn the stage records of an unlabeled batch into pseudo-labels.

    Records are grouped by proposal, ensembled, optionally suppressed with
    per-class NMS on the teacher targets, then gated. The output is ordered
    by ``(image_id, proposal_id)``.

    Args:
        records: Stage records of the batch, each with a proposal id
        schedule: Threshold schedule (a :class:`ClassStatsStore` or fixed)
        nms_threshold: IoU for teacher-target NMS, or None to skip it
        mode: ``"ensemble"`` or ``"self_per_head"``

    Returns:
        The gated pseudo-label set
    """
    mode = TeacherMode(mode)
    groups = group_by_proposal(records)
    k = schedule.num_stages
    targets = [ensemble(group, k) for group in groups.values()]
    if nms_threshold is not None:
        targets = suppress_targets(targets, nms_threshold)
    if mode is TeacherMode.ENSEMBLE:
        pseudo = gate(targets, schedule)
    else:
        kept = [groups[(t.image_id, t.proposal_id)] for t in targets]
        pseudo = gate_per_head(kept, schedule)
    logger.debug("Unlabeled batch: %d proposals, retained %s", len(pseudo), pseudo.sizes())
    return pseudo


def head_pseudo_boxes(
    records: Iterable[DetectionRecord],
    schedule: ThresholdSchedule,
    head: int,
    stage: int = 1,
) -> list[PseudoBox]:
    """
    Pseudo-labels a single head would produce when used as the teacher.

    Each proposal contributes its head-``head`` prediction when that passes
    the stage-``stage`` threshold of its class.
    """
    boxes = []
    for group in group_by_proposal(records).values():
        matches = [r for r in group if r.stage == head]
        if len(matches) != 1:
            raise AlignmentError(f"Proposal {group[0].proposal_id} has no unique stage-{head} record")
        target = TeacherTarget.from_record(matches[0])
        if _passes(target, schedule, stage):
            boxes.append(PseudoBox(target.image_id, target.y_hat, target.b_t, target.q_t))
    return boxes
