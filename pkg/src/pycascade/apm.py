"""
Adaptive pseudo-label mining.

Per-class bounded confidence queues fed from labeled proposals, and the
class-specific progressive stage thresholds derived from them::

    tau[c, k] = clamp(mu[c] + sigma[c] * eps[k], 0, 1)

Classes with fewer than ``min_samples`` recorded confidences fall back to the
default per-stage thresholds.
"""

from __future__ import annotations

import logging
from collections import deque
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any, Protocol, runtime_checkable

import numpy as np

from .core import (
    Annotation,
    ClassIndex,
    ConfigError,
    ConfigMixin,
    DetectionRecord,
    UnknownClassError,
    ValidationError,
)
from .geometry import greedy_match

logger = logging.getLogger(__name__)

RECORDED_VALUES = ("gt_class", "max_foreground")


@runtime_checkable
class ThresholdSchedule(Protocol):
    """Anything that yields a threshold per (class slot, stage)."""

    @property
    def num_stages(self) -> int: ...

    def threshold(self, class_id: int, stage: int) -> float: ...


@dataclass(frozen=True)
class APMConfig(ConfigMixin):
    """
    Settings of a :class:`ClassStatsStore`.

    Args:
        capacity: Queue length per class
        min_samples: Samples needed before the adaptive threshold replaces the fallback
        epsilons: Per-stage multipliers of sigma, non-decreasing
        default_thresholds: Per-stage fallback thresholds
        recorded_value: ``"gt_class"`` records the probability of the matched
            annotation's class, ``"max_foreground"`` the proposal's top score
    """
    capacity: int = 256
    min_samples: int = 8
    epsilons: tuple[float, ...] = (1.0, 1.5, 2.0)
    default_thresholds: tuple[float, ...] = (0.5, 0.6, 0.7)
    recorded_value: str = "gt_class"

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ConfigError(f"capacity must be >= 1, got {self.capacity}")
        if self.min_samples < 1:
            raise ConfigError(f"min_samples must be >= 1, got {self.min_samples}")
        if not self.epsilons:
            raise ConfigError("epsilons must name at least one stage")
        if len(self.epsilons) != len(self.default_thresholds):
            raise ConfigError("epsilons and default_thresholds need one entry per stage")
        if any(b < a for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ConfigError(f"epsilons must be non-decreasing: {self.epsilons}")
        if any(not 0.0 <= t <= 1.0 for t in self.default_thresholds):
            raise ConfigError(f"default_thresholds must lie in [0, 1]: {self.default_thresholds}")
        if self.recorded_value not in RECORDED_VALUES:
            raise ConfigError(f"recorded_value must be one of {RECORDED_VALUES}")

    @property
    def num_stages(self) -> int:
        return len(self.epsilons)


class ClassStatsStore:
    """
    Per-class streaming confidence statistics and stage thresholds.

    Class ids are foreground probability slots ``0..num_classes-1``.

    Examples:
        >>> store = ClassStatsStore(2, APMConfig(min_samples=1))
        >>> _ = store.record_confidence(0, 0.4)
        >>> store.mean(0), store.std(0)
        (0.4, 0.0)
        >>> store.threshold(0, 1)
        0.4
    """

    def __init__(self, num_classes: int, config: APMConfig | None = None) -> None:
        if num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.config = config or APMConfig()
        self._queues: list[deque[float]] = [
            deque(maxlen=self.config.capacity) for _ in range(num_classes)
        ]
        self._mu = np.zeros(num_classes)
        self._sigma = np.zeros(num_classes)

    @property
    def num_stages(self) -> int:
        return self.config.num_stages

    def _check_class(self, class_id: int) -> None:
        if not 0 <= class_id < self.num_classes:
            raise UnknownClassError(f"Unknown class slot: {class_id}")

    def record_confidence(self, class_id: int, confidence: float) -> ClassStatsStore:
        """
        Append a confidence to a class queue and refresh its statistics.

        The oldest entry is evicted once the queue is at capacity.

        Raises:
            UnknownClassError: If the class slot does not exist
            ValidationError: If the confidence lies outside ``[0, 1]``
        """
        self._check_class(class_id)
        if not 0.0 <= confidence <= 1.0:
            raise ValidationError(f"Confidence must lie in [0, 1], got {confidence}")
        queue = self._queues[class_id]
        queue.append(float(confidence))
        values = np.fromiter(queue, dtype=float, count=len(queue))
        self._mu[class_id] = values.mean()
        self._sigma[class_id] = values.std()
        return self

    def record_many(self, pairs: Iterable[tuple[int, float]]) -> ClassStatsStore:
        for class_id, confidence in pairs:
            self.record_confidence(class_id, confidence)
        return self

    def queue(self, class_id: int) -> list[float]:
        self._check_class(class_id)
        return list(self._queues[class_id])

    def count(self, class_id: int) -> int:
        self._check_class(class_id)
        return len(self._queues[class_id])

    def mean(self, class_id: int) -> float:
        self._check_class(class_id)
        return float(self._mu[class_id])

    def std(self, class_id: int) -> float:
        """Population standard deviation of the class queue."""
        self._check_class(class_id)
        return float(self._sigma[class_id])

    def means(self) -> list[float]:
        return [float(m) for m in self._mu]

    def is_adaptive(self, class_id: int) -> bool:
        """Whether the class has enough samples to use its own statistics."""
        return self.count(class_id) >= self.config.min_samples

    def threshold(self, class_id: int, stage: int) -> float:
        """
        Threshold of a class at a stage (1-based).

        Returns:
            ``clamp(mu + sigma * eps[stage], 0, 1)`` once the class has
            ``min_samples`` entries, otherwise the stage's default threshold

        Raises:
            UnknownClassError: If the class slot does not exist
            ValidationError: If the stage is out of range
        """
        self._check_class(class_id)
        if not 1 <= stage <= self.num_stages:
            raise ValidationError(f"Stage must lie in [1, {self.num_stages}], got {stage}")
        if len(self._queues[class_id]) < self.config.min_samples:
            return self.config.default_thresholds[stage - 1]
        value = self._mu[class_id] + self._sigma[class_id] * self.config.epsilons[stage - 1]
        return float(min(1.0, max(0.0, value)))

    def thresholds(self, class_id: int) -> tuple[float, ...]:
        return tuple(self.threshold(class_id, k) for k in range(1, self.num_stages + 1))

    def threshold_table(self) -> np.ndarray:
        """Array of shape ``(num_classes, num_stages)``."""
        return np.array([self.thresholds(c) for c in range(self.num_classes)])

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready snapshot with queues, statistics and current thresholds."""
        return {
            "num_classes": self.num_classes,
            "config": self.config.to_dict(),
            "classes": [
                {
                    "class_id": c,
                    "queue": list(self._queues[c]),
                    "mu": float(self._mu[c]),
                    "sigma": float(self._sigma[c]),
                    "thresholds": list(self.thresholds(c)),
                }
                for c in range(self.num_classes)
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ClassStatsStore:
        """Rebuild a store from :meth:`to_dict` output by replaying its queues."""
        try:
            store = cls(int(data["num_classes"]), APMConfig.from_dict(data.get("config", {})))
            for entry in data["classes"]:
                for value in entry["queue"]:
                    store.record_confidence(int(entry["class_id"]), float(value))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"Invalid threshold store snapshot: {exc}") from exc
        return store


@dataclass(frozen=True)
class FixedThresholds:
    """
    A non-adaptive schedule: the same per-stage thresholds for every class.

    Examples:
        >>> FixedThresholds((0.5, 0.6, 0.7)).threshold(3, 2)
        0.6
        >>> FixedThresholds.uniform(0.8, 3).thresholds(0)
        (0.8, 0.8, 0.8)
    """
    values: tuple[float, ...] = (0.5, 0.6, 0.7)

    def __post_init__(self) -> None:
        if not self.values or any(not 0.0 <= v <= 1.0 for v in self.values):
            raise ValidationError(f"Fixed thresholds must lie in [0, 1]: {self.values}")

    @classmethod
    def uniform(cls, tau: float, num_stages: int) -> FixedThresholds:
        return cls((float(tau),) * num_stages)

    @property
    def num_stages(self) -> int:
        return len(self.values)

    def threshold(self, class_id: int, stage: int) -> float:
        if not 1 <= stage <= self.num_stages:
            raise ValidationError(f"Stage must lie in [1, {self.num_stages}], got {stage}")
        return self.values[stage - 1]

    def thresholds(self, class_id: int) -> tuple[float, ...]:
        return self.values


def is_monotone(schedule: ThresholdSchedule, num_classes: int) -> bool:
    """Whether every class's thresholds are non-decreasing across stages."""
    for c in range(num_classes):
        values = [schedule.threshold(c, k) for k in range(1, schedule.num_stages + 1)]
        if any(b < a for a, b in zip(values, values[1:])):
            return False
    return True


def labeled_confidences(
    detections_by_image: Mapping[int, Sequence[DetectionRecord]],
    annotations: Iterable[Annotation],
    class_index: ClassIndex,
    iou_threshold: float = 0.5,
    recorded_value: str = "gt_class",
) -> list[tuple[int, float]]:
    """
    The (class slot, confidence) pairs mined from labeled proposals.

    Per image, detections are greedily matched to annotations regardless of
    class. Every matched detection yields one pair for the annotation's
    class. Pairs come out in (image_id, record index) order.
    """
    gt_by_image: dict[int, list[Annotation]] = {}
    for annotation in annotations:
        gt_by_image.setdefault(annotation.image_id, []).append(annotation)
    pairs: list[tuple[int, float]] = []
    for image_id in sorted(detections_by_image):
        detections = detections_by_image[image_id]
        gts = gt_by_image.get(image_id, [])
        if not detections or not gts:
            continue
        result = greedy_match(detections, gts, iou_threshold)
        for det_index, gt_index, _ in sorted(result.pairs):
            slot = class_index.slot(gts[gt_index].category_id)
            record = detections[det_index]
            value = record.class_probs[slot] if recorded_value == "gt_class" else record.score
            pairs.append((slot, value))
    return pairs


def populate_from_labeled(
    store: ClassStatsStore,
    detections_by_image: Mapping[int, Sequence[DetectionRecord]],
    annotations: Iterable[Annotation],
    class_index: ClassIndex,
    iou_threshold: float = 0.5,
) -> ClassStatsStore:
    """
    Feed a store with teacher confidences on labeled proposals.

    Args:
        store: Store to update in place
        detections_by_image: Teacher (ensemble) records of labeled images
        annotations: Ground truth of those images
        class_index: Category id to slot mapping
        iou_threshold: Minimum IoU for a detection to count as matched

    Returns:
        The same store
    """
    pairs = labeled_confidences(
        detections_by_image, annotations, class_index, iou_threshold, store.config.recorded_value
    )
    store.record_many(pairs)
    logger.debug("Recorded %d labeled confidences", len(pairs))
    return store
