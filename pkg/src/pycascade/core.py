"""
Core functionality for pycascade package.

This module contains the fundamental value types shared by every other module:
boxes, categories, annotations, detections and dataset bundles, together with
the class-group binning schemes and the package exception hierarchy.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import MISSING, dataclass, field, fields, replace
from enum import Enum
from typing import Any, TypeVar

logger = logging.getLogger(__name__)

# Tolerance for the sum of softmax class probabilities
PROBABILITY_SUM_TOLERANCE = 1e-9


class PyCascadeError(Exception):
    """Base class for every error raised by pycascade."""


class ValidationError(PyCascadeError, ValueError):
    """A value violates a documented precondition."""


class ParseError(ValidationError):
    """Input bytes could not be decoded as JSON.

    Attributes:
        offset: Byte offset into the input where decoding failed.
    """

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ReferentialIntegrityError(ValidationError):
    """An annotation references a category or image that does not exist."""

    def __init__(self, message: str, annotation_id: int) -> None:
        super().__init__(message)
        self.annotation_id = annotation_id


class UnknownClassError(PyCascadeError, KeyError):
    """A class id is not known to the component it was passed to."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown class"


class AlignmentError(PyCascadeError, ValueError):
    """Per-stage records or predictions are not aligned."""


class ConfigError(PyCascadeError, ValueError):
    """A configuration is invalid."""


class AuditError(PyCascadeError):
    """An accuracy audit was requested without hidden ground truth."""


class DivergenceError(PyCascadeError, RuntimeError):
    """Training produced a loss that is too large or not finite."""


class Split(Enum):
    """Role of a dataset bundle in semi-supervised training."""
    LABELED = "labeled"
    UNLABELED = "unlabeled"


class ScoreSemantics(Enum):
    """How the entries of a class probability vector relate to each other."""
    SOFTMAX = "softmax"  # entries sum to one
    SIGMOID = "sigmoid"  # independent per-class scores


class GroupScheme(Enum):
    """Frequency binning schemes for class groups."""
    LVIS3 = "lvis3"
    COCOLT4 = "cocolt4"


# Lower edges of the half-open count intervals, per scheme
GROUP_SCHEMES: dict[GroupScheme, tuple[tuple[str, int], ...]] = {
    GroupScheme.LVIS3: (("rare", 1), ("common", 10), ("frequent", 100)),
    GroupScheme.COCOLT4: (("bin1", 1), ("bin2", 20), ("bin3", 400), ("bin4", 8000)),
}


def group_names(scheme: GroupScheme | str) -> tuple[str, ...]:
    """Return the group names of a scheme, lowest bin first."""
    return tuple(name for name, _ in GROUP_SCHEMES[GroupScheme(scheme)])


def group_for_count(count: int, scheme: GroupScheme | str) -> str:
    """
    Map an instance count to its class group.

    Intervals are half-open, ``[lower, next_lower)``. A count of zero falls
    into the lowest bin.

    Args:
        count: Non-negative instance count
        scheme: Binning scheme

    Returns:
        The group name

    Examples:
        >>> group_for_count(10, "lvis3")
        'common'
        >>> group_for_count(400, "cocolt4")
        'bin3'
    """
    if count < 0:
        raise ValidationError(f"Instance count must be non-negative, got {count}")
    bins = GROUP_SCHEMES[GroupScheme(scheme)]
    group = bins[0][0]
    for name, lower in bins:
        if count >= lower:
            group = name
    return group


@dataclass(frozen=True)
class BBox:
    """
    Axis-aligned box in corner form, in image-plane pixels.

    Examples:
        >>> box = BBox(10.0, 10.0, 30.0, 30.0)
        >>> box.area
        400.0
        >>> box.to_xywh()
        [10.0, 10.0, 20.0, 20.0]
    """
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"Box coordinates must be finite: {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValidationError(f"Box corners out of order: {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, width: float, height: float) -> BBox:
        """Build a box from COCO ``[x, y, width, height]`` form."""
        if width < 0 or height < 0:
            raise ValidationError(f"Negative box size: width={width}, height={height}")
        return cls(float(x), float(y), float(x) + float(width), float(y) + float(height))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_xywh(self) -> list[float]:
        """Return the box in COCO ``[x, y, width, height]`` form."""
        return [self.x_min, self.y_min, self.width, self.height]

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def mean(cls, boxes: Sequence[BBox]) -> BBox:
        """Coordinate-wise mean of a non-empty sequence of boxes."""
        if not boxes:
            raise ValidationError("Cannot average an empty sequence of boxes")
        n = len(boxes)
        return cls(
            math.fsum(b.x_min for b in boxes) / n,
            math.fsum(b.y_min for b in boxes) / n,
            math.fsum(b.x_max for b in boxes) / n,
            math.fsum(b.y_max for b in boxes) / n,
        )


@dataclass(frozen=True)
class ImageInfo:
    """An image as an abstract coordinate frame."""
    id: int
    width: int
    height: int
    file_name: str = ""


@dataclass(frozen=True)
class Category:
    """
    A category with its instance count and class group.

    The group is only meaningful after :func:`assign_class_groups`; until then
    it holds the empty string.
    """
    id: int
    name: str
    instance_count: int = 0
    group: str = ""

    def __post_init__(self) -> None:
        if self.instance_count < 0:
            raise ValidationError(f"Category {self.id} has negative instance count")


@dataclass(frozen=True)
class Annotation:
    """A ground-truth box of one category in one image."""
    id: int
    image_id: int
    category_id: int
    box: BBox


@dataclass(frozen=True)
class DetectionRecord:
    """
    One scored, classified box proposal from one cascade stage.

    ``class_probs`` holds C foreground entries followed by one background
    slot. Foreground slot ``c`` refers to the ``c``-th category of the
    dataset's category table sorted by id (see :class:`ClassIndex`).

    Examples:
        >>> rec = DetectionRecord(1, 1, (0.7, 0.3), BBox(0, 0, 2, 2))
        >>> rec.score, rec.label
        (0.7, 0)
    """
    image_id: int
    stage: int
    class_probs: tuple[float, ...]
    box: BBox
    proposal_id: int = -1
    semantics: ScoreSemantics = ScoreSemantics.SOFTMAX

    def __post_init__(self) -> None:
        if self.stage < 1:
            raise ValidationError(f"Stage must be >= 1, got {self.stage}")
        if len(self.class_probs) < 2:
            raise ValidationError("class_probs needs at least one foreground and the background slot")
        if any(not (0.0 <= p <= 1.0) for p in self.class_probs):
            raise ValidationError(f"class_probs entries must lie in [0, 1]: {self.class_probs}")
        if self.semantics is ScoreSemantics.SOFTMAX:
            total = math.fsum(self.class_probs)
            if abs(total - 1.0) > PROBABILITY_SUM_TOLERANCE:
                raise ValidationError(f"Softmax class_probs must sum to 1, got {total!r}")

    @property
    def num_classes(self) -> int:
        """Number of foreground classes C."""
        return len(self.class_probs) - 1

    @property
    def score(self) -> float:
        """Maximum foreground probability."""
        return max(self.class_probs[:-1])

    @property
    def label(self) -> int:
        """Foreground slot of the maximum probability, lowest slot on ties."""
        fg = self.class_probs[:-1]
        return fg.index(max(fg))

    @property
    def background(self) -> float:
        return self.class_probs[-1]


@dataclass(frozen=True)
class ClassIndex:
    """
    Bidirectional mapping between category ids and probability slots.

    Examples:
        >>> index = ClassIndex((3, 7, 9))
        >>> index.slot(7), index.category_id(2), index.background
        (1, 9, 3)
    """
    category_ids: tuple[int, ...]
    _slots: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(set(self.category_ids)) != len(self.category_ids):
            raise ValidationError("Duplicate category ids")
        object.__setattr__(self, "_slots", {cid: i for i, cid in enumerate(self.category_ids)})

    @classmethod
    def from_categories(cls, categories: Iterable[Category]) -> ClassIndex:
        return cls(tuple(sorted(c.id for c in categories)))

    @classmethod
    def identity(cls, num_classes: int) -> ClassIndex:
        """Index where category id equals slot, for ids ``0..num_classes-1``."""
        return cls(tuple(range(num_classes)))

    @property
    def num_classes(self) -> int:
        return len(self.category_ids)

    @property
    def background(self) -> int:
        return len(self.category_ids)

    def slot(self, category_id: int) -> int:
        try:
            return self._slots[category_id]
        except KeyError:
            raise UnknownClassError(f"Unknown category id: {category_id}") from None

    def category_id(self, slot: int) -> int:
        if not 0 <= slot < len(self.category_ids):
            raise UnknownClassError(f"Unknown class slot: {slot}")
        return self.category_ids[slot]


@dataclass(frozen=True)
class DatasetBundle:
    """
    Images, annotations and categories of one split.

    An unlabeled bundle has no public annotations. Its ground truth, when
    known, is kept apart as hidden annotations and is only reachable through
    :meth:`audit_annotations`.
    """
    images: tuple[ImageInfo, ...]
    annotations: tuple[Annotation, ...]
    categories: tuple[Category, ...]
    split: Split = Split.LABELED
    group_scheme: GroupScheme | None = None
    _hidden: tuple[Annotation, ...] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.split is Split.UNLABELED and self.annotations:
            raise ValidationError("Unlabeled bundle cannot carry public annotations")

    @property
    def class_index(self) -> ClassIndex:
        return ClassIndex.from_categories(self.categories)

    @property
    def has_hidden_annotations(self) -> bool:
        return self._hidden is not None

    def audit_annotations(self) -> tuple[Annotation, ...]:
        """
        Return the ground truth used for auditing.

        For a labeled bundle this is the public annotation list; for an
        unlabeled bundle it is the hidden ground truth.

        Raises:
            AuditError: If the bundle is unlabeled and has no hidden ground truth
        """
        if self.split is Split.LABELED:
            return self.annotations
        if self._hidden is None:
            raise AuditError("Unlabeled bundle has no hidden ground truth to audit against")
        return self._hidden

    def with_hidden(self, annotations: Iterable[Annotation]) -> DatasetBundle:
        """Attach hidden ground truth to an unlabeled bundle."""
        if self.split is not Split.UNLABELED:
            raise ValidationError("Only unlabeled bundles carry hidden annotations")
        return replace(self, _hidden=tuple(annotations))

    def category(self, category_id: int) -> Category:
        for category in self.categories:
            if category.id == category_id:
                return category
        raise UnknownClassError(f"Unknown category id: {category_id}")

    def annotations_by_image(self, audit: bool = False) -> dict[int, list[Annotation]]:
        """Group annotations by image id, preserving bundle order."""
        source = self.audit_annotations() if audit else self.annotations
        grouped: dict[int, list[Annotation]] = {image.id: [] for image in self.images}
        for annotation in source:
            grouped.setdefault(annotation.image_id, []).append(annotation)
        return grouped

    def zero_instance_categories(self) -> list[int]:
        return [c.id for c in self.categories if c.instance_count == 0]


def count_instances(
    categories: Iterable[Category], annotations: Iterable[Annotation]
) -> tuple[Category, ...]:
    """Return the categories, sorted by id, with recomputed instance counts."""
    counts: dict[int, int] = {}
    for annotation in annotations:
        counts[annotation.category_id] = counts.get(annotation.category_id, 0) + 1
    return tuple(
        replace(c, instance_count=counts.get(c.id, 0))
        for c in sorted(categories, key=lambda c: c.id)
    )


def assign_class_groups(bundle: DatasetBundle, scheme: GroupScheme | str) -> DatasetBundle:
    """
    Assign every category its frequency group under a binning scheme.

    Categories with zero instances go to the lowest bin and are reported
    through a warning rather than dropped.

    Args:
        bundle: Bundle with computed instance counts
        scheme: ``"lvis3"`` (rare/common/frequent) or ``"cocolt4"`` (bin1..bin4)

    Returns:
        A new bundle whose categories carry their group
    """
    scheme = GroupScheme(scheme)
    categories = tuple(
        replace(c, group=group_for_count(c.instance_count, scheme)) for c in bundle.categories
    )
    zero = [c.id for c in categories if c.instance_count == 0]
    if zero:
        logger.warning("%d categories have zero instances and were binned lowest: %s", len(zero), zero)
    return replace(bundle, categories=categories, group_scheme=scheme)


def by_image(records: Iterable[DetectionRecord]) -> dict[int, list[DetectionRecord]]:
    """Group detection records by image id, preserving input order."""
    grouped: dict[int, list[DetectionRecord]] = {}
    for record in records:
        grouped.setdefault(record.image_id, []).append(record)
    return grouped


_C = TypeVar("_C", bound="ConfigMixin")


class ConfigMixin:
    """
    ``from_dict``/``to_dict`` for frozen dataclass configs.

    Values are checked against the type of each field's default: ints are
    accepted for float fields, lists for tuple fields, and ``None`` defaults
    accept anything. Unknown keys are rejected.
    """

    @classmethod
    def from_dict(cls: type[_C], data: Mapping[str, Any]) -> _C:
        if not isinstance(data, Mapping):
            raise ConfigError(f"{cls.__name__}: expected an object, got {type(data).__name__}")
        known = {f.name: f for f in fields(cls)}  # type: ignore[arg-type]
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"{cls.__name__}: unknown keys {unknown}")
        values = {
            name: None
            if value is None and "None" in str(known[name].type)
            else _coerce(f"{cls.__name__}.{name}", _default_of(known[name]), value)
            for name, value in data.items()
        }
        try:
            return cls(**values)
        except ValidationError as exc:
            raise ConfigError(f"{cls.__name__}: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):  # type: ignore[arg-type]
            value = getattr(self, f.name)
            if isinstance(value, Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            elif isinstance(value, dict):
                value = dict(value)
            out[f.name] = value
        return out


def _default_of(f: Any) -> Any:
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _coerce(where: str, default: Any, value: Any) -> Any:
    if default is None:
        return tuple(value) if isinstance(value, list) else value
    if isinstance(default, Enum):
        try:
            return type(default)(value)
        except ValueError:
            raise ConfigError(f"{where}: invalid value {value!r}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {value!r}")
        return dict(value)
    return value
