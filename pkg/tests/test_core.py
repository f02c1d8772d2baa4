"""
Test cases for the core value types of pycascade.
"""

from dataclasses import FrozenInstanceError

import pytest

from pycascade.core import (
    Annotation,
    AuditError,
    BBox,
    Category,
    ClassIndex,
    ConfigError,
    DatasetBundle,
    DetectionRecord,
    GroupScheme,
    ImageInfo,
    PyCascadeError,
    ScoreSemantics,
    Split,
    UnknownClassError,
    ValidationError,
    assign_class_groups,
    by_image,
    count_instances,
    group_for_count,
    group_names,
)
from pycascade.evaluation import EvalConfig


def test_bbox_creation() -> None:
    """Test that boxes can be created from corners and from COCO form."""
    box = BBox.from_xywh(10, 20, 30, 40)
    assert box.as_tuple() == (10.0, 20.0, 40.0, 60.0)
    assert box.width == 30.0 and box.height == 40.0
    assert box.area == 1200.0
    assert box.to_xywh() == [10.0, 20.0, 30.0, 40.0]


def test_bbox_validation() -> None:
    """Test that malformed boxes are rejected."""
    with pytest.raises(ValidationError):
        BBox(5, 0, 4, 1)
    with pytest.raises(ValidationError):
        BBox(0, 0, float("inf"), 1)
    with pytest.raises(ValidationError):
        BBox.from_xywh(0, 0, -1, 1)
    assert BBox(1, 1, 1, 1).area == 0.0


def test_bbox_is_immutable() -> None:
    """Test that boxes are frozen values."""
    box = BBox(0, 0, 1, 1)
    with pytest.raises(FrozenInstanceError):
        box.x_min = 3  # type: ignore[misc]
    assert box == BBox(0.0, 0.0, 1.0, 1.0)
    assert len({box, BBox(0, 0, 1, 1)}) == 1


def test_bbox_mean() -> None:
    """Test the coordinate-wise mean of boxes."""
    mean = BBox.mean([BBox(0, 0, 2, 2), BBox(2, 2, 4, 6)])
    assert mean.as_tuple() == (1.0, 1.0, 3.0, 4.0)
    with pytest.raises(ValidationError):
        BBox.mean([])


def test_detection_record_properties() -> None:
    """Test score, label and background of a record."""
    record = DetectionRecord(3, 2, (0.1, 0.5, 0.4), BBox(0, 0, 1, 1), proposal_id=7)
    assert record.num_classes == 2
    assert record.score == 0.5
    assert record.label == 1
    assert record.background == 0.4
    tie = DetectionRecord(3, 1, (0.4, 0.4, 0.2), BBox(0, 0, 1, 1))
    assert tie.label == 0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"stage": 0},
        {"class_probs": (1.0,)},
        {"class_probs": (1.2, -0.2)},
        {"class_probs": (0.6, 0.6)},
    ],
)
def test_detection_record_validation(kwargs: dict) -> None:
    """Test that malformed records are rejected."""
    values = {"image_id": 1, "stage": 1, "class_probs": (0.5, 0.5), "box": BBox(0, 0, 1, 1)}
    values.update(kwargs)
    with pytest.raises(ValidationError):
        DetectionRecord(**values)


def test_sigmoid_records_skip_sum_check() -> None:
    """Test that independent per-class scores need not sum to one."""
    record = DetectionRecord(1, 1, (0.9, 0.8, 0.1), BBox(0, 0, 1, 1), semantics=ScoreSemantics.SIGMOID)
    assert record.score == 0.9


def test_class_index_mapping() -> None:
    """Test the mapping between category ids and slots."""
    index = ClassIndex.from_categories([Category(9, "c"), Category(3, "a"), Category(7, "b")])
    assert index.category_ids == (3, 7, 9)
    assert [index.slot(c) for c in (3, 7, 9)] == [0, 1, 2]
    assert index.category_id(1) == 7
    assert index.num_classes == 3 and index.background == 3
    assert ClassIndex.identity(2).category_ids == (0, 1)
    with pytest.raises(UnknownClassError):
        index.slot(4)
    with pytest.raises(UnknownClassError):
        index.category_id(3)
    with pytest.raises(ValidationError):
        ClassIndex((1, 1))


@pytest.mark.parametrize(
    "count, scheme, group",
    [
        (0, "lvis3", "rare"),
        (1, "lvis3", "rare"),
        (9, "lvis3", "rare"),
        (10, "lvis3", "common"),
        (99, "lvis3", "common"),
        (100, "lvis3", "frequent"),
        (19, "cocolt4", "bin1"),
        (20, "cocolt4", "bin2"),
        (399, "cocolt4", "bin2"),
        (400, "cocolt4", "bin3"),
        (8000, "cocolt4", "bin4"),
    ],
)
def test_group_for_count(count: int, scheme: str, group: str) -> None:
    """Test the half-open count intervals of both schemes."""
    assert group_for_count(count, scheme) == group


def test_group_names_and_negative_counts() -> None:
    """Test scheme group names and invalid counts."""
    assert group_names(GroupScheme.LVIS3) == ("rare", "common", "frequent")
    assert group_names("cocolt4") == ("bin1", "bin2", "bin3", "bin4")
    with pytest.raises(ValidationError):
        group_for_count(-1, "lvis3")
    with pytest.raises(ValueError):
        group_for_count(1, "lvis5")


def make_bundle() -> DatasetBundle:
    images = (ImageInfo(1, 100, 100), ImageInfo(2, 100, 100))
    annotations = tuple(Annotation(i, 1 + i % 2, 1 if i < 12 else 2, BBox(0, 0, 5, 5)) for i in range(13))
    categories = count_instances([Category(2, "b"), Category(1, "a"), Category(3, "c")], annotations)
    return DatasetBundle(images, annotations, categories)


def test_count_instances_and_groups() -> None:
    """Test instance counting and group assignment."""
    bundle = make_bundle()
    assert [(c.id, c.instance_count) for c in bundle.categories] == [(1, 12), (2, 1), (3, 0)]
    grouped = assign_class_groups(bundle, "lvis3")
    assert [c.group for c in grouped.categories] == ["common", "rare", "rare"]
    assert grouped.group_scheme is GroupScheme.LVIS3
    assert grouped.zero_instance_categories() == [3]
    assert bundle.categories[0].group == ""


def test_unlabeled_bundle_hides_ground_truth() -> None:
    """Test that unlabeled ground truth is only reachable for audits."""
    labeled = make_bundle()
    unlabeled = DatasetBundle(labeled.images, (), labeled.categories, Split.UNLABELED)
    assert not unlabeled.has_hidden_annotations
    with pytest.raises(AuditError):
        unlabeled.audit_annotations()
    audited = unlabeled.with_hidden(labeled.annotations)
    assert audited.annotations == ()
    assert audited.audit_annotations() == labeled.annotations
    assert labeled.audit_annotations() == labeled.annotations
    with pytest.raises(ValidationError):
        DatasetBundle(labeled.images, labeled.annotations, labeled.categories, Split.UNLABELED)
    with pytest.raises(ValidationError):
        labeled.with_hidden(())


def test_annotations_by_image() -> None:
    """Test grouping annotations and records by image."""
    bundle = make_bundle()
    grouped = bundle.annotations_by_image()
    assert sorted(grouped) == [1, 2]
    assert [a.id for a in grouped[2]] == [1, 3, 5, 7, 9, 11]
    records = [DetectionRecord(i, 1, (0.5, 0.5), BBox(0, 0, 1, 1)) for i in (2, 1, 2)]
    assert {k: len(v) for k, v in by_image(records).items()} == {2: 2, 1: 1}
    assert bundle.category(2).name == "b"
    with pytest.raises(UnknownClassError):
        bundle.category(4)


def test_error_hierarchy() -> None:
    """Test that every package error derives from PyCascadeError."""
    for error in (ValidationError, UnknownClassError, ConfigError, AuditError):
        assert issubclass(error, PyCascadeError)
    assert issubclass(ValidationError, ValueError)
    assert issubclass(UnknownClassError, KeyError)
    assert "Unknown" in str(UnknownClassError("Unknown category id: 4"))


def test_config_from_dict() -> None:
    """Test config coercion and rejection of unknown keys."""
    config = EvalConfig.from_dict({"cap_per_class": 10})
    assert config.cap_per_class == 10
    assert EvalConfig.from_dict(config.to_dict()) == config
    with pytest.raises(ConfigError):
        EvalConfig.from_dict({"cap": 10})
    with pytest.raises(ConfigError):
        EvalConfig.from_dict({"cap_per_class": "ten"})
    with pytest.raises(ConfigError):
        EvalConfig.from_dict([1, 2])
