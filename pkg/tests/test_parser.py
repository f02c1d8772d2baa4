"""
Test cases for COCO ingestion and export.
"""

import json
import random
from pathlib import Path

import pytest

from pycascade.apm import FixedThresholds
from pycascade.core import (
    AuditError,
    BBox,
    ClassIndex,
    DetectionRecord,
    ParseError,
    ReferentialIntegrityError,
    Split,
    UnknownClassError,
    ValidationError,
)
from pycascade.cpl import TeacherTarget, gate
from pycascade.parser import (
    bundle_to_coco,
    decode_json,
    export_coco,
    export_pseudo_labels,
    export_results,
    ingest_coco,
    load_results,
    parse_coco,
    parse_results,
)


def coco_doc(**overrides) -> dict:
    doc = {
        "images": [{"id": 2, "width": 100, "height": 80}, {"id": 1, "width": 100, "height": 80, "file_name": "a.jpg"}],
        "categories": [{"id": 9, "name": "zebra"}, {"id": 3, "name": "cat"}],
        "annotations": [
            {"id": 11, "image_id": 2, "category_id": 3, "bbox": [10, 10, 20, 20]},
            {"id": 10, "image_id": 1, "category_id": 3, "bbox": [0, 0, 5, 5]},
            {"id": 12, "image_id": 1, "category_id": 9, "bbox": [1.5, 2.5, 3, 4]},
        ],
    }
    doc.update(overrides)
    return doc


def encode(doc) -> bytes:
    return json.dumps(doc).encode("utf-8")


def test_parse_coco() -> None:
    """Test ordering, box conversion, counts and groups."""
    bundle = parse_coco(encode(coco_doc()))
    assert [im.id for im in bundle.images] == [1, 2]
    assert bundle.images[0].file_name == "a.jpg"
    assert [c.id for c in bundle.categories] == [3, 9]
    assert [c.instance_count for c in bundle.categories] == [2, 1]
    assert [c.group for c in bundle.categories] == ["rare", "rare"]
    assert [(a.image_id, a.id) for a in bundle.annotations] == [(1, 10), (1, 12), (2, 11)]
    assert bundle.annotations[1].box == BBox(1.5, 2.5, 4.5, 6.5)
    assert bundle.class_index.slot(9) == 1


def test_parse_coco_without_groups() -> None:
    """Test that groups stay empty when no scheme is given."""
    bundle = parse_coco(encode(coco_doc()), scheme=None)
    assert all(c.group == "" for c in bundle.categories)


def test_parse_coco_cocolt4_scheme() -> None:
    """Test the four-bin scheme."""
    bundle = parse_coco(encode(coco_doc()), scheme="cocolt4")
    assert {c.group for c in bundle.categories} == {"bin1"}


def test_unlabeled_split_hides_annotations() -> None:
    """Test that unlabeled annotations are only reachable for auditing."""
    bundle = parse_coco(encode(coco_doc()), split=Split.UNLABELED)
    assert bundle.annotations == ()
    assert bundle.has_hidden_annotations
    assert len(bundle.audit_annotations()) == 3
    assert [c.instance_count for c in bundle.categories] == [2, 1]
    bare = parse_coco(encode(coco_doc(annotations=[])), split="unlabeled")
    with pytest.raises(AuditError):
        bare.audit_annotations()


def test_malformed_json_reports_offset() -> None:
    """Test ParseError with the byte offset of the problem."""
    with pytest.raises(ParseError) as info:
        parse_coco(b'{"images": [1,, 2]}')
    assert info.value.offset == 14
    assert "at byte 14" in str(info.value)
    with pytest.raises(ParseError) as info:
        decode_json('{"name": "é"'.encode("utf-8") + b"\xff")
    assert info.value.offset == 13
    assert isinstance(info.value, ValueError)


@pytest.mark.parametrize(
    "doc",
    [
        [],
        {"images": [], "annotations": []},
        coco_doc(images=[{"width": 3}]),
        coco_doc(images=[{"id": "1"}]),
        coco_doc(categories=[{"id": True}]),
        coco_doc(annotations=[{"id": 1, "image_id": 1, "category_id": 3, "bbox": [0, 0, -1, 2]}]),
        coco_doc(annotations=[{"id": 1, "image_id": 1, "category_id": 3, "bbox": [0, 0, 1]}]),
        coco_doc(annotations=[{"id": 1, "image_id": 1, "category_id": 3}]),
        coco_doc(annotations=["x"]),
    ],
)
def test_invalid_documents(doc) -> None:
    """Test ValidationError for structurally invalid documents."""
    with pytest.raises(ValidationError):
        parse_coco(encode(doc))


def test_referential_integrity() -> None:
    """Test annotations pointing at unknown categories or images."""
    bad_category = coco_doc(annotations=[{"id": 5, "image_id": 1, "category_id": 4, "bbox": [0, 0, 1, 1]}])
    with pytest.raises(ReferentialIntegrityError) as info:
        parse_coco(encode(bad_category))
    assert info.value.annotation_id == 5
    bad_image = coco_doc(annotations=[{"id": 6, "image_id": 7, "category_id": 3, "bbox": [0, 0, 1, 1]}])
    with pytest.raises(ReferentialIntegrityError, match="unknown image 7"):
        parse_coco(encode(bad_image))


def test_export_and_ingest(tmp_path: Path) -> None:
    """Test that an exported bundle reads back unchanged."""
    bundle = parse_coco(encode(coco_doc()))
    path = export_coco(bundle, tmp_path / "nested" / "out.json")
    assert ingest_coco(path) == bundle
    doc = json.loads(path.read_text(encoding="utf-8"))
    assert doc["annotations"][1]["bbox"] == [1.5, 2.5, 3.0, 4.0]
    assert doc["annotations"][1]["area"] == 12.0
    assert doc["categories"][0] == {"id": 3, "name": "cat", "instance_count": 2, "group": "rare"}


def test_hidden_annotations_are_exported_on_request() -> None:
    """Test the include_hidden flag of the COCO writer."""
    bundle = parse_coco(encode(coco_doc()), split="unlabeled")
    assert bundle_to_coco(bundle)["annotations"] == []
    assert len(bundle_to_coco(bundle, include_hidden=True)["annotations"]) == 3


def test_results_round_trip(tmp_path: Path) -> None:
    """Test that exported records load back exactly."""
    index = ClassIndex((3, 9))
    records = [
        DetectionRecord(1, 1, (0.25, 0.5, 0.25), BBox(0, 0, 4, 2), proposal_id=0),
        DetectionRecord(1, 2, (0.75, 0.125, 0.125), BBox(0.5, 0, 4, 2), proposal_id=0),
    ]
    path = export_results(records, tmp_path / "results.json", index)
    entries = json.loads(path.read_text(encoding="utf-8"))
    assert [e["category_id"] for e in entries] == [9, 3]
    assert [e["stage"] for e in entries] == [1, 2]
    assert entries[1]["bbox"] == [0.5, 0.0, 3.5, 2.0]
    assert entries[1]["xyxy"] == [0.5, 0.0, 4.0, 2.0]
    assert load_results(path, index) == records


def test_results_round_trip_decimal_corners(tmp_path: Path) -> None:
    """Test that three-decimal corners survive export and load bit for bit."""
    rng = random.Random(0)
    records = []
    for i in range(100):
        xs = sorted(round(rng.uniform(0, 1000), 3) for _ in range(2))
        ys = sorted(round(rng.uniform(0, 1000), 3) for _ in range(2))
        records.append(DetectionRecord(i % 7, 1, (0.25, 0.5, 0.25), BBox(xs[0], ys[0], xs[1], ys[1]), proposal_id=i))
    index = ClassIndex((3, 9))
    loaded = load_results(export_results(records, tmp_path / "results.json", index), index)
    assert [r.box.as_tuple() for r in loaded] == [r.box.as_tuple() for r in records]
    assert loaded == records


def test_corner_fields_take_precedence() -> None:
    """Test that xyxy corners win over the COCO bbox and are validated."""
    entry = {"image_id": 1, "category_id": 9, "bbox": [0, 0, 1, 1], "xyxy": [0.1, 0.2, 0.3, 0.7], "score": 0.5}
    [record] = parse_results(encode([entry]), ClassIndex((3, 9)))
    assert record.box == BBox(0.1, 0.2, 0.3, 0.7)
    with pytest.raises(ValidationError, match="out of order"):
        parse_results(encode([{**entry, "xyxy": [1, 0, 0, 1]}]), ClassIndex((3, 9)))
    with pytest.raises(ValidationError, match="xyxy"):
        parse_results(encode([{**entry, "xyxy": [1, 0]}]), ClassIndex((3, 9)))
    doc = coco_doc(annotations=[{"id": 1, "image_id": 1, "category_id": 3, "xyxy": [0.1, 0.2, 0.3, 0.7]}])
    assert parse_coco(encode(doc)).annotations[0].box == BBox(0.1, 0.2, 0.3, 0.7)


def test_plain_coco_results_are_expanded() -> None:
    """Test score expansion of results without class_probs."""
    data = encode([{"image_id": 4, "category_id": 9, "bbox": [0, 0, 2, 2], "score": 0.8}])
    [record] = parse_results(data, ClassIndex((3, 9)))
    assert record.class_probs == pytest.approx((0.0, 0.8, 0.2))
    assert record.stage == 1
    assert record.proposal_id == -1
    [by_slot] = parse_results(data.replace(b"9", b"1"), num_classes=2)
    assert by_slot.label == 1
    with pytest.raises(ValidationError):
        parse_results(data)
    with pytest.raises(UnknownClassError):
        parse_results(data, ClassIndex((3, 4)))
    with pytest.raises(ValidationError):
        parse_results(encode({"image_id": 1}))


def test_export_pseudo_labels(tmp_path: Path) -> None:
    """Test the pseudo-label file layout."""
    targets = [
        TeacherTarget(1, 0, (0.7, 0.2, 0.1), BBox(0, 0, 2, 2)),
        TeacherTarget(1, 1, (0.1, 0.55, 0.35), BBox(1, 1, 3, 4)),
    ]
    pseudo = gate(targets, FixedThresholds((0.5, 0.6)))
    path = export_pseudo_labels(pseudo, tmp_path / "pseudo.json", ClassIndex((3, 9)))
    entries = json.loads(path.read_text(encoding="utf-8"))
    assert [e["category_id"] for e in entries] == [3, 9]
    assert [e["stage_mask"] for e in entries] == [[True, True], [True, False]]
    assert entries[1]["bbox"] == [1.0, 1.0, 2.0, 3.0]
    assert entries[0]["score"] == entries[0]["q_t"] == 0.7
