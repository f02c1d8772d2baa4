"""
COCO interchange for pycascade.

This module reads and writes the COCO-style files the rest of the package
consumes: annotation files (images, annotations, categories), results files
extended with a ``stage`` field, and pseudo-label files.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import TYPE_CHECKING, Any

from .core import (
    Annotation,
    BBox,
    Category,
    ClassIndex,
    DatasetBundle,
    DetectionRecord,
    GroupScheme,
    ImageInfo,
    ParseError,
    ReferentialIntegrityError,
    ScoreSemantics,
    Split,
    ValidationError,
    assign_class_groups,
    count_instances,
)

if TYPE_CHECKING:
    from .cpl import PseudoLabelSet

logger = logging.getLogger(__name__)


def decode_json(data: bytes) -> Any:
    """
    Decode UTF-8 JSON bytes.

    Raises:
        ParseError: With the byte offset of the first offending byte
    """
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"Invalid UTF-8: {exc.reason}", exc.start) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ParseError(f"Malformed JSON: {exc.msg}", offset) from exc


def dump_json(obj: Any, path: str | Path, indent: int | None = 2) -> Path:
    """Write ``obj`` as UTF-8 JSON with a trailing newline and return the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=indent) + "\n", encoding="utf-8")
    return path


def _require(obj: Mapping[str, Any], key: str, kind: type | tuple[type, ...], where: str) -> Any:
    if key not in obj:
        raise ValidationError(f"{where}: missing '{key}'")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ValidationError(f"{where}: '{key}' has invalid type {type(value).__name__}")
    return value


def _parse_bbox(raw: Any, where: str) -> BBox:
    if not isinstance(raw, list) or len(raw) != 4 or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw
    ):
        raise ValidationError(f"{where}: bbox must be a list of 4 numbers")
    x, y, w, h = (float(v) for v in raw)
    if w < 0 or h < 0:
        raise ValidationError(f"{where}: negative bbox width/height ({w}, {h})")
    return BBox.from_xywh(x, y, w, h)


def _parse_corners(raw: Any, where: str) -> BBox:
    if not isinstance(raw, list) or len(raw) != 4 or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw
    ):
        raise ValidationError(f"{where}: xyxy must be a list of 4 numbers")
    x1, y1, x2, y2 = (float(v) for v in raw)
    if x2 < x1 or y2 < y1:
        raise ValidationError(f"{where}: xyxy corners out of order ({x1}, {y1}, {x2}, {y2})")
    return BBox(x1, y1, x2, y2)


def _parse_box(raw: Mapping[str, Any], where: str) -> BBox:
    """The ``xyxy`` corners when an entry carries them, its COCO ``bbox`` otherwise."""
    if "xyxy" in raw:
        return _parse_corners(raw["xyxy"], where)
    return _parse_bbox(raw.get("bbox"), where)


def parse_coco(
    data: bytes,
    split: Split | str = Split.LABELED,
    scheme: GroupScheme | str | None = GroupScheme.LVIS3,
) -> DatasetBundle:
    """
    Parse COCO annotation JSON bytes into a :class:`DatasetBundle`.

    Boxes are converted from ``[x, y, width, height]`` to corner form,
    instance counts are computed per category and, when ``scheme`` is given,
    class groups are assigned. Images and categories are ordered by id and
    annotations by ``(image_id, id)``.

    For the unlabeled split the file's annotations become the bundle's hidden
    ground truth.

    Raises:
        ParseError: Malformed JSON
        ValidationError: Missing arrays, wrong types, negative width/height
        ReferentialIntegrityError: Annotation referencing an unknown category or image
    """
    split = Split(split)
    doc = decode_json(data)
    if not isinstance(doc, dict):
        raise ValidationError("COCO file must contain a JSON object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise ValidationError(f"COCO file needs an '{key}' array")

    images = []
    for i, raw in enumerate(doc["images"]):
        where = f"images[{i}]"
        if not isinstance(raw, dict):
            raise ValidationError(f"{where}: expected an object")
        images.append(
            ImageInfo(
                id=_require(raw, "id", int, where),
                width=int(raw.get("width", 0)),
                height=int(raw.get("height", 0)),
                file_name=str(raw.get("file_name", "")),
            )
        )

    categories = []
    for i, raw in enumerate(doc["categories"]):
        where = f"categories[{i}]"
        if not isinstance(raw, dict):
            raise ValidationError(f"{where}: expected an object")
        categories.append(
            Category(id=_require(raw, "id", int, where), name=str(raw.get("name", "")))
        )

    category_ids = {c.id for c in categories}
    image_ids = {im.id for im in images}
    annotations = []
    for i, raw in enumerate(doc["annotations"]):
        where = f"annotations[{i}]"
        if not isinstance(raw, dict):
            raise ValidationError(f"{where}: expected an object")
        ann_id = _require(raw, "id", int, where)
        category_id = _require(raw, "category_id", int, where)
        image_id = _require(raw, "image_id", int, where)
        if category_id not in category_ids:
            raise ReferentialIntegrityError(
                f"Annotation {ann_id} references unknown category {category_id}", ann_id
            )
        if image_id not in image_ids:
            raise ReferentialIntegrityError(
                f"Annotation {ann_id} references unknown image {image_id}", ann_id
            )
        annotations.append(
            Annotation(
                id=ann_id,
                image_id=image_id,
                category_id=category_id,
                box=_parse_box(raw, f"annotation {ann_id}"),
            )
        )

    annotations.sort(key=lambda a: (a.image_id, a.id))
    counted = count_instances(categories, annotations)
    bundle = DatasetBundle(
        images=tuple(sorted(images, key=lambda im: im.id)),
        annotations=tuple(annotations) if split is Split.LABELED else (),
        categories=counted,
        split=split,
    )
    if split is Split.UNLABELED and annotations:
        bundle = bundle.with_hidden(annotations)
    if scheme is not None:
        bundle = assign_class_groups(bundle, scheme)
    return bundle


def ingest_coco(
    path: str | Path,
    split: Split | str = Split.LABELED,
    scheme: GroupScheme | str | None = GroupScheme.LVIS3,
) -> DatasetBundle:
    """
    Read a COCO annotation file.

    Args:
        path: Path to the JSON file
        split: Split of the resulting bundle
        scheme: Class-group scheme to assign, or None to skip

    Returns:
        The parsed bundle

    Examples:
        >>> bundle = ingest_coco("annotations.json")  # doctest: +SKIP
        >>> bundle.annotations[0].box
        BBox(x_min=10.0, y_min=10.0, x_max=30.0, y_max=30.0)
    """
    bundle = parse_coco(Path(path).read_bytes(), split=split, scheme=scheme)
    logger.info(
        "Ingested %s: %d images, %d categories, %d annotations",
        path, len(bundle.images), len(bundle.categories),
        len(bundle.audit_annotations()) if bundle.has_hidden_annotations else len(bundle.annotations),
    )
    return bundle


def _annotation_json(annotation: Annotation) -> dict[str, Any]:
    return {
        "id": annotation.id,
        "image_id": annotation.image_id,
        "category_id": annotation.category_id,
        "bbox": annotation.box.to_xywh(),
        "xyxy": list(annotation.box.as_tuple()),
        "area": annotation.box.area,
        "iscrowd": 0,
    }


def bundle_to_coco(bundle: DatasetBundle, include_hidden: bool = False) -> dict[str, Any]:
    """Convert a bundle to a COCO annotation document."""
    if include_hidden and bundle.split is Split.UNLABELED:
        annotations: Sequence[Annotation] = bundle.audit_annotations()
    else:
        annotations = bundle.annotations
    return {
        "images": [
            {"id": im.id, "width": im.width, "height": im.height, "file_name": im.file_name}
            for im in bundle.images
        ],
        "annotations": [_annotation_json(a) for a in annotations],
        "categories": [
            {"id": c.id, "name": c.name, "instance_count": c.instance_count, "group": c.group}
            for c in bundle.categories
        ],
    }


def export_coco(bundle: DatasetBundle, path: str | Path, include_hidden: bool = False) -> Path:
    """Write a bundle as a COCO annotation file."""
    return dump_json(bundle_to_coco(bundle, include_hidden=include_hidden), path)


def record_to_json(record: DetectionRecord, class_index: ClassIndex | None = None) -> dict[str, Any]:
    """Convert a detection record to a COCO results entry."""
    label = record.label
    return {
        "image_id": record.image_id,
        "category_id": class_index.category_id(label) if class_index else label,
        "bbox": record.box.to_xywh(),
        "xyxy": list(record.box.as_tuple()),
        "score": record.score,
        "stage": record.stage,
        "proposal_id": record.proposal_id,
        "class_probs": list(record.class_probs),
        "semantics": record.semantics.value,
    }


def export_results(
    records: Iterable[DetectionRecord],
    path: str | Path,
    class_index: ClassIndex | None = None,
) -> Path:
    """
    Write detection records as a COCO results array.

    Each entry carries ``image_id``, ``category_id``, ``bbox`` (``[x, y, w, h]``),
    ``xyxy`` (the exact corners, preferred on load),
    ``score`` (maximum foreground probability) and ``stage``, plus
    ``proposal_id`` and the full ``class_probs`` so :func:`load_results`
    reconstructs the records exactly.

    Args:
        records: Records to write
        path: Output file
        class_index: Slot to category id mapping; slots are written as-is when omitted

    Returns:
        The written path
    """
    entries = [record_to_json(r, class_index) for r in records]
    written = dump_json(entries, path, indent=None)
    logger.info("Exported %d detection records to %s", len(entries), written)
    return written


def parse_results(
    data: bytes, class_index: ClassIndex | None = None, num_classes: int | None = None
) -> list[DetectionRecord]:
    """
    Parse a COCO results array into detection records.

    Entries without ``class_probs`` (plain COCO results) get a probability
    vector with ``score`` on their category, ``1 - score`` on background and
    zero elsewhere; that needs ``class_index`` or ``num_classes``.
    """
    doc = decode_json(data)
    if not isinstance(doc, list):
        raise ValidationError("Results file must contain a JSON array")
    records = []
    for i, raw in enumerate(doc):
        where = f"results[{i}]"
        if not isinstance(raw, dict):
            raise ValidationError(f"{where}: expected an object")
        image_id = _require(raw, "image_id", int, where)
        box = _parse_box(raw, where)
        if "class_probs" in raw:
            probs = tuple(float(p) for p in _require(raw, "class_probs", list, where))
        else:
            category_id = _require(raw, "category_id", int, where)
            score = float(_require(raw, "score", (int, float), where))
            size = class_index.num_classes if class_index else num_classes
            if size is None:
                raise ValidationError(f"{where}: no class_probs and no class table to expand score")
            slot = class_index.slot(category_id) if class_index else category_id
            vector = [0.0] * (size + 1)
            vector[slot] = score
            vector[size] = 1.0 - score
            probs = tuple(vector)
        records.append(
            DetectionRecord(
                image_id=image_id,
                stage=int(raw.get("stage", 1)),
                class_probs=probs,
                box=box,
                proposal_id=int(raw.get("proposal_id", -1)),
                semantics=ScoreSemantics(raw.get("semantics", ScoreSemantics.SOFTMAX.value)),
            )
        )
    return records


def load_results(
    path: str | Path, class_index: ClassIndex | None = None, num_classes: int | None = None
) -> list[DetectionRecord]:
    """Read a results file written by :func:`export_results` or another COCO tool."""
    records = parse_results(Path(path).read_bytes(), class_index, num_classes)
    logger.info("Loaded %d detection records from %s", len(records), path)
    return records


def export_pseudo_labels(
    pseudo: PseudoLabelSet, path: str | Path, class_index: ClassIndex | None = None
) -> Path:
    """
    Write a pseudo-label set in the COCO results dialect.

    One entry per proposal with the teacher box and class, ``score`` = ``q_t``
    and ``stage_mask``, the per-stage pass flags.
    """
    entries = []
    for row in pseudo.rows():
        target = row.target
        entries.append(
            {
                "image_id": target.image_id,
                "proposal_id": target.proposal_id,
                "category_id": class_index.category_id(target.y_hat) if class_index else target.y_hat,
                "bbox": target.b_t.to_xywh(),
                "xyxy": list(target.b_t.as_tuple()),
                "score": target.q_t,
                "q_t": target.q_t,
                "stage_mask": [bool(p) for p in row.passes],
            }
        )
    written = dump_json(entries, path, indent=None)
    logger.info("Exported %d pseudo-labels to %s", len(entries), written)
    return written
