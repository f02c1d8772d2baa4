"""
Test cases for annotation erasure and pseudo-label recovery.
"""

import pytest

from pycascade.apm import FixedThresholds
from pycascade.core import (
    Annotation,
    BBox,
    Category,
    ClassIndex,
    DatasetBundle,
    GroupScheme,
    ImageInfo,
    ValidationError,
)
from pycascade.cpl import PseudoBox, TeacherTarget, gate
from pycascade.saod import ErasureMode, erase, recovery_score


def make_bundle(counts: dict[int, int], groups: dict[int, str]) -> DatasetBundle:
    annotations = []
    next_id = 1
    for category_id, n in counts.items():
        for i in range(n):
            annotations.append(Annotation(next_id, 1 + i % 3, category_id, BBox(i, 0, i + 5, 5)))
            next_id += 1
    categories = tuple(Category(c, f"c{c}", counts[c], groups[c]) for c in sorted(counts))
    images = tuple(ImageInfo(i, 64, 64) for i in (1, 2, 3))
    return DatasetBundle(images, tuple(annotations), categories, group_scheme=GroupScheme.LVIS3)


BUNDLE = make_bundle({1: 200, 2: 20, 3: 3, 4: 1, 5: 0}, {1: "frequent", 2: "common", 3: "rare", 4: "rare", 5: "rare"})


@pytest.mark.parametrize("ratio", [0.0, 0.1, 0.3, 0.5, 0.7, 1.0])
def test_exact_erasure_counts(ratio: float) -> None:
    """Test that exactly floor(ratio * n) annotations go per category."""
    sparse, report = erase(BUNDLE, ratio, seed=1)
    for category_id, before in report.counts_before.items():
        removed = sum(a.category_id == category_id for a in report.removed)
        assert removed == int(ratio * before + 1e-9)
        assert report.counts_after[category_id] == before - removed
        assert sparse.category(category_id).instance_count == report.counts_after[category_id]
    assert len(sparse.annotations) + len(report.removed) == len(BUNDLE.annotations)
    assert {a.id for a in sparse.annotations}.isdisjoint(report.removed_ids)


def test_erasure_is_reproducible() -> None:
    """Test that one seed removes the same annotations."""
    assert erase(BUNDLE, 0.5, seed=4)[1].removed_ids == erase(BUNDLE, 0.5, seed=4)[1].removed_ids
    assert erase(BUNDLE, 0.5, seed=4)[1].removed_ids != erase(BUNDLE, 0.5, seed=5)[1].removed_ids


def test_categories_use_independent_streams() -> None:
    """Test that a category's erasure does not depend on other categories."""
    alone = make_bundle({2: 20}, {2: "common"})
    removed_alone = {a.box for a in erase(alone, 0.5, seed=7)[1].removed}
    removed_mixed = {a.box for a in erase(BUNDLE, 0.5, seed=7)[1].removed if a.category_id == 2}
    assert removed_alone == removed_mixed


def test_preservation_by_group() -> None:
    """Test per-group preservation of classes after heavy erasure."""
    # exact erasure below ratio 1 never empties a class: floor(0.7 * 1) == 0
    _, report = erase(BUNDLE, 0.7, seed=0)
    assert report.preservation == {"rare": 1.0, "common": 1.0, "frequent": 1.0}
    assert report.overall_preservation == 1.0
    _, everything = erase(BUNDLE, 1.0)
    assert everything.preservation == {"rare": 0.0, "common": 0.0, "frequent": 0.0}
    assert everything.overall_preservation == 0.0
    _, no_rare = erase(make_bundle({1: 5, 2: 0}, {1: "frequent", 2: "rare"}), 1.0)
    assert no_rare.preservation == {"rare": None, "common": None, "frequent": 0.0}


def test_bernoulli_erasure() -> None:
    """Test the independent-coin mode."""
    sparse, report = erase(BUNDLE, 0.5, seed=2, mode="bernoulli")
    assert report.mode is ErasureMode.BERNOULLI
    assert 60 < sum(a.category_id == 1 for a in report.removed) < 140
    assert len(erase(BUNDLE, 0.0, mode="bernoulli")[1].removed) == 0
    assert len(erase(BUNDLE, 1.0, mode="bernoulli")[0].annotations) == 0
    assert sparse.group_scheme is GroupScheme.LVIS3


def test_erasure_report_to_dict() -> None:
    """Test the JSON form of an erasure report."""
    _, report = erase(BUNDLE, 0.5, seed=3)
    data = report.to_dict()
    assert data["num_removed"] == len(data["removed_annotation_ids"]) == 100 + 10 + 1
    assert data["counts_before"]["5"] == 0
    assert data["mode"] == "exact"


@pytest.mark.parametrize("ratio", [-0.1, 1.5, float("nan")])
def test_invalid_ratio(ratio: float) -> None:
    """Test that ratios outside [0, 1] are rejected."""
    with pytest.raises(ValidationError):
        erase(BUNDLE, ratio)


def test_recovery_score() -> None:
    """Test recovery of erased annotations by pseudo-labels of the right class."""
    index = ClassIndex((1, 2))
    erased = [
        Annotation(1, 1, 1, BBox(0, 0, 10, 10)),
        Annotation(2, 1, 2, BBox(20, 20, 30, 30)),
        Annotation(3, 2, 1, BBox(0, 0, 10, 10)),
    ]
    pseudo = [
        PseudoBox(1, 0, BBox(0, 0, 10, 9), 0.9),
        PseudoBox(1, 0, BBox(20, 20, 30, 30), 0.8),
        PseudoBox(2, 0, BBox(0, 0, 10, 10), 0.7),
        PseudoBox(2, 0, BBox(0, 0, 10, 10), 0.6),
    ]
    assert recovery_score(pseudo, erased, index) == pytest.approx(2 / 3)
    assert recovery_score([], erased, index) == 0.0
    assert recovery_score(pseudo, [], index) == 1.0


def test_recovery_score_from_pseudo_label_set() -> None:
    """Test that a pseudo-label set contributes its stage-1 labels."""
    index = ClassIndex((1,))
    targets = [
        TeacherTarget(1, 0, (0.55, 0.45), BBox(0, 0, 10, 10)),
        TeacherTarget(1, 1, (0.3, 0.7), BBox(20, 20, 30, 30)),
    ]
    pseudo = gate(targets, FixedThresholds((0.5, 0.6)))
    erased = [Annotation(1, 1, 1, BBox(0, 0, 10, 10)), Annotation(2, 1, 1, BBox(20, 20, 30, 30))]
    assert recovery_score(pseudo, erased, index) == 0.5


def test_bernoulli_preservation_falls_with_ratio() -> None:
    """Test that heavier Bernoulli erasure empties more rare classes."""
    counts = {c: 1 + c % 3 for c in range(1, 21)}
    counts.update({21: 15, 22: 40, 23: 150})
    groups = {c: "rare" for c in range(1, 21)}
    groups.update({21: "common", 22: "common", 23: "frequent"})
    bundle = make_bundle(counts, groups)
    light = [erase(bundle, 0.2, seed, mode="bernoulli")[1] for seed in range(10)]
    heavy = [erase(bundle, 0.4, seed, mode="bernoulli")[1] for seed in range(10)]
    for a, b in zip(light, heavy):
        assert a.preservation["rare"] >= b.preservation["rare"]
        assert a.overall_preservation >= b.overall_preservation
    assert sum(r.preservation["rare"] for r in light) > sum(r.preservation["rare"] for r in heavy)
    assert all(r.preservation["frequent"] == 1.0 for r in heavy)
