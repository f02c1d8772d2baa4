"""
Test cases for the synthetic long-tailed world.
"""

import numpy as np
import pytest

from pycascade.core import ConfigError, Split
from pycascade.synthetic import (
    BOX_QUANTUM,
    SyntheticConfig,
    class_centroids,
    class_weights,
    generate_dataset,
    generate_test_bundle,
    generate_world,
    rank_profile,
    simulate_detector,
)

SMALL = SyntheticConfig(num_classes=6, num_images=20, num_test_images=5, seed=3)


def test_class_weights_follow_power_law() -> None:
    """Test normalized, decreasing class weights."""
    weights = class_weights(SyntheticConfig(num_classes=4, exponent=1.0))
    np.testing.assert_allclose(weights, np.array([1, 1 / 2, 1 / 3, 1 / 4]) / (25 / 12))
    assert weights.sum() == pytest.approx(1.0)


def test_generate_dataset_is_deterministic() -> None:
    """Test that one seed gives one dataset."""
    assert generate_dataset(SMALL) == generate_dataset(SMALL)
    other = generate_dataset(SyntheticConfig(num_classes=6, num_images=20, num_test_images=5, seed=4))
    assert other[0].annotations != generate_dataset(SMALL)[0].annotations


def test_generate_dataset_split() -> None:
    """Test the labeled/unlabeled split and the shared class table."""
    labeled, unlabeled = generate_dataset(SMALL)
    assert labeled.split is Split.LABELED and unlabeled.split is Split.UNLABELED
    assert [im.id for im in labeled.images] == list(range(1, 11))
    assert [im.id for im in unlabeled.images] == list(range(11, 21))
    assert unlabeled.annotations == ()
    assert all(a.image_id > 10 for a in unlabeled.audit_annotations())
    assert labeled.categories == unlabeled.categories
    assert sum(c.instance_count for c in labeled.categories) == len(labeled.annotations)
    assert all(c.group in ("rare", "common", "frequent") for c in labeled.categories)
    ids = [a.id for a in labeled.annotations + unlabeled.audit_annotations()]
    assert ids == list(range(1, len(ids) + 1))


def test_images_do_not_depend_on_dataset_size() -> None:
    """Test that an image's objects only depend on the seed and its id."""
    small = generate_dataset(SMALL)[0].annotations_by_image()
    large = generate_dataset(SyntheticConfig(num_classes=6, num_images=40, num_test_images=5, seed=3))
    large_by_image = large[0].annotations_by_image()
    for image_id in range(1, 11):
        assert [(a.category_id, a.box) for a in small[image_id]] == [
            (a.category_id, a.box) for a in large_by_image[image_id]
        ]


def test_dataset_is_long_tailed() -> None:
    """Test that the head class is far more frequent than the tail class."""
    labeled, _ = generate_dataset(SyntheticConfig(num_classes=20, num_images=300, seed=1))
    counts = [c.instance_count for c in labeled.categories]
    assert counts[0] > 10 * max(counts[-1], 1)
    assert labeled.category(1).group == "frequent"


def test_boxes_lie_inside_images() -> None:
    """Test the box sizes and extents of sampled objects."""
    labeled, _ = generate_dataset(SMALL)
    for a in labeled.annotations:
        assert 0 <= a.box.x_min and a.box.x_max <= SMALL.image_size
        assert SMALL.min_box - 0.5 <= a.box.width <= SMALL.max_box + 0.5


def test_test_bundle_continues_ids() -> None:
    """Test that held-out images and annotations follow the training ones."""
    labeled, unlabeled = generate_dataset(SMALL)
    test = generate_test_bundle(SMALL)
    assert [im.id for im in test.images] == list(range(21, 26))
    assert test.categories == labeled.categories
    assert test.annotations[0].id == len(labeled.annotations) + len(unlabeled.audit_annotations()) + 1


def test_simulate_detector_layout() -> None:
    """Test that every proposal has K aligned, ordered stage records."""
    labeled, _ = generate_dataset(SMALL)
    records = simulate_detector(labeled, SMALL)
    keys = [(r.image_id, r.proposal_id, r.stage) for r in records]
    assert keys == sorted(keys)
    per_proposal: dict[tuple[int, int], list[int]] = {}
    for r in records:
        per_proposal.setdefault((r.image_id, r.proposal_id), []).append(r.stage)
    assert all(stages == [1, 2, 3] for stages in per_proposal.values())
    assert len(per_proposal) >= len(labeled.annotations)
    for r in records:
        assert r.num_classes == SMALL.num_classes
        grid = np.asarray(r.box.as_tuple()) / BOX_QUANTUM
        assert np.allclose(grid, np.round(grid))


def test_simulate_detector_is_deterministic() -> None:
    """Test reproducible detector output."""
    _, unlabeled = generate_dataset(SMALL)
    assert simulate_detector(unlabeled, SMALL) == simulate_detector(unlabeled, SMALL)


def test_perfect_detector() -> None:
    """Test that quality 1 scores every true class with probability one."""
    labeled, _ = generate_dataset(SMALL)
    records = simulate_detector(labeled, SMALL, quality=1.0)
    index = labeled.class_index
    by_image = labeled.annotations_by_image()
    for r in records:
        gts = by_image[r.image_id]
        if r.proposal_id < len(gts):
            assert r.class_probs[index.slot(gts[r.proposal_id].category_id)] == 1.0
        else:
            assert r.background == 1.0
    with pytest.raises(ConfigError):
        simulate_detector(labeled, SMALL, quality=1.5)


def test_scores_improve_with_stage_and_frequency() -> None:
    """Test the stage gain and the bias against rare classes."""
    config = SyntheticConfig(seed=5)
    labeled, _ = generate_dataset(config)
    index = labeled.class_index
    group_of = {c.id: c.group for c in labeled.categories}
    by_image = labeled.annotations_by_image()
    by_stage: dict[int, list[float]] = {1: [], 2: [], 3: []}
    by_group: dict[str, list[float]] = {}
    for r in simulate_detector(labeled, config):
        gts = by_image[r.image_id]
        if r.proposal_id >= len(gts):
            continue
        category_id = gts[r.proposal_id].category_id
        p = r.class_probs[index.slot(category_id)]
        by_stage[r.stage].append(p)
        if r.stage == 1:
            by_group.setdefault(group_of[category_id], []).append(p)
    assert np.mean(by_stage[1]) < np.mean(by_stage[2]) < np.mean(by_stage[3])
    assert np.mean(by_group["rare"]) < np.mean(by_group["frequent"]) - 0.1


def test_generate_world_shapes() -> None:
    """Test proposal sets of the toy world."""
    world = generate_world(SMALL)
    for proposals, bundle in (
        (world.labeled, world.labeled_bundle),
        (world.unlabeled, world.unlabeled_bundle),
        (world.test, world.test_bundle),
    ):
        n = len(proposals)
        assert n >= len(bundle.audit_annotations())
        assert proposals.features.shape == (SMALL.num_stages, n, SMALL.feature_dim + 4)
        assert proposals.proposal_boxes.shape == (n, 4)
        assert ((proposals.labels >= 0) & (proposals.labels <= SMALL.num_classes)).all()
        background = proposals.labels == SMALL.num_classes
        assert all((g == "background") == bool(bg) for g, bg in zip(proposals.groups, background))
    assert world.num_classes == 6
    subset = world.labeled.subset(np.array([0, 2]))
    assert len(subset) == 2
    assert subset.groups == (world.labeled.groups[0], world.labeled.groups[2])
    np.testing.assert_array_equal(subset.features[:, 1], world.labeled.features[:, 2])


def test_class_centroids() -> None:
    """Test centroid norms."""
    centroids = class_centroids(SMALL)
    assert centroids.shape == (SMALL.num_classes + 1, SMALL.feature_dim)
    np.testing.assert_allclose(np.linalg.norm(centroids, axis=1), SMALL.separation)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"num_classes": 1},
        {"num_images": 1},
        {"labeled_fraction": 1.0},
        {"num_stages": 0},
        {"min_box": 300.0},
        {"fp_rate": -1.0},
        {"feature_dim": 0},
        {"stage_noise_scale": -1.0},
        {"group_scheme": "cocolt5"},
        {"group_scheme": "cocolt4", "group_bias": {"rare": -0.3}},
        {"group_noise": {"rare": "loud"}},
        {"group_bias": [-0.3]},
    ],
)
def test_config_validation(kwargs: dict) -> None:
    """Test that invalid world parameters raise ConfigError."""
    with pytest.raises(ConfigError):
        SyntheticConfig(**kwargs)


def test_config_round_trip() -> None:
    """Test that a config survives its dict form."""
    config = SyntheticConfig(num_classes=8, group_bias={"rare": -0.3})
    assert SyntheticConfig.from_dict(config.to_dict()) == config


def test_rank_profile_covers_every_scheme() -> None:
    """Test that default group tables follow the group order of each scheme."""
    assert rank_profile("cocolt4", -0.3) == pytest.approx({"bin1": -0.3, "bin2": -0.2, "bin3": -0.1, "bin4": 0.0})
    assert SyntheticConfig().bias_by_group == pytest.approx({"rare": -0.3, "common": -0.15, "frequent": 0.0})
    config = SyntheticConfig(group_scheme="cocolt4")
    assert config.bias_by_group["bin1"] == pytest.approx(-0.3)
    assert config.noise_by_group == pytest.approx({"bin1": 0.6, "bin2": 0.4, "bin3": 0.2, "bin4": 0.0})
    partial = SyntheticConfig(group_scheme="cocolt4", group_bias={"bin1": -0.5})
    assert partial.bias_by_group == {"bin1": -0.5, "bin2": 0.0, "bin3": 0.0, "bin4": 0.0}


def test_cocolt4_world_is_biased_against_its_rarest_bin() -> None:
    """Test that a four-bin world scores its rarest bin below the next one."""
    config = SyntheticConfig(seed=5, group_scheme="cocolt4")
    labeled, _ = generate_dataset(config)
    group_of = {c.id: c.group for c in labeled.categories}
    assert {"bin1", "bin2"} <= set(group_of.values())
    index = labeled.class_index
    by_image = labeled.annotations_by_image()
    by_group: dict[str, list[float]] = {}
    for r in simulate_detector(labeled, config):
        gts = by_image[r.image_id]
        if r.stage != 1 or r.proposal_id >= len(gts):
            continue
        category_id = gts[r.proposal_id].category_id
        by_group.setdefault(group_of[category_id], []).append(r.class_probs[index.slot(category_id)])
    assert np.mean(by_group["bin1"]) < np.mean(by_group["bin2"])
