"""
Test cases for the toy cascade trainer and its experiments.
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from pycascade.apm import ClassStatsStore, FixedThresholds
from pycascade.core import ConfigError, DivergenceError, ValidationError
from pycascade.cpl import unlabeled_batch
from pycascade.synthetic import SyntheticConfig, generate_world
from pycascade.trainer import (
    ComparisonTable,
    ToyModel,
    TrainConfig,
    ablation_configs,
    ablation_suite,
    accuracy,
    balanced_weights,
    compare,
    ensemble_records,
    make_schedule,
    new_model,
    objective,
    stage_records,
    sweep,
    train,
)

WORLD_CONFIG = SyntheticConfig(num_classes=4, num_images=40, num_test_images=20, feature_dim=8, seed=0)
FAST = TrainConfig(total_iters=12, batch_labeled=16, batch_unlabeled=16, log_every=5, apm_min_samples=2)


@pytest.fixture(scope="module")
def world():
    return generate_world(WORLD_CONFIG)


def test_model_shapes(world) -> None:
    """Test head outputs and the flat parameter view."""
    model = new_model(world, FAST)
    n = len(world.labeled)
    assert model.num_stages == 3 and model.num_classes == 4
    assert model.probs(world.labeled.features).shape == (3, n, 5)
    np.testing.assert_allclose(model.probs(world.labeled.features).sum(axis=2), 1.0)
    assert model.boxes(world.labeled.features, world.labeled.proposal_boxes).shape == (3, n, 4)
    rebuilt = model.with_parameters(model.parameters())
    np.testing.assert_array_equal(rebuilt.parameters(), model.parameters())
    assert len(stage_records(model, world.labeled.subset(np.arange(5)))) == 15


def test_ensemble_records_are_per_image(world) -> None:
    """Test that ensemble records cover every proposal once, grouped by image."""
    batch = world.labeled.subset(np.arange(10))
    records = ensemble_records(new_model(world, FAST), batch)
    assert sum(len(v) for v in records.values()) == 10
    assert sorted(r.proposal_id for v in records.values() for r in v) == list(range(10))
    assert all(r.image_id == image_id for image_id, v in records.items() for r in v)


def test_objective_gradient_matches_finite_differences(world) -> None:
    """Test the analytic gradient of the labeled plus pseudo-labeled objective."""
    model = new_model(world, replace(FAST, init_scale=0.3))
    labeled = world.labeled.subset(np.arange(12))
    unlabeled = world.unlabeled.subset(np.arange(12))
    pseudo = unlabeled_batch(stage_records(model, unlabeled), FixedThresholds((0.0, 0.0, 0.0)), None)
    breakdown, grads = objective(model, labeled, unlabeled, pseudo, lambda_u=1.5)
    assert breakdown.total == pytest.approx(breakdown.supervised + 1.5 * breakdown.unsupervised)
    params = model.parameters()
    analytic = grads.flat()
    rng = np.random.default_rng(0)
    h = 1e-6
    for i in rng.choice(len(params), size=40, replace=False):
        step = np.zeros_like(params)
        step[i] = h
        plus = objective(model.with_parameters(params + step), labeled, unlabeled, pseudo, 1.5)[0].total
        minus = objective(model.with_parameters(params - step), labeled, unlabeled, pseudo, 1.5)[0].total
        assert analytic[i] == pytest.approx((plus - minus) / (2 * h), rel=1e-4, abs=1e-6)


def test_lambda_zero_equals_supervised_run(world) -> None:
    """Test that a zero unlabeled weight reproduces the supervised-only run exactly."""
    model = new_model(world, FAST)
    weighted, log_zero = train(model, world, replace(FAST, lambda_u=0.0, burn_in_iters=0))
    supervised, log_sup = train(model, world, replace(FAST, burn_in_iters=FAST.total_iters))
    np.testing.assert_array_equal(weighted.parameters(), supervised.parameters())
    assert [r["total"] for r in log_zero.losses] == [r["total"] for r in log_sup.losses]


def test_burn_in_covering_run_retains_nothing(world) -> None:
    """Test that no pseudo-labels are produced before burn-in ends."""
    _, log = train(new_model(world, FAST), world, replace(FAST, burn_in_iters=FAST.total_iters))
    assert all(log.total_retained(k) == 0 for k in (1, 2, 3))
    assert all(row["cls_unlabeled"] == 0.0 for row in log.losses)
    assert all(math.isnan(row["pseudo_accuracy"]) for row in log.losses)


def test_training_is_reproducible(world) -> None:
    """Test that one seed gives one trajectory."""
    model = new_model(world, FAST)
    a, log_a = train(model, world, FAST)
    b, log_b = train(model, world, FAST)
    np.testing.assert_array_equal(a.parameters(), b.parameters())
    assert [r["total"] for r in log_a.losses] == [r["total"] for r in log_b.losses]
    c, _ = train(model, world, replace(FAST, seed=1))
    assert not np.array_equal(a.parameters(), c.parameters())


def test_train_does_not_modify_input_model(world) -> None:
    """Test that training works on a copy."""
    model = new_model(world, FAST)
    before = model.parameters()
    train(model, world, FAST)
    np.testing.assert_array_equal(model.parameters(), before)


def test_run_log_contents(world, tmp_path) -> None:
    """Test the per-iteration rows and the written CSV files."""
    _, log = train(new_model(world, FAST), world, FAST)
    assert len(log.losses) == FAST.total_iters
    assert {"iteration", "total", "retained_1", "retained_3", "pseudo_accuracy"} <= set(log.final)
    logged = sorted({row["iteration"] for row in log.thresholds})
    assert logged == [0, 5, 10, 11]
    assert len(log.confidence) == len(log.thresholds)
    paths = log.write(tmp_path)
    assert [p.name for p in paths] == ["losses.csv", "thresholds.csv", "confidence_trajectory.csv"]
    header = paths[0].read_text(encoding="utf-8").splitlines()[0]
    assert header.startswith("iteration,cls_labeled,reg_labeled")


def test_thresholds_stay_monotone_through_a_full_run(world) -> None:
    """Test that every iteration of a default-length run keeps per-class thresholds non-decreasing."""
    config = replace(TrainConfig(), apm_min_samples=2, log_every=50)
    _, log = train(new_model(world, config), world, config)
    assert len(log.losses) == config.total_iters
    assert all(row["monotone"] for row in log.losses)
    assert any(row["count"] >= 2 for row in log.confidence)


def test_balanced_sampling_weights() -> None:
    """Test inverse-frequency sampling probabilities."""
    weights = balanced_weights(np.array([0, 0, 0, 1, 2, 2]))
    np.testing.assert_allclose(weights, [1 / 9, 1 / 9, 1 / 9, 1 / 3, 1 / 6, 1 / 6])
    assert TrainConfig().labeled_sampling == "balanced"
    with pytest.raises(ConfigError):
        TrainConfig(labeled_sampling="stratified")


def test_uniform_sampling_changes_the_run(world) -> None:
    """Test that the labeled sampling switch is honored."""
    balanced, _ = train(new_model(world, FAST), world, FAST)
    uniform, _ = train(new_model(world, FAST), world, replace(FAST, labeled_sampling="uniform"))
    assert not np.array_equal(balanced.parameters(), uniform.parameters())


def test_fixed_schedule_logs_no_confidence(world) -> None:
    """Test that without adaptive mining only thresholds are logged."""
    _, log = train(new_model(world, FAST), world, replace(FAST, apm=False))
    assert log.confidence == []
    assert {row["tau_1"] for row in log.thresholds} == {0.5}


def test_make_schedule() -> None:
    """Test the schedule chosen by the apm switch."""
    store = make_schedule(FAST, 4)
    assert isinstance(store, ClassStatsStore)
    assert store.config.min_samples == 2
    fixed = make_schedule(replace(FAST, apm=False, fixed_thresholds=(0.3, 0.4, 0.5)), 4)
    assert fixed == FixedThresholds((0.3, 0.4, 0.5))


def test_divergence_is_reported(world) -> None:
    """Test that an exploding loss stops training."""
    with pytest.raises(DivergenceError):
        train(new_model(world, FAST), world, replace(FAST, divergence_limit=1e-9))


def test_stage_mismatch(world) -> None:
    """Test schedules and models that disagree on the stage count."""
    with pytest.raises(ConfigError):
        train(new_model(world, FAST), world, replace(FAST, epsilons=(1.0, 2.0), default_thresholds=(0.5, 0.6)))
    with pytest.raises(ConfigError):
        new_model(world, replace(FAST, num_stages=5))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"total_iters": -1},
        {"burn_in_iters": 20},
        {"teacher_mode": "mean_teacher"},
        {"lambda_u": -0.5},
        {"learning_rate": 0.0},
        {"batch_labeled": 0},
        {"cls_kind": "hinge"},
    ],
)
def test_train_config_validation(kwargs: dict) -> None:
    """Test that invalid training settings raise ConfigError."""
    with pytest.raises(ConfigError):
        replace(FAST, **kwargs)


def test_burn_in_default() -> None:
    """Test the default burn-in length."""
    assert TrainConfig(total_iters=300).burn_in == 60
    assert TrainConfig(total_iters=300, burn_in_iters=0).burn_in == 0
    assert TrainConfig.from_dict({"burn_in_iters": None, "nms_threshold": None}).nms_threshold is None


def test_separable_world_is_learned() -> None:
    """Test that well separated classes are classified almost perfectly."""
    config = SyntheticConfig(
        num_classes=3, exponent=0.0, num_images=60, num_test_images=30, feature_dim=8,
        separation=6.0, feature_noise=0.3, group_noise={}, seed=2,
    )
    world = generate_world(config)
    model, _ = train(new_model(world, FAST), world, replace(FAST, total_iters=150, learning_rate=0.05))
    report = accuracy(model, world.test)
    assert report.overall > 0.95
    assert set(report.per_class) == {0, 1, 2}
    assert accuracy(model, world.test, stage=3).overall > 0.9


def test_ablation_configs() -> None:
    """Test the four ablation rows and their schedules."""
    rows = ablation_configs(FAST)
    assert [name for name, _, _ in rows] == ["baseline", "+APM", "+CPL", "CPL+APM"]
    baseline = rows[0][2]
    assert baseline.teacher_mode == "self_per_head"
    assert baseline.fixed_thresholds == (0.6, 0.6, 0.6)
    assert rows[1][2].epsilons == (1.5, 1.5, 1.5)
    full = rows[3][2]
    assert full.apm and full.teacher_mode == "ensemble"
    assert full.epsilons == FAST.epsilons


def test_sweep_over_stages(world) -> None:
    """Test the stage-count sweep and its table."""
    table = sweep(world, replace(FAST, total_iters=4), "num_stages")
    assert [r.name for r in table.rows] == ["K=1", "K=2", "K=3"]
    assert all(0.0 <= r.overall <= 1.0 for r in table.rows)
    markdown = table.to_markdown()
    assert markdown.startswith("### Sweep over num_stages")
    assert "| K | overall |" in markdown
    assert table.to_dict()["rows"][0]["K"] == 1
    with pytest.raises(KeyError):
        table.row("K=9")
    with pytest.raises(ValidationError):
        sweep(world, FAST, "learning_rate")


def test_sweep_over_lambda(world) -> None:
    """Test that explicit sweep values override the defaults."""
    table = sweep(world, replace(FAST, total_iters=3), "lambda_u", values=[0.0, 2.0])
    assert isinstance(table, ComparisonTable)
    assert [r.settings["lambda_u"] for r in table.rows] == [0.0, 2.0]


@pytest.mark.slow
def test_ablation_suite(world) -> None:
    """Test the multi-seed ablation and burn-in tables."""
    base = replace(FAST, total_iters=40)
    ablation, burn_in = ablation_suite(world, base, seeds=(0, 1))
    assert [r.name for r in ablation.rows] == ["baseline", "+APM", "+CPL", "CPL+APM"]
    assert ablation.seeds == (0, 1)
    assert [r.name for r in burn_in.rows] == ["burn-in", "no burn-in"]
    assert burn_in.row("burn-in").settings == {"burn_in_iters": 8}
    for row in ablation.rows + burn_in.rows:
        assert 0.0 <= row.overall <= 1.0
    assert ablation.row("baseline").retained >= 0
    assert "CPL+APM" in ablation.to_markdown()


@pytest.mark.slow
def test_cascade_pseudo_labels_keep_up_with_supervised_training() -> None:
    """Test that the full method does not fall behind the supervised-only run on a larger world."""
    world = generate_world(SyntheticConfig(num_classes=10, num_images=300, num_test_images=150, seed=11))
    base = TrainConfig(total_iters=200)

    def score(config: TrainConfig) -> float:
        model, _ = train(new_model(world, config), world, config)
        return accuracy(model, world.test).overall

    full = np.mean([score(replace(base, seed=s)) for s in (0, 1, 2)])
    supervised = np.mean([score(replace(base, seed=s, burn_in_iters=200)) for s in (0, 1, 2)])
    assert full >= supervised - 0.05


@pytest.mark.slow
def test_ablation_directions_over_five_worlds() -> None:
    """Test that each component beats the baseline and both together beat either one alone."""
    overall: dict[str, list[float]] = {}
    rare: list[float] = []
    for world_seed in range(5):
        world = generate_world(SyntheticConfig(seed=world_seed))
        table = compare(world, ablation_configs(TrainConfig()), seeds=(0, 1), title="Ablation")
        for row in table.rows:
            overall.setdefault(row.name, []).append(row.overall)
        rare.append(table.row("CPL+APM").per_group["rare"])
    mean = {name: float(np.mean(values)) for name, values in overall.items()}
    assert mean["baseline"] < min(mean["+CPL"], mean["+APM"])
    assert max(mean["+CPL"], mean["+APM"]) < mean["CPL+APM"]
    assert np.mean(rare) > 0.0


@pytest.mark.slow
def test_burn_in_pays_off_under_a_heavy_unlabeled_weight() -> None:
    """Test that burn-in does not lose to starting pseudo-labeling at once, averaged over five worlds."""
    base = replace(TrainConfig(), lambda_u=3.0)
    configs = [("burn-in", {}, base), ("no burn-in", {}, replace(base, burn_in_iters=0))]
    with_burn_in, without = [], []
    for world_seed in range(5):
        table = compare(generate_world(SyntheticConfig(seed=world_seed)), configs, seeds=(0, 1), title="Burn-in")
        with_burn_in.append(table.row("burn-in").overall)
        without.append(table.row("no burn-in").overall)
    assert np.mean(with_burn_in) >= np.mean(without)
