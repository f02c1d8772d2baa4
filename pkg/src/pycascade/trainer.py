"""
Desk-scale closed-loop semi-supervised training.

A :class:`ToyModel` holds K cascade heads, each a linear-softmax classifier
and a linear box regressor over per-stage proposal features. :func:`train`
runs plain gradient descent: labeled losses throughout, and after burn-in the
gated unlabeled losses of the cascade pseudo-labels weighted by ``lambda_u``.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .apm import APMConfig, ClassStatsStore, FixedThresholds, ThresholdSchedule, is_monotone, populate_from_labeled
from .core import (
    Annotation,
    BBox,
    ClassIndex,
    ConfigError,
    ConfigMixin,
    DetectionRecord,
    DivergenceError,
    ValidationError,
)
from .cpl import PseudoLabelSet, TeacherMode, unlabeled_batch
from .losses import (
    LossBreakdown,
    LossConfig,
    cls_loss_and_grad_batch,
    reg_loss_and_grad_batch,
    softmax,
)
from .synthetic import ProposalSet, ToyWorld

logger = logging.getLogger(__name__)

# Random stream tags of the training loop
STREAM_INIT = 10
STREAM_LABELED = 11
STREAM_UNLABELED = 12

EPSILON_SWEEP = ((0.0, 0.0, 0.0), (0.0, 1.0, 2.0), (1.0, 2.0, 3.0), (1.0, 1.5, 2.0))
LAMBDA_SWEEP = (0.5, 1.0, 1.5, 2.0)
STAGE_SWEEP = (1, 2, 3, 4, 5)
LABELED_SAMPLING = ("uniform", "balanced")


@dataclass(frozen=True)
class TrainConfig(ConfigMixin):
    """
    Training settings.

    ``burn_in_iters`` defaults to 20% of ``total_iters``. With ``apm`` off the
    gate uses ``fixed_thresholds``; with it on, a per-class threshold store
    with ``epsilons``. ``num_stages`` defaults to the world's stage count.
    ``labeled_sampling="balanced"`` draws labeled proposals with weights
    inversely proportional to their class frequency, background included.
    """
    total_iters: int = 300
    burn_in_iters: int | None = None
    lambda_u: float = 1.0
    teacher_mode: str = "ensemble"
    apm: bool = True
    epsilons: tuple[float, ...] = (1.0, 1.5, 2.0)
    fixed_thresholds: tuple[float, ...] = (0.5, 0.6, 0.7)
    default_thresholds: tuple[float, ...] = (0.5, 0.6, 0.7)
    apm_capacity: int = 256
    apm_min_samples: int = 8
    num_stages: int | None = None
    batch_labeled: int = 64
    batch_unlabeled: int = 128
    labeled_sampling: str = "balanced"
    learning_rate: float = 0.5
    iou_threshold: float = 0.5
    nms_threshold: float | None = 0.5
    cls_kind: str = "cross_entropy"
    reg_kind: str = "smooth_l1"
    init_scale: float = 0.01
    divergence_limit: float = 1e6
    log_every: int = 25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        if self.burn_in_iters is not None:
            if isinstance(self.burn_in_iters, bool) or not isinstance(self.burn_in_iters, int):
                raise ConfigError("burn_in_iters must be an integer")
            if not 0 <= self.burn_in_iters <= self.total_iters:
                raise ConfigError("burn_in_iters must lie in [0, total_iters]")
        try:
            TeacherMode(self.teacher_mode)
        except ValueError:
            raise ConfigError(f"Unknown teacher mode {self.teacher_mode!r}") from None
        if self.lambda_u < 0 or self.learning_rate <= 0:
            raise ConfigError("lambda_u must be >= 0 and learning_rate > 0")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1 or self.log_every < 1:
            raise ConfigError("batch sizes and log_every must be >= 1")
        if self.labeled_sampling not in LABELED_SAMPLING:
            raise ConfigError(f"labeled_sampling must be one of {LABELED_SAMPLING}, got {self.labeled_sampling!r}")
        LossConfig(cls_kind=self.cls_kind, reg_kind=self.reg_kind)

    @property
    def burn_in(self) -> int:
        if self.burn_in_iters is None:
            return int(0.2 * self.total_iters)
        return self.burn_in_iters

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(cls_kind=self.cls_kind, reg_kind=self.reg_kind)


@dataclass
class ToyModel:
    """
    K cascade heads over proposal features.

    Head ``k`` maps features ``x`` to class probabilities ``softmax(x @ W[k] + b[k])``
    and to a box ``proposal / box_scale + x @ R[k] + r[k]`` in units of ``box_scale``.
    """
    W: np.ndarray
    b: np.ndarray
    R: np.ndarray
    r: np.ndarray
    box_scale: float = 64.0

    @classmethod
    def initialize(
        cls, num_classes: int, input_dim: int, num_stages: int, seed: int = 0,
        scale: float = 0.01, box_scale: float = 64.0,
    ) -> ToyModel:
        rng = np.random.default_rng([seed, STREAM_INIT])
        return cls(
            W=rng.normal(0.0, scale, size=(num_stages, input_dim, num_classes + 1)),
            b=np.zeros((num_stages, num_classes + 1)),
            R=rng.normal(0.0, scale, size=(num_stages, input_dim, 4)),
            r=np.zeros((num_stages, 4)),
            box_scale=box_scale,
        )

    @property
    def num_stages(self) -> int:
        return int(self.W.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.W.shape[2]) - 1

    def copy(self) -> ToyModel:
        return ToyModel(self.W.copy(), self.b.copy(), self.R.copy(), self.r.copy(), self.box_scale)

    def logits(self, features: np.ndarray) -> np.ndarray:
        """Shape ``(K, n, C + 1)`` for features of shape ``(>=K, n, F)``."""
        x = features[: self.num_stages]
        return np.einsum("knf,kfc->knc", x, self.W) + self.b[:, None, :]

    def probs(self, features: np.ndarray) -> np.ndarray:
        return softmax(self.logits(features))

    def boxes(self, features: np.ndarray, proposal_boxes: np.ndarray) -> np.ndarray:
        """Predicted corners in units of ``box_scale``, shape ``(K, n, 4)``."""
        x = features[: self.num_stages]
        return proposal_boxes[None] / self.box_scale + np.einsum("knf,kfd->knd", x, self.R) + self.r[:, None, :]

    def parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in (self.W, self.b, self.R, self.r)])

    def with_parameters(self, flat: np.ndarray) -> ToyModel:
        out, start = [], 0
        for p in (self.W, self.b, self.R, self.r):
            out.append(np.asarray(flat[start:start + p.size]).reshape(p.shape).copy())
            start += p.size
        return ToyModel(*out, box_scale=self.box_scale)


@dataclass
class Gradients:
    W: np.ndarray
    b: np.ndarray
    R: np.ndarray
    r: np.ndarray

    @classmethod
    def zeros_like(cls, model: ToyModel) -> Gradients:
        return cls(np.zeros_like(model.W), np.zeros_like(model.b), np.zeros_like(model.R), np.zeros_like(model.r))

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in (self.W, self.b, self.R, self.r)])


def _accumulate(
    model: ToyModel,
    grads: Gradients,
    stage: int,
    x: np.ndarray,
    d_logits: np.ndarray,
    d_boxes: np.ndarray,
    weight: float,
) -> None:
    grads.W[stage] += weight * x.T @ d_logits
    grads.b[stage] += weight * d_logits.sum(axis=0)
    grads.R[stage] += weight * x.T @ d_boxes
    grads.r[stage] += weight * d_boxes.sum(axis=0)


def _labeled_terms(
    model: ToyModel, batch: ProposalSet, loss: LossConfig
) -> tuple[float, float, Gradients]:
    """Mean (over proposals) of the stage-summed labeled losses and their gradient."""
    grads = Gradients.zeros_like(model)
    n = len(batch)
    if n == 0:
        return 0.0, 0.0, grads
    logits = model.logits(batch.features)
    boxes = model.boxes(batch.features, batch.proposal_boxes)
    fg = batch.labels < model.num_classes
    targets = batch.target_boxes / model.box_scale
    cls_total = reg_total = 0.0
    for k in range(model.num_stages):
        cls_values, d_logits = cls_loss_and_grad_batch(
            logits[k], batch.labels, loss.cls_kind, loss.focal_alpha, loss.focal_gamma
        )
        reg_values, d_boxes = reg_loss_and_grad_batch(boxes[k], targets, loss.reg_kind, loss.beta)
        reg_values = np.where(fg, reg_values, 0.0)
        d_boxes = d_boxes * fg[:, None]
        cls_total += math.fsum(cls_values)
        reg_total += math.fsum(reg_values)
        _accumulate(model, grads, k, batch.features[k], d_logits, d_boxes, 1.0 / n)
    return cls_total / n, reg_total / n, grads


def _unlabeled_terms(
    model: ToyModel, batch: ProposalSet, pseudo: PseudoLabelSet, loss: LossConfig
) -> tuple[float, float, Gradients]:
    """Mean (over all batch proposals) of the gated unlabeled losses and their gradient."""
    grads = Gradients.zeros_like(model)
    n = len(batch)
    if n == 0:
        return 0.0, 0.0, grads
    logits = model.logits(batch.features)
    boxes = model.boxes(batch.features, batch.proposal_boxes)
    cls_total = reg_total = 0.0
    for k in range(1, model.num_stages + 1):
        rows = [(row.target.proposal_id, row.target_for(k)) for row in pseudo.rows() if row.passes[k - 1]]
        if not rows:
            continue
        idx = np.array([pid for pid, _ in rows], dtype=int)
        labels = np.array([t.y_hat for _, t in rows], dtype=int)
        targets = np.array([t.b_t.as_tuple() for _, t in rows]) / model.box_scale
        cls_values, d_logits = cls_loss_and_grad_batch(
            logits[k - 1, idx], labels, loss.cls_kind, loss.focal_alpha, loss.focal_gamma
        )
        reg_values, d_boxes = reg_loss_and_grad_batch(boxes[k - 1, idx], targets, loss.reg_kind, loss.beta)
        cls_total += math.fsum(cls_values)
        reg_total += math.fsum(reg_values)
        _accumulate(model, grads, k - 1, batch.features[k - 1, idx], d_logits, d_boxes, 1.0 / n)
    return cls_total / n, reg_total / n, grads


def objective(
    model: ToyModel,
    labeled: ProposalSet,
    unlabeled: ProposalSet | None = None,
    pseudo: PseudoLabelSet | None = None,
    lambda_u: float = 1.0,
    loss: LossConfig | None = None,
) -> tuple[LossBreakdown, Gradients]:
    """
    Toy objective and its analytic gradient for fixed pseudo-labels.

    ``pseudo`` rows refer to ``unlabeled`` proposals through their proposal id
    (the row index in ``unlabeled``).
    """
    loss = loss or LossConfig()
    cls_l, reg_l, g_l = _labeled_terms(model, labeled, loss)
    if unlabeled is None or pseudo is None:
        return LossBreakdown.compose(cls_l, reg_l, 0.0, 0.0, lambda_u), g_l
    cls_u, reg_u, g_u = _unlabeled_terms(model, unlabeled, pseudo, loss)
    grads = Gradients(
        g_l.W + lambda_u * g_u.W, g_l.b + lambda_u * g_u.b, g_l.R + lambda_u * g_u.R, g_l.r + lambda_u * g_u.r
    )
    return LossBreakdown.compose(cls_l, reg_l, cls_u, reg_u, lambda_u), grads


def _box_of(row: np.ndarray, scale: float) -> BBox:
    x1, y1, x2, y2 = (float(v) * scale for v in row)
    return BBox(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))


def stage_records(model: ToyModel, batch: ProposalSet) -> list[DetectionRecord]:
    """The model's per-stage predictions on a batch; proposal ids are row indices."""
    probs = model.probs(batch.features)
    boxes = model.boxes(batch.features, batch.proposal_boxes)
    records = []
    for i in range(len(batch)):
        for k in range(model.num_stages):
            vector = np.clip(probs[k, i], 0.0, 1.0)
            records.append(
                DetectionRecord(
                    image_id=int(batch.image_ids[i]),
                    stage=k + 1,
                    class_probs=tuple(float(p) for p in vector / vector.sum()),
                    box=_box_of(boxes[k, i], model.box_scale),
                    proposal_id=i,
                )
            )
    return records


def ensemble_records(model: ToyModel, batch: ProposalSet) -> dict[int, list[DetectionRecord]]:
    """Ensemble (stage-averaged) predictions per image, in row order."""
    probs = model.probs(batch.features).mean(axis=0)
    boxes = np.sort(model.boxes(batch.features, batch.proposal_boxes).reshape(model.num_stages, -1, 2, 2), axis=2)
    boxes = boxes.reshape(model.num_stages, -1, 4).mean(axis=0)
    out: dict[int, list[DetectionRecord]] = {}
    for i in range(len(batch)):
        vector = np.clip(probs[i], 0.0, 1.0)
        out.setdefault(int(batch.image_ids[i]), []).append(
            DetectionRecord(
                image_id=int(batch.image_ids[i]),
                stage=1,
                class_probs=tuple(float(p) for p in vector / vector.sum()),
                box=_box_of(boxes[i], model.box_scale),
                proposal_id=i,
            )
        )
    return out


def batch_annotations(batch: ProposalSet, num_classes: int) -> list[Annotation]:
    """Foreground ground truth of a batch, with class slots as category ids."""
    return [
        Annotation(i, int(batch.image_ids[i]), int(batch.labels[i]), BBox(*(float(v) for v in batch.target_boxes[i])))
        for i in range(len(batch))
        if batch.labels[i] < num_classes
    ]


def make_schedule(config: TrainConfig, num_classes: int) -> ThresholdSchedule:
    if config.apm:
        return ClassStatsStore(
            num_classes,
            APMConfig(
                capacity=config.apm_capacity,
                min_samples=config.apm_min_samples,
                epsilons=tuple(config.epsilons),
                default_thresholds=tuple(config.default_thresholds),
            ),
        )
    return FixedThresholds(tuple(config.fixed_thresholds))


@dataclass
class RunLog:
    """Per-iteration diagnostics of one training run."""
    losses: list[dict[str, Any]] = field(default_factory=list)
    thresholds: list[dict[str, Any]] = field(default_factory=list)
    confidence: list[dict[str, Any]] = field(default_factory=list)

    @property
    def final(self) -> dict[str, Any]:
        return self.losses[-1] if self.losses else {}

    def total_retained(self, stage: int = 1) -> int:
        return sum(int(row[f"retained_{stage}"]) for row in self.losses)

    def write(self, directory: str | Path) -> list[Path]:
        """Write ``losses.csv``, ``thresholds.csv`` and ``confidence_trajectory.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name, rows in (
            ("losses.csv", self.losses),
            ("thresholds.csv", self.thresholds),
            ("confidence_trajectory.csv", self.confidence),
        ):
            path = directory / name
            with path.open("w", newline="", encoding="utf-8") as fh:
                if rows:
                    writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
                    writer.writeheader()
                    writer.writerows(rows)
            written.append(path)
        return written


def _log_schedule(log: RunLog, iteration: int, schedule: ThresholdSchedule, num_classes: int) -> None:
    for c in range(num_classes):
        row: dict[str, Any] = {"iteration": iteration, "class": c}
        for k in range(1, schedule.num_stages + 1):
            row[f"tau_{k}"] = schedule.threshold(c, k)
        log.thresholds.append(row)
        if isinstance(schedule, ClassStatsStore):
            log.confidence.append(
                {"iteration": iteration, "class": c, "mu": schedule.mean(c), "sigma": schedule.std(c),
                 "count": schedule.count(c)}
            )


def _sample(rng: np.random.Generator, n: int, size: int, p: np.ndarray | None = None) -> np.ndarray:
    return np.sort(rng.choice(n, size=min(size, n), replace=False, p=p))


def balanced_weights(labels: np.ndarray) -> np.ndarray:
    """Sampling probabilities inversely proportional to each label's frequency."""
    counts = np.bincount(labels)
    weights = 1.0 / counts[labels]
    return weights / weights.sum()


def train(
    model: ToyModel, world: ToyWorld, config: TrainConfig
) -> tuple[ToyModel, RunLog]:
    """
    Train a toy model on a synthetic world.

    Each iteration draws a labeled batch, records the ensemble's confidence
    on matched labeled proposals into the threshold store (APM on), and after
    burn-in draws an unlabeled batch whose pseudo-labels come from the
    model's current predictions. The parameters then take one gradient step
    on ``labeled + lambda_u * unlabeled``. Labeled and unlabeled batches use
    separate random streams.

    Args:
        model: Initial model, not modified
        world: Labeled and unlabeled proposals
        config: Training settings

    Returns:
        The trained model and its run log

    Raises:
        DivergenceError: If the loss exceeds ``divergence_limit`` or is not finite
    """
    model = model.copy()
    num_classes = model.num_classes
    index = ClassIndex.identity(num_classes)
    schedule = make_schedule(config, num_classes)
    if schedule.num_stages != model.num_stages:
        raise ConfigError(f"Threshold schedule has {schedule.num_stages} stages, model has {model.num_stages}")
    loss = config.loss_config
    rng_l = np.random.default_rng([config.seed, STREAM_LABELED])
    rng_u = np.random.default_rng([config.seed, STREAM_UNLABELED])
    log = RunLog()
    mode = TeacherMode(config.teacher_mode)
    weights = None
    if config.labeled_sampling == "balanced" and len(world.labeled):
        weights = balanced_weights(world.labeled.labels)

    for iteration in range(config.total_iters):
        labeled = world.labeled.subset(_sample(rng_l, len(world.labeled), config.batch_labeled, weights))
        if isinstance(schedule, ClassStatsStore):
            populate_from_labeled(
                schedule,
                ensemble_records(model, labeled),
                batch_annotations(labeled, num_classes),
                index,
                config.iou_threshold,
            )
        monotone = is_monotone(schedule, num_classes)
        if not monotone:
            logger.warning("iter %d: thresholds decrease across stages for some class", iteration)
        unlabeled = pseudo = None
        if iteration >= config.burn_in and len(world.unlabeled):
            unlabeled = world.unlabeled.subset(_sample(rng_u, len(world.unlabeled), config.batch_unlabeled))
            pseudo = unlabeled_batch(stage_records(model, unlabeled), schedule, config.nms_threshold, mode)
        breakdown, grads = objective(model, labeled, unlabeled, pseudo, config.lambda_u, loss)
        if not math.isfinite(breakdown.total) or breakdown.total > config.divergence_limit:
            raise DivergenceError(
                f"Loss {breakdown.total!r} at iteration {iteration} exceeds {config.divergence_limit:g}"
            )
        model.W -= config.learning_rate * grads.W
        model.b -= config.learning_rate * grads.b
        model.R -= config.learning_rate * grads.R
        model.r -= config.learning_rate * grads.r

        row: dict[str, Any] = {"iteration": iteration, **breakdown.to_row()}
        sizes = pseudo.sizes() if pseudo is not None else (0,) * model.num_stages
        for k, size in enumerate(sizes, start=1):
            row[f"retained_{k}"] = size
        row["pseudo_accuracy"] = _pseudo_accuracy(pseudo, unlabeled)
        row["monotone"] = monotone
        log.losses.append(row)
        if iteration % config.log_every == 0 or iteration == config.total_iters - 1:
            _log_schedule(log, iteration, schedule, num_classes)
            logger.info(
                "iter %d: total %.4f (labeled %.4f, unlabeled %.4f), retained %s",
                iteration, breakdown.total, breakdown.supervised, breakdown.unsupervised, sizes,
            )
    return model, log


def _pseudo_accuracy(pseudo: PseudoLabelSet | None, batch: ProposalSet | None) -> float:
    if pseudo is None or batch is None:
        return math.nan
    kept = pseudo.retained(1)
    if not kept:
        return math.nan
    return sum(int(batch.labels[t.proposal_id]) == t.y_hat for t in kept) / len(kept)


@dataclass(frozen=True)
class AccuracyReport:
    """Class-balanced accuracy on foreground proposals."""
    overall: float
    per_group: dict[str, float]
    per_class: dict[int, float]

    def to_dict(self) -> dict[str, Any]:
        return {"overall": self.overall, "per_group": dict(self.per_group),
                "per_class": {str(k): v for k, v in self.per_class.items()}}


def accuracy(model: ToyModel, proposals: ProposalSet, stage: int | None = None) -> AccuracyReport:
    """
    Accuracy of the ensemble (or one stage) on foreground proposals.

    Per-class accuracies are averaged within each group and overall, so each
    class weighs the same regardless of its frequency.
    """
    probs = model.probs(proposals.features)
    scores = probs.mean(axis=0) if stage is None else probs[stage - 1]
    predicted = np.argmax(scores, axis=1)
    per_class: dict[int, float] = {}
    group_of: dict[int, str] = {}
    for c in range(model.num_classes):
        mask = proposals.labels == c
        if not np.any(mask):
            continue
        per_class[c] = float(np.mean(predicted[mask] == c))
        group_of[c] = proposals.groups[int(np.flatnonzero(mask)[0])]
    per_group: dict[str, float] = {}
    for g in sorted(set(group_of.values())):
        per_group[g] = float(np.mean([v for c, v in per_class.items() if group_of[c] == g]))
    overall = float(np.mean(list(per_class.values()))) if per_class else math.nan
    return AccuracyReport(overall, per_group, per_class)


def new_model(world: ToyWorld, config: TrainConfig) -> ToyModel:
    k = config.num_stages or world.labeled.num_stages
    if k > world.labeled.num_stages:
        raise ConfigError(f"World has {world.labeled.num_stages} feature stages, {k} requested")
    return ToyModel.initialize(
        world.num_classes, world.labeled.input_dim, k, config.seed, config.init_scale, world.config.box_scale
    )


def run(world: ToyWorld, config: TrainConfig) -> tuple[AccuracyReport, RunLog]:
    """Train a fresh model and score it on the held-out proposals."""
    model, log = train(new_model(world, config), world, config)
    return accuracy(model, world.test), log


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    settings: dict[str, Any]
    overall: float
    per_group: dict[str, float]
    pseudo_accuracy: float
    retained: float


@dataclass(frozen=True)
class ComparisonTable:
    """Seed-averaged results of several training configurations."""
    title: str
    rows: tuple[ComparisonRow, ...]
    seeds: tuple[int, ...]

    def row(self, name: str) -> ComparisonRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "title": self.title,
            "seeds": list(self.seeds),
            "rows": [
                {"name": r.name, **r.settings, "overall": r.overall, "per_group": dict(r.per_group),
                 "pseudo_accuracy": r.pseudo_accuracy, "retained": r.retained}
                for r in self.rows
            ],
        }

    def to_markdown(self) -> str:
        setting_keys = list(self.rows[0].settings) if self.rows else []
        groups = sorted({g for r in self.rows for g in r.per_group})
        header = [*setting_keys, "overall", *groups, "pseudo acc.", "retained"]
        lines = [f"### {self.title}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for r in self.rows:
            cells = [_cell(r.settings[k]) for k in setting_keys]
            cells += [f"{100 * r.overall:.1f}"]
            cells += [f"{100 * r.per_group[g]:.1f}" if g in r.per_group else "-" for g in groups]
            cells.append(f"{100 * r.pseudo_accuracy:.1f}" if math.isfinite(r.pseudo_accuracy) else "-")
            cells.append(f"{r.retained:.0f}")
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def _cell(value: Any) -> str:
    if isinstance(value, bool):
        return "✓" if value else ""
    if isinstance(value, (list, tuple)):
        return "(" + ", ".join(f"{v:g}" for v in value) + ")"
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def _nanmean(values: Sequence[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.nan


def compare(
    world: ToyWorld,
    configs: Sequence[tuple[str, dict[str, Any], TrainConfig]],
    seeds: Sequence[int],
    title: str,
) -> ComparisonTable:
    """Train every configuration under every seed and average the results."""
    rows = []
    for name, settings, base in configs:
        reports, pseudo, retained = [], [], []
        for seed in seeds:
            report, log = run(world, replace(base, seed=seed))
            reports.append(report)
            pseudo.append(_nanmean([row["pseudo_accuracy"] for row in log.losses]))
            retained.append(float(log.total_retained(1)))
        groups = sorted({g for rep in reports for g in rep.per_group})
        rows.append(
            ComparisonRow(
                name=name,
                settings=settings,
                overall=float(np.mean([rep.overall for rep in reports])),
                per_group={g: _nanmean([rep.per_group.get(g, math.nan) for rep in reports]) for g in groups},
                pseudo_accuracy=_nanmean(pseudo),
                retained=float(np.mean(retained)),
            )
        )
        logger.info("%s / %s: overall %.4f", title, name, rows[-1].overall)
    return ComparisonTable(title, tuple(rows), tuple(seeds))


def _flat(values: Sequence[float]) -> tuple[float, ...]:
    mid = values[len(values) // 2]
    return (mid,) * len(values)


def ablation_configs(base: TrainConfig) -> list[tuple[str, dict[str, Any], TrainConfig]]:
    """
    The cascade pseudo-labeling x adaptive mining grid.

    Without cascade pseudo-labeling every head is taught by its own
    prediction under a flat (stage-independent) schedule; with it the
    ensemble teaches every head under a progressive schedule. Without
    adaptive mining the schedule is fixed, with it per-class.
    """
    out = []
    for cpl in (False, True):
        for apm in (False, True):
            config = replace(
                base,
                apm=apm,
                teacher_mode="ensemble" if cpl else "self_per_head",
                epsilons=tuple(base.epsilons) if cpl else _flat(base.epsilons),
                fixed_thresholds=tuple(base.fixed_thresholds) if cpl else _flat(base.fixed_thresholds),
            )
            name = {(False, False): "baseline", (True, False): "+CPL", (False, True): "+APM", (True, True): "CPL+APM"}[
                (cpl, apm)
            ]
            out.append((name, {"CPL": cpl, "APM": apm}, config))
    return out


def ablation_suite(
    world: ToyWorld, base: TrainConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4)
) -> tuple[ComparisonTable, ComparisonTable]:
    """
    The four-row ablation and the burn-in comparison.

    Returns:
        ``(ablation, burn_in)``; the burn-in table compares the full method
        with the default burn-in against no burn-in
    """
    ablation = compare(world, ablation_configs(base), seeds, "Ablation")
    burn_in = compare(
        world,
        [
            ("burn-in", {"burn_in_iters": base.burn_in}, base),
            ("no burn-in", {"burn_in_iters": 0}, replace(base, burn_in_iters=0)),
        ],
        seeds,
        "Burn-in",
    )
    return ablation, burn_in


def _spread(lo: float, hi: float, k: int) -> tuple[float, ...]:
    if k == 1:
        return (lo,)
    return tuple(float(v) for v in np.linspace(lo, hi, k))


def sweep(
    world: ToyWorld,
    base: TrainConfig,
    parameter: str,
    values: Sequence[Any] | None = None,
    seeds: Sequence[int] = (0,),
) -> ComparisonTable:
    """
    Vary one hyper-parameter of the full method.

    Args:
        parameter: ``"num_stages"``, ``"epsilons"`` or ``"lambda_u"``
        values: Values to try; defaults to 1-5 stages, the flat/shifted/wide
            epsilon schedules and 0.5-2.0 loss weights
    """
    configs: list[tuple[str, dict[str, Any], TrainConfig]] = []
    if parameter == "num_stages":
        for k in values or [v for v in STAGE_SWEEP if v <= world.labeled.num_stages]:
            config = replace(
                base,
                num_stages=int(k),
                epsilons=_spread(base.epsilons[0], base.epsilons[-1], int(k)),
                fixed_thresholds=_spread(base.fixed_thresholds[0], base.fixed_thresholds[-1], int(k)),
                default_thresholds=_spread(base.default_thresholds[0], base.default_thresholds[-1], int(k)),
            )
            configs.append((f"K={k}", {"K": int(k)}, config))
    elif parameter == "epsilons":
        for eps in values or EPSILON_SWEEP:
            configs.append((f"eps={tuple(eps)}", {"epsilons": tuple(eps)}, replace(base, epsilons=tuple(eps))))
    elif parameter == "lambda_u":
        for lam in values or LAMBDA_SWEEP:
            configs.append((f"lambda_u={lam:g}", {"lambda_u": float(lam)}, replace(base, lambda_u=float(lam))))
    else:
        raise ValidationError(f"Unknown sweep parameter {parameter!r}")
    return compare(world, configs, seeds, f"Sweep over {parameter}")
