"""
Seeded synthetic long-tailed detection worlds.

Three generators share one configuration:

- :func:`generate_dataset` draws images with power-law distributed object
  classes and splits them into a labeled bundle and an unlabeled bundle whose
  ground truth is kept hidden.
- :func:`simulate_detector` plays a cascade detector on a bundle, emitting K
  aligned stage records per proposal whose true-class scores improve with
  the stage and are biased against rare classes.
- :func:`generate_world` attaches per-stage feature vectors to proposals for
  the toy trainer.

Every image draws from its own generator seeded with ``(seed, stream,
image_id)``, so output does not depend on generation order.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .core import (
    Annotation,
    BBox,
    Category,
    ConfigError,
    ConfigMixin,
    DatasetBundle,
    DetectionRecord,
    GroupScheme,
    ImageInfo,
    Split,
    assign_class_groups,
    count_instances,
    group_names,
)

logger = logging.getLogger(__name__)

# Random stream tags
STREAM_DATASET = 0
STREAM_DETECTOR = 1
STREAM_WORLD = 2
STREAM_CENTROIDS = 3

# Sub-pixel grid of simulated box coordinates
BOX_QUANTUM = 1.0 / 64.0


# Score bias and extra feature noise of the rarest group; later groups
# interpolate linearly to zero at the most frequent group
RAREST_GROUP_BIAS = -0.3
RAREST_GROUP_NOISE = 0.6


def rank_profile(scheme: GroupScheme | str, rarest: float) -> dict[str, float]:
    """
    Per-group values falling linearly from ``rarest`` to zero across a scheme.

    Examples:
        >>> rank_profile("lvis3", -0.3)
        {'rare': -0.3, 'common': -0.15, 'frequent': 0.0}
    """
    names = group_names(scheme)
    last = max(1, len(names) - 1)
    return {name: rarest * (last - i) / last if i < last else 0.0 for i, name in enumerate(names)}


@dataclass(frozen=True)
class SyntheticConfig(ConfigMixin):
    """
    Parameters of a synthetic world.

    Dataset:
        num_classes, exponent (class weight of slot c is ``(c + 1) ** -exponent``),
        num_images, mean_objects (Poisson, at least one object per image),
        labeled_fraction, num_test_images, image_size, min_box/max_box side lengths.

    Detector:
        score_base, stage_gain, score_sigma and group_bias define the true-class
        score ``clamp(Normal(score_base + stage_gain * k + group_bias, score_sigma), 0, 1)``;
        group_bias maps group names of ``group_scheme`` to a bias and defaults to
        :func:`rank_profile` of RAREST_GROUP_BIAS;
        box_jitter is the corner noise of stage 1 in pixels, multiplied by
        jitter_decay per later stage; fp_rate is the mean number of false
        positive proposals per image.

    Features:
        feature_dim, separation (centroid distance from the origin),
        feature_noise, group_noise (defaulting like group_bias, from
        RAREST_GROUP_NOISE) and box_scale shape the toy trainer's proposal
        features. A proposal's noise has a part shared by all stage views,
        scaled by shared_noise_scale, and an independent part per view scaled
        by ``stage_noise_scale * stage_noise_decay ** k``.
        The defaults make the first view far noisier than the last, so the
        mean over views predicts better than any early view alone.
    """
    num_classes: int = 30
    exponent: float = 1.5
    num_images: int = 400
    mean_objects: float = 4.0
    labeled_fraction: float = 0.5
    num_test_images: int = 1000
    image_size: int = 1024
    min_box: float = 32.0
    max_box: float = 256.0
    num_stages: int = 3
    seed: int = 0
    group_scheme: str = "lvis3"
    score_base: float = 0.4
    stage_gain: float = 0.1
    score_sigma: float = 0.2
    group_bias: dict[str, float] | None = None
    box_jitter: float = 2.0
    jitter_decay: float = 0.5
    fp_rate: float = 1.0
    fp_score_mean: float = 0.3
    feature_dim: int = 32
    separation: float = 1.5
    feature_noise: float = 1.0
    stage_noise_decay: float = 0.4
    stage_noise_scale: float = 8.0
    shared_noise_scale: float = 0.0
    group_noise: dict[str, float] | None = None
    box_scale: float = 64.0

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_images < 2 or self.num_test_images < 0:
            raise ConfigError("num_images must be >= 2 and num_test_images >= 0")
        if not 0.0 < self.labeled_fraction < 1.0:
            raise ConfigError("labeled_fraction must lie in (0, 1)")
        if self.num_stages < 1:
            raise ConfigError("num_stages must be >= 1")
        if not 0 < self.min_box <= self.max_box < self.image_size:
            raise ConfigError("need 0 < min_box <= max_box < image_size")
        if min(self.exponent, self.mean_objects, self.score_sigma, self.box_jitter, self.fp_rate) < 0:
            raise ConfigError("exponent, mean_objects, score_sigma, box_jitter and fp_rate must be >= 0")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if min(self.feature_noise, self.stage_noise_scale, self.shared_noise_scale) < 0:
            raise ConfigError("feature_noise, stage_noise_scale and shared_noise_scale must be >= 0")
        try:
            names = group_names(self.group_scheme)
        except ValueError:
            raise ConfigError(f"unknown group_scheme {self.group_scheme!r}") from None
        for label, table in (("group_bias", self.group_bias), ("group_noise", self.group_noise)):
            if table is None:
                continue
            if not isinstance(table, Mapping):
                raise ConfigError(f"{label} must map group names to numbers")
            unknown = sorted(set(table) - set(names))
            if unknown:
                raise ConfigError(f"{label} keys {unknown} are not groups of {self.group_scheme}: {list(names)}")
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in table.values()):
                raise ConfigError(f"{label} values must be numbers")

    @property
    def bias_by_group(self) -> dict[str, float]:
        """Score bias per group; unset groups get zero."""
        if self.group_bias is None:
            return rank_profile(self.group_scheme, RAREST_GROUP_BIAS)
        return {name: float(self.group_bias.get(name, 0.0)) for name in group_names(self.group_scheme)}

    @property
    def noise_by_group(self) -> dict[str, float]:
        """Extra feature noise per group; unset groups get zero."""
        if self.group_noise is None:
            return rank_profile(self.group_scheme, RAREST_GROUP_NOISE)
        return {name: float(self.group_noise.get(name, 0.0)) for name in group_names(self.group_scheme)}

    @property
    def num_labeled(self) -> int:
        return max(1, min(self.num_images - 1, round(self.num_images * self.labeled_fraction)))


def class_weights(config: SyntheticConfig) -> np.ndarray:
    """Normalized power-law class probabilities, slot 0 most frequent."""
    weights = np.arange(1, config.num_classes + 1, dtype=float) ** -config.exponent
    return weights / weights.sum()


def image_rng(seed: int, stream: int, image_id: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, image_id, *extra])


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.round(values / BOX_QUANTUM) * BOX_QUANTUM


def _sample_objects(config: SyntheticConfig, image_id: int) -> list[tuple[int, BBox]]:
    rng = image_rng(config.seed, STREAM_DATASET, image_id)
    count = max(1, int(rng.poisson(config.mean_objects)))
    slots = rng.choice(config.num_classes, size=count, p=class_weights(config))
    sizes = rng.uniform(config.min_box, config.max_box, size=(count, 2))
    objects = []
    for slot, (w, h) in zip(slots, sizes):
        w, h = float(np.round(w)), float(np.round(h))
        x = float(np.floor(rng.uniform(0, config.image_size - w)))
        y = float(np.floor(rng.uniform(0, config.image_size - h)))
        objects.append((int(slot), BBox(x, y, x + w, y + h)))
    return objects


def _categories(config: SyntheticConfig) -> list[Category]:
    return [Category(id=c + 1, name=f"class_{c + 1:03d}") for c in range(config.num_classes)]


def _images_and_annotations(
    config: SyntheticConfig, image_ids: Sequence[int], first_annotation_id: int = 1
) -> tuple[list[ImageInfo], list[Annotation]]:
    images, annotations = [], []
    next_id = first_annotation_id
    for image_id in image_ids:
        images.append(ImageInfo(image_id, config.image_size, config.image_size, f"synthetic_{image_id:06d}.jpg"))
        for slot, box in _sample_objects(config, image_id):
            annotations.append(Annotation(next_id, image_id, slot + 1, box))
            next_id += 1
    return images, annotations


def generate_dataset(config: SyntheticConfig) -> tuple[DatasetBundle, DatasetBundle]:
    """
    Draw a long-tailed dataset and split it into labeled and unlabeled bundles.

    Images ``1..num_labeled`` form the labeled split, the rest the unlabeled
    split. Category instance counts and class groups come from the labeled
    split and are shared by both bundles.

    Args:
        config: World parameters

    Returns:
        ``(labeled, unlabeled)``; the unlabeled bundle holds its ground truth
        as hidden annotations

    Examples:
        >>> labeled, unlabeled = generate_dataset(SyntheticConfig(num_images=10, seed=7))
        >>> unlabeled.annotations, unlabeled.has_hidden_annotations
        ((), True)
    """
    ids = list(range(1, config.num_images + 1))
    images, annotations = _images_and_annotations(config, ids)
    n_labeled = config.num_labeled
    labeled_anns = [a for a in annotations if a.image_id <= n_labeled]
    hidden = [a for a in annotations if a.image_id > n_labeled]
    categories = count_instances(_categories(config), labeled_anns)
    labeled = assign_class_groups(
        DatasetBundle(tuple(images[:n_labeled]), tuple(labeled_anns), categories, Split.LABELED),
        config.group_scheme,
    )
    unlabeled = DatasetBundle(
        tuple(images[n_labeled:]), (), labeled.categories, Split.UNLABELED, labeled.group_scheme
    ).with_hidden(hidden)
    logger.info(
        "Generated %d labeled and %d unlabeled images with %d/%d objects",
        n_labeled, len(ids) - n_labeled, len(labeled_anns), len(hidden),
    )
    return labeled, unlabeled


def generate_test_bundle(config: SyntheticConfig) -> DatasetBundle:
    """A held-out labeled bundle sharing the class table of :func:`generate_dataset`."""
    labeled, unlabeled = generate_dataset(config)
    first = config.num_images + 1
    ids = list(range(first, first + config.num_test_images))
    next_id = len(labeled.annotations) + len(unlabeled.audit_annotations()) + 1
    images, annotations = _images_and_annotations(config, ids, first_annotation_id=next_id)
    return DatasetBundle(
        tuple(images), tuple(annotations), labeled.categories, Split.LABELED, labeled.group_scheme
    )


def _jitter_box(rng: np.random.Generator, box: BBox, sigma: float) -> BBox:
    noise = np.clip(rng.normal(0.0, 1.0, size=4), -2.0, 2.0) * sigma if sigma > 0 else np.zeros(4)
    x1, y1, x2, y2 = _quantize(np.asarray(box.as_tuple()) + noise)
    return BBox(float(min(x1, x2)), float(min(y1, y2)), float(max(x1, x2)), float(max(y1, y2)))


def _probs(num_classes: int, slot: int, score: float, other: int, share: float) -> tuple[float, ...]:
    rest = 1.0 - score
    probs = [0.0] * (num_classes + 1)
    probs[slot] = score
    probs[other] += share * rest
    probs[num_classes] = rest - share * rest
    return tuple(probs)


def simulate_detector(
    bundle: DatasetBundle, config: SyntheticConfig, quality: float = 0.0, round_index: int = 0
) -> list[DetectionRecord]:
    """
    Simulated cascade predictions on a bundle's ground truth.

    Every ground-truth object yields one proposal with K aligned stage
    records. At stage ``k`` the true class receives

        ``quality + (1 - quality) * clamp(Normal(base + gain * k + bias[group], sigma), 0, 1)``

    and the remaining mass is split between one randomly drawn other class and
    background. Boxes get truncated Gaussian corner noise that shrinks with
    the stage. False-positive proposals (Poisson ``fp_rate`` per image) score a
    random class around ``(1 - quality) * fp_score_mean``.

    Each ``round_index`` is an independent pass of the detector over the same
    images, as when a teacher revisits the labeled split on later iterations.
    Round 0 is the default pass.

    Args:
        bundle: Bundle whose ground truth (hidden for unlabeled bundles) is simulated
        config: World parameters
        quality: Detector quality in ``[0, 1]``; 1 yields perfect true-class scores
        round_index: Non-negative pass number

    Returns:
        Records ordered by image, proposal and stage

    Raises:
        AuditError: If an unlabeled bundle has no hidden ground truth
    """
    if not 0.0 <= quality <= 1.0:
        raise ConfigError(f"quality must lie in [0, 1], got {quality}")
    if round_index < 0:
        raise ConfigError(f"round_index must be >= 0, got {round_index}")
    extra = (round_index,) if round_index else ()
    index = bundle.class_index
    num_classes = index.num_classes
    group_of = {c.id: c.group for c in bundle.categories}
    bias_by_group = config.bias_by_group
    by_image = bundle.annotations_by_image(audit=True)
    records: list[DetectionRecord] = []
    for image in bundle.images:
        rng = image_rng(config.seed, STREAM_DETECTOR, image.id, *extra)
        proposal_id = 0
        for annotation in by_image.get(image.id, []):
            slot = index.slot(annotation.category_id)
            bias = bias_by_group.get(group_of.get(annotation.category_id, ""), 0.0)
            for k in range(1, config.num_stages + 1):
                mean = config.score_base + config.stage_gain * k + bias
                raw = float(np.clip(rng.normal(mean, config.score_sigma), 0.0, 1.0))
                score = quality + (1.0 - quality) * raw
                other = int(rng.integers(num_classes - 1))
                other += other >= slot
                share = float(rng.uniform(0.3, 1.0))
                sigma = config.box_jitter * config.jitter_decay ** (k - 1)
                records.append(
                    DetectionRecord(
                        image_id=image.id,
                        stage=k,
                        class_probs=_probs(num_classes, slot, score, other, share),
                        box=_jitter_box(rng, annotation.box, sigma),
                        proposal_id=proposal_id,
                    )
                )
            proposal_id += 1
        for _ in range(int(rng.poisson(config.fp_rate))):
            w, h = rng.uniform(config.min_box, config.max_box, size=2)
            x = rng.uniform(0, image.width - w)
            y = rng.uniform(0, image.height - h)
            base = BBox(*(float(v) for v in _quantize(np.array([x, y, x + w, y + h]))))
            slot = int(rng.integers(num_classes))
            for k in range(1, config.num_stages + 1):
                raw = float(np.clip(rng.normal(config.fp_score_mean, config.score_sigma), 0.0, 1.0))
                score = (1.0 - quality) * raw
                sigma = config.box_jitter * config.jitter_decay ** (k - 1)
                records.append(
                    DetectionRecord(
                        image_id=image.id,
                        stage=k,
                        class_probs=_probs(num_classes, slot, score, slot, 0.0),
                        box=_jitter_box(rng, base, sigma),
                        proposal_id=proposal_id,
                    )
                )
            proposal_id += 1
    logger.info("Simulated %d stage records on %d images", len(records), len(bundle.images))
    return records


@dataclass(frozen=True)
class ProposalSet:
    """
    Proposals of one split with per-stage feature views.

    Attributes:
        image_ids: Image of each proposal, shape ``(n,)``
        labels: Class slot of each proposal, ``num_classes`` for background
        groups: Class group of each proposal's label (``"background"`` for background)
        features: Per-stage inputs, shape ``(K, n, feature_dim + 4)``; the last
            four columns encode the offset from the proposal box to its target
        proposal_boxes: Proposal corners, shape ``(n, 4)``
        target_boxes: Ground-truth corners (the proposal box for background), shape ``(n, 4)``
    """
    image_ids: np.ndarray
    labels: np.ndarray
    groups: tuple[str, ...]
    features: np.ndarray
    proposal_boxes: np.ndarray
    target_boxes: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_stages(self) -> int:
        return int(self.features.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[2])

    def subset(self, indices: np.ndarray) -> ProposalSet:
        return ProposalSet(
            self.image_ids[indices],
            self.labels[indices],
            tuple(self.groups[i] for i in indices),
            self.features[:, indices, :],
            self.proposal_boxes[indices],
            self.target_boxes[indices],
        )


@dataclass(frozen=True)
class ToyWorld:
    """Labeled, unlabeled and held-out proposal sets with their bundles."""
    config: SyntheticConfig
    labeled: ProposalSet
    unlabeled: ProposalSet
    test: ProposalSet
    labeled_bundle: DatasetBundle
    unlabeled_bundle: DatasetBundle
    test_bundle: DatasetBundle

    @property
    def num_classes(self) -> int:
        return self.config.num_classes


def class_centroids(config: SyntheticConfig) -> np.ndarray:
    """
    Unit directions scaled by ``separation``, one row per class plus background.

    The directions are orthonormal when ``feature_dim`` leaves room for one
    per row, and independent random directions otherwise.
    """
    rng = np.random.default_rng([config.seed, STREAM_CENTROIDS])
    rows = config.num_classes + 1
    raw = rng.normal(size=(rows, config.feature_dim))
    if config.feature_dim >= rows:
        q, _ = np.linalg.qr(raw.T)
        raw = q.T[:rows]
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    return raw * config.separation


def _proposals(config: SyntheticConfig, bundle: DatasetBundle, centroids: np.ndarray) -> ProposalSet:
    index = bundle.class_index
    group_of = {c.id: c.group for c in bundle.categories}
    by_image = bundle.annotations_by_image(audit=True)
    K, D = config.num_stages, config.feature_dim
    image_ids: list[int] = []
    labels: list[int] = []
    groups: list[str] = []
    feats: list[np.ndarray] = []
    props: list[tuple[float, ...]] = []
    targets: list[tuple[float, ...]] = []
    base_sigma = config.feature_noise / np.sqrt(D)
    noise_by_group = config.noise_by_group
    for image in bundle.images:
        rng = image_rng(config.seed, STREAM_WORLD, image.id)
        items: list[tuple[int, BBox, str]] = [
            (index.slot(a.category_id), a.box, group_of.get(a.category_id, "")) for a in by_image.get(image.id, [])
        ]
        for _ in range(int(rng.poisson(config.fp_rate))):
            w, h = rng.uniform(config.min_box, config.max_box, size=2)
            x, y = rng.uniform(0, image.width - w), rng.uniform(0, image.height - h)
            items.append((config.num_classes, BBox(float(x), float(y), float(x + w), float(y + h)), "background"))
        for slot, box, group in items:
            proposal = _jitter_box(rng, box, 2.0 * config.box_jitter)
            gt = np.asarray(box.as_tuple())
            offset = (gt - np.asarray(proposal.as_tuple())) / config.box_scale
            sigma = base_sigma + noise_by_group.get(group, 0.0) / np.sqrt(D)
            shared = rng.normal(0.0, sigma * config.shared_noise_scale, size=D)
            views = np.empty((K, D + 4))
            for k in range(K):
                scale = config.stage_noise_decay**k
                noise = rng.normal(0.0, sigma * scale * config.stage_noise_scale, size=D)
                views[k, :D] = centroids[slot] + shared + noise
                views[k, D:] = offset + rng.normal(0.0, 0.05 * scale, size=4)
            image_ids.append(image.id)
            labels.append(slot)
            groups.append(group)
            feats.append(views)
            props.append(proposal.as_tuple())
            targets.append(box.as_tuple())
    n = len(labels)
    features = np.stack(feats, axis=1) if n else np.zeros((K, 0, D + 4))
    return ProposalSet(
        np.asarray(image_ids, dtype=int),
        np.asarray(labels, dtype=int),
        tuple(groups),
        features,
        np.asarray(props, dtype=float).reshape(n, 4),
        np.asarray(targets, dtype=float).reshape(n, 4),
    )


def generate_world(config: SyntheticConfig) -> ToyWorld:
    """
    Build the toy trainer's world.

    Each ground-truth object becomes a proposal around its box; background
    proposals are added per image. Proposal features are the class centroid
    plus noise that is larger for rarer groups and smaller at later stages,
    followed by a noisy encoding of the box offset.
    """
    labeled, unlabeled = generate_dataset(config)
    test = generate_test_bundle(config)
    centroids = class_centroids(config)
    world = ToyWorld(
        config=config,
        labeled=_proposals(config, labeled, centroids),
        unlabeled=_proposals(config, unlabeled, centroids),
        test=_proposals(config, test, centroids),
        labeled_bundle=labeled,
        unlabeled_bundle=unlabeled,
        test_bundle=test,
    )
    logger.info(
        "Toy world: %d labeled, %d unlabeled, %d test proposals",
        len(world.labeled), len(world.unlabeled), len(world.test),
    )
    return world
