"""
Sparsely-annotated benchmarks: per-category annotation erasure and recovery.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any

import numpy as np

from .core import Annotation, ClassIndex, DatasetBundle, ValidationError, count_instances, group_names
from .cpl import PseudoBox, PseudoLabelSet
from .geometry import greedy_match_boxes

logger = logging.getLogger(__name__)


class ErasureMode(Enum):
    EXACT = "exact"
    BERNOULLI = "bernoulli"


@dataclass(frozen=True)
class ErasureReport:
    """
    What an erasure removed and which classes kept annotations.

    ``preservation`` maps each class group to the fraction of its classes
    that had annotations before erasure and still have at least one after.
    Groups without such classes map to None.
    """
    ratio: float
    seed: int
    mode: ErasureMode
    removed: tuple[Annotation, ...]
    counts_before: dict[int, int]
    counts_after: dict[int, int]
    preservation: dict[str, float | None]

    @property
    def removed_ids(self) -> list[int]:
        return [a.id for a in self.removed]

    @property
    def overall_preservation(self) -> float | None:
        present = [c for c, n in self.counts_before.items() if n > 0]
        if not present:
            return None
        return sum(self.counts_after[c] > 0 for c in present) / len(present)

    def to_dict(self) -> dict[str, Any]:
        return {
            "ratio": self.ratio,
            "seed": self.seed,
            "mode": self.mode.value,
            "removed_annotation_ids": self.removed_ids,
            "num_removed": len(self.removed),
            "counts_before": {str(k): v for k, v in sorted(self.counts_before.items())},
            "counts_after": {str(k): v for k, v in sorted(self.counts_after.items())},
            "preservation": dict(self.preservation),
            "overall_preservation": self.overall_preservation,
        }


def _removed_count(n: int, ratio: float) -> int:
    # floor with a guard against 0.4 * 10 landing just below 4
    return min(n, int(math.floor(ratio * n + 1e-9)))


def erase(
    bundle: DatasetBundle,
    ratio: float,
    seed: int = 0,
    mode: ErasureMode | str = ErasureMode.EXACT,
) -> tuple[DatasetBundle, ErasureReport]:
    """
    Randomly erase a share of every category's annotations.

    In exact mode ``floor(ratio * n_c)`` annotations of each category are
    removed uniformly at random; in Bernoulli mode each annotation is removed
    independently with probability ``ratio``. Each category draws from its
    own random substream, so the outcome for one category does not depend on
    the others. Class groups are kept from the input bundle.

    Args:
        bundle: Labeled bundle to sparsify, not modified
        ratio: Share of annotations to erase, in ``[0, 1]``
        seed: Random seed
        mode: ``"exact"`` or ``"bernoulli"``

    Returns:
        The sparse bundle and the erasure report

    Raises:
        ValidationError: If ``ratio`` is outside ``[0, 1]``

    Examples:
        >>> from pycascade.core import BBox, Category, ImageInfo
        >>> anns = tuple(Annotation(i, 1, 1, BBox(0, 0, 1, 1)) for i in range(10))
        >>> b = DatasetBundle((ImageInfo(1, 8, 8),), anns, (Category(1, "a", 10, "rare"),))
        >>> sparse, report = erase(b, 0.4, seed=3)
        >>> len(sparse.annotations), len(report.removed)
        (6, 4)
    """
    if not (0.0 <= ratio <= 1.0) or math.isnan(ratio):
        raise ValidationError(f"Erasure ratio must lie in [0, 1], got {ratio}")
    mode = ErasureMode(mode)
    by_category: dict[int, list[Annotation]] = {}
    for a in sorted(bundle.annotations, key=lambda a: a.id):
        by_category.setdefault(a.category_id, []).append(a)

    removed_ids: set[int] = set()
    for category_id, annotations in sorted(by_category.items()):
        rng = np.random.default_rng([seed, category_id])
        n = len(annotations)
        if mode is ErasureMode.EXACT:
            picks = rng.choice(n, size=_removed_count(n, ratio), replace=False)
        else:
            picks = np.flatnonzero(rng.random(n) < ratio)
        removed_ids.update(annotations[int(i)].id for i in picks)

    kept = tuple(a for a in bundle.annotations if a.id not in removed_ids)
    removed = tuple(a for a in bundle.annotations if a.id in removed_ids)
    before = {c.id: len(by_category.get(c.id, [])) for c in bundle.categories}
    recounted = {c.id: c.instance_count for c in count_instances(bundle.categories, kept)}
    after = {c.id: recounted.get(c.id, 0) for c in bundle.categories}
    groups = {c.id: c.group for c in bundle.categories}
    categories = tuple(replace(c, instance_count=after[c.id]) for c in bundle.categories)
    sparse = replace(bundle, annotations=kept, categories=categories)

    names: Sequence[str] = group_names(bundle.group_scheme) if bundle.group_scheme else sorted(set(groups.values()))
    preservation: dict[str, float | None] = {}
    for name in names:
        present = [c for c, g in groups.items() if g == name and before[c] > 0]
        preservation[name] = sum(after[c] > 0 for c in present) / len(present) if present else None

    report = ErasureReport(ratio, seed, mode, removed, before, after, preservation)
    logger.info(
        "Erased %d of %d annotations (ratio %g, %s); preservation %s",
        len(removed), len(bundle.annotations), ratio, mode.value, preservation,
    )
    return sparse, report


def recovery_score(
    pseudo: PseudoLabelSet | Iterable[PseudoBox],
    erased: Sequence[Annotation],
    class_index: ClassIndex,
    iou_threshold: float = 0.5,
) -> float:
    """
    Fraction of erased annotations recovered by pseudo-labels.

    Pseudo-labels and erased annotations are greedily matched per image and
    class, pseudo-labels in descending score order. An erased annotation
    counts as recovered when a pseudo-label of its class matches it.

    Args:
        pseudo: A pseudo-label set (its stage-1 retained labels are used) or pseudo boxes
        erased: The annotations an erasure removed
        class_index: Category id to slot mapping
        iou_threshold: Minimum IoU of a match

    Returns:
        The recovered share in ``[0, 1]``; 1.0 when nothing was erased
    """
    boxes = pseudo.pseudo_boxes(1) if isinstance(pseudo, PseudoLabelSet) else list(pseudo)
    if not erased:
        return 1.0
    cells_pred: dict[tuple[int, int], list[PseudoBox]] = {}
    for p in boxes:
        cells_pred.setdefault((p.image_id, p.label), []).append(p)
    cells_gt: dict[tuple[int, int], list[Annotation]] = {}
    for a in erased:
        cells_gt.setdefault((a.image_id, class_index.slot(a.category_id)), []).append(a)
    recovered = 0
    for key, gts in cells_gt.items():
        preds = cells_pred.get(key, [])
        if not preds:
            continue
        result = greedy_match_boxes(
            [p.box for p in preds], [p.score for p in preds], [a.box for a in gts], iou_threshold
        )
        recovered += result.true_positives
    return recovered / len(erased)
