"""
Classification and box-regression losses.

Scalar losses for single proposals, their analytic gradients (used by the
toy trainer), and the composite labeled + weighted unlabeled objective over a
batch of cascade predictions.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np

from .core import AlignmentError, BBox, ConfigError, ConfigMixin, ValidationError
from .cpl import PseudoLabelSet
from .geometry import giou

logger = logging.getLogger(__name__)

# Lower bound applied to the target probability before taking its log
PROB_FLOOR = 1e-12


class ClsKind(Enum):
    CROSS_ENTROPY = "cross_entropy"
    FOCAL = "focal"


class RegKind(Enum):
    SMOOTH_L1 = "smooth_l1"
    L1_PLUS_GIOU = "l1_plus_giou"


@dataclass(frozen=True)
class LossConfig(ConfigMixin):
    """
    Loss selection and parameters.

    Args:
        cls_kind: ``"cross_entropy"`` or ``"focal"``
        reg_kind: ``"smooth_l1"`` or ``"l1_plus_giou"``
        focal_alpha: Focal weighting factor
        focal_gamma: Focal focusing exponent
        beta: Smooth L1 transition point
    """
    cls_kind: str = "cross_entropy"
    reg_kind: str = "smooth_l1"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    beta: float = 1.0

    def __post_init__(self) -> None:
        try:
            ClsKind(self.cls_kind)
            RegKind(self.reg_kind)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.beta <= 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.focal_gamma < 0 or self.focal_alpha <= 0:
            raise ConfigError("focal_alpha must be positive and focal_gamma non-negative")


def _target_probability(probs: Sequence[float], target: int) -> float:
    if not 0 <= target < len(probs):
        raise ValidationError(f"Target {target} outside probability vector of length {len(probs)}")
    p = float(probs[target])
    if p < PROB_FLOOR:
        logger.warning("Target probability %.3g clamped to %.0e", p, PROB_FLOOR)
        p = PROB_FLOOR
    return p


def cls_loss(
    probs: Sequence[float],
    target: int,
    kind: ClsKind | str = ClsKind.CROSS_ENTROPY,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> float:
    """
    Classification loss of one probability vector against a target slot.

    Cross-entropy is ``-log p[target]``; focal is
    ``-alpha * (1 - p[target])**gamma * log p[target]``. A zero target
    probability is raised to ``PROB_FLOOR`` and a warning is logged.

    Examples:
        >>> round(cls_loss([0.5, 0.5], 0), 6)
        0.693147
        >>> cls_loss([1.0, 0.0], 0, "focal") == 0
        True
    """
    p = _target_probability(probs, target)
    if ClsKind(kind) is ClsKind.CROSS_ENTROPY:
        return -math.log(p)
    return -alpha * (1.0 - p) ** gamma * math.log(p)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def cls_loss_and_grad(
    logits: np.ndarray,
    target: int,
    kind: ClsKind | str = ClsKind.CROSS_ENTROPY,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> tuple[float, np.ndarray]:
    """
    Loss of ``softmax(logits)`` and its gradient with respect to the logits.

    Returns:
        ``(loss, grad)`` with ``grad`` shaped like ``logits``
    """
    probs = softmax(np.asarray(logits, dtype=float))
    loss = cls_loss(probs, target, kind, alpha, gamma)
    onehot = np.zeros_like(probs)
    onehot[target] = 1.0
    if ClsKind(kind) is ClsKind.CROSS_ENTROPY:
        return loss, probs - onehot
    p = max(float(probs[target]), PROB_FLOOR)
    q = 1.0 - p
    focusing = gamma * q ** (gamma - 1.0) * math.log(p) if q > 0 else 0.0
    d_loss_d_p = alpha * (focusing - q**gamma / p)
    return loss, d_loss_d_p * p * (onehot - probs)


def smooth_l1(deltas: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Element-wise smooth L1: quadratic below ``beta``, linear above."""
    absd = np.abs(deltas)
    return np.where(absd < beta, 0.5 * absd**2 / beta, absd - 0.5 * beta)


def reg_loss(
    pred: BBox, target: BBox, kind: RegKind | str = RegKind.SMOOTH_L1, beta: float = 1.0
) -> float:
    """
    Box regression loss on absolute corners.

    ``smooth_l1`` sums the smooth L1 of the four corner deltas;
    ``l1_plus_giou`` is the mean absolute corner delta plus ``1 - giou``.

    Examples:
        >>> reg_loss(BBox(0.5, 0.5, 1.5, 1.5), BBox(0, 0, 1, 1))
        0.5
        >>> reg_loss(BBox(0, 0, 1, 1), BBox(1, 1, 2, 2), "l1_plus_giou")
        2.5
    """
    deltas = np.subtract(pred.as_tuple(), target.as_tuple())
    if RegKind(kind) is RegKind.SMOOTH_L1:
        return float(np.sum(smooth_l1(deltas, beta)))
    return float(np.mean(np.abs(deltas))) + 1.0 - giou(pred, target)


def _giou_grad(p: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
    """GIoU of two corner arrays and its gradient with respect to ``p``."""
    x1, y1, x2, y2 = p
    tx1, ty1, tx2, ty2 = t
    pw, ph = x2 - x1, y2 - y1
    area_p = pw * ph
    area_t = (tx2 - tx1) * (ty2 - ty1)
    iw = min(x2, tx2) - max(x1, tx1)
    ih = min(y2, ty2) - max(y1, ty1)
    overlapping = iw > 0 and ih > 0
    inter = iw * ih if overlapping else 0.0
    union = area_p + area_t - inter
    cw = max(x2, tx2) - min(x1, tx1)
    ch = max(y2, ty2) - min(y1, ty1)
    hull = cw * ch
    if union <= 0 or hull <= 0:
        return 0.0, np.zeros(4)

    d_area = np.array([-ph, -pw, ph, pw])
    d_inter = np.zeros(4)
    if overlapping:
        d_inter = np.array([
            -ih if x1 > tx1 else 0.0,
            -iw if y1 > ty1 else 0.0,
            ih if x2 < tx2 else 0.0,
            iw if y2 < ty2 else 0.0,
        ])
    d_hull = np.array([
        -ch if x1 < tx1 else 0.0,
        -cw if y1 < ty1 else 0.0,
        ch if x2 > tx2 else 0.0,
        cw if y2 > ty2 else 0.0,
    ])
    d_union = d_area - d_inter
    value = inter / union - 1.0 + union / hull
    grad = (
        d_inter / union
        - inter * d_union / union**2
        + d_union / hull
        - union * d_hull / hull**2
    )
    return value, grad


def reg_loss_and_grad(
    pred: np.ndarray,
    target: np.ndarray,
    kind: RegKind | str = RegKind.SMOOTH_L1,
    beta: float = 1.0,
) -> tuple[float, np.ndarray]:
    """
    Regression loss of corner arrays and its gradient with respect to ``pred``.

    ``pred`` may be any 4-vector; corners are not required to be ordered so
    the trainer can step through degenerate boxes. At the kinks of the
    absolute value and of min/max the zero subgradient is used.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    deltas = pred - target
    if RegKind(kind) is RegKind.SMOOTH_L1:
        grad = np.where(np.abs(deltas) < beta, deltas / beta, np.sign(deltas))
        return float(np.sum(smooth_l1(deltas, beta))), grad
    value, d_giou = _giou_grad(pred, target)
    loss = float(np.mean(np.abs(deltas))) + 1.0 - value
    return loss, np.sign(deltas) / 4.0 - d_giou


def cls_loss_and_grad_batch(
    logits: np.ndarray,
    targets: np.ndarray,
    kind: ClsKind | str = ClsKind.CROSS_ENTROPY,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`cls_loss_and_grad` over logits of shape ``(n, C + 1)``."""
    probs = softmax(np.asarray(logits, dtype=float))
    rows = np.arange(len(targets))
    raw = probs[rows, targets]
    if np.any(raw < PROB_FLOOR):
        logger.warning("%d target probabilities clamped to %.0e", int(np.sum(raw < PROB_FLOOR)), PROB_FLOOR)
    p = np.maximum(raw, PROB_FLOOR)
    onehot = np.zeros_like(probs)
    onehot[rows, targets] = 1.0
    if ClsKind(kind) is ClsKind.CROSS_ENTROPY:
        return -np.log(p), probs - onehot
    q = 1.0 - p
    loss = -alpha * q**gamma * np.log(p)
    q_pow = np.power(q, gamma - 1.0, out=np.zeros_like(q), where=q > 0)
    d_loss_d_p = alpha * (gamma * q_pow * np.log(p) - q**gamma / p)
    return loss, (d_loss_d_p * p)[:, None] * (onehot - probs)


def reg_loss_and_grad_batch(
    pred: np.ndarray,
    target: np.ndarray,
    kind: RegKind | str = RegKind.SMOOTH_L1,
    beta: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`reg_loss_and_grad` over corner arrays of shape ``(n, 4)``."""
    pred = np.asarray(pred, dtype=float).reshape(-1, 4)
    target = np.asarray(target, dtype=float).reshape(-1, 4)
    if RegKind(kind) is RegKind.SMOOTH_L1:
        deltas = pred - target
        grad = np.where(np.abs(deltas) < beta, deltas / beta, np.sign(deltas))
        return np.sum(smooth_l1(deltas, beta), axis=1), grad
    losses = np.zeros(len(pred))
    grads = np.zeros_like(pred)
    for i in range(len(pred)):
        losses[i], grads[i] = reg_loss_and_grad(pred[i], target[i], kind, beta)
    return losses, grads


@dataclass(frozen=True)
class LossBreakdown:
    """
    The four loss terms of one batch and their weighted total.

    ``total = cls_labeled + reg_labeled + lambda_u * (cls_unlabeled + reg_unlabeled)``
    """
    cls_labeled: float
    reg_labeled: float
    cls_unlabeled: float
    reg_unlabeled: float
    total: float
    lambda_u: float

    @classmethod
    def compose(
        cls, cls_labeled: float, reg_labeled: float, cls_unlabeled: float, reg_unlabeled: float, lambda_u: float
    ) -> LossBreakdown:
        total = cls_labeled + reg_labeled + lambda_u * (cls_unlabeled + reg_unlabeled)
        return cls(cls_labeled, reg_labeled, cls_unlabeled, reg_unlabeled, total, lambda_u)

    @property
    def supervised(self) -> float:
        return self.cls_labeled + self.reg_labeled

    @property
    def unsupervised(self) -> float:
        return self.cls_unlabeled + self.reg_unlabeled

    def to_row(self) -> dict[str, Any]:
        return {
            "cls_labeled": self.cls_labeled,
            "reg_labeled": self.reg_labeled,
            "cls_unlabeled": self.cls_unlabeled,
            "reg_unlabeled": self.reg_unlabeled,
            "total": self.total,
        }


@dataclass(frozen=True)
class StagePrediction:
    """One head's student output for one proposal."""
    probs: tuple[float, ...]
    box: BBox


@dataclass(frozen=True)
class LabeledTerm:
    """
    A labeled proposal with its target and per-stage student predictions.

    ``target_box`` is None for background proposals, which only enter the
    classification loss.
    """
    target_class: int
    target_box: BBox | None
    predictions: tuple[StagePrediction, ...]


def batch_losses(
    labeled: Sequence[LabeledTerm],
    pseudo: PseudoLabelSet,
    student: Sequence[Sequence[StagePrediction]],
    lambda_u: float = 1.0,
    config: LossConfig | None = None,
) -> LossBreakdown:
    """
    Composite loss of a batch.

    Losses are summed over stages without stage weights and averaged over
    proposals: labeled terms over the labeled proposals, unlabeled terms over
    all unlabeled proposals of the batch, gated-out ones included. Stage ``k``
    of an unlabeled proposal contributes only when the proposal passes stage
    ``k``, with the teacher class and box as targets.

    Args:
        labeled: Labeled proposals
        pseudo: Gated pseudo-labels of the unlabeled proposals
        student: Per unlabeled proposal, one prediction per stage, aligned with ``pseudo.rows()``
        lambda_u: Weight of the unlabeled terms
        config: Loss kinds and parameters

    Raises:
        AlignmentError: If predictions and pseudo-labels or stages do not line up
    """
    config = config or LossConfig()
    rows = pseudo.rows()
    if len(student) != len(rows):
        raise AlignmentError(f"{len(student)} student predictions for {len(rows)} pseudo-labels")
    k = pseudo.num_stages

    def cls_term(probs: Sequence[float], target: int) -> float:
        return cls_loss(probs, target, config.cls_kind, config.focal_alpha, config.focal_gamma)

    def reg_term(pred: BBox, target: BBox) -> float:
        return reg_loss(pred, target, config.reg_kind, config.beta)

    cls_l: list[float] = []
    reg_l: list[float] = []
    for term in labeled:
        if labeled and len(term.predictions) != len(labeled[0].predictions):
            raise AlignmentError("Labeled proposals have different stage counts")
        for pred in term.predictions:
            cls_l.append(cls_term(pred.probs, term.target_class))
            if term.target_box is not None:
                reg_l.append(reg_term(pred.box, term.target_box))

    cls_u: list[float] = []
    reg_u: list[float] = []
    for row, predictions in zip(rows, student):
        if len(predictions) != k:
            raise AlignmentError(f"Expected {k} stage predictions, got {len(predictions)}")
        for stage, pred in enumerate(predictions, start=1):
            if not row.passes[stage - 1]:
                continue
            target = row.target_for(stage)
            cls_u.append(cls_term(pred.probs, target.y_hat))
            reg_u.append(reg_term(pred.box, target.b_t))

    n_l = len(labeled)
    n_u = len(rows)
    breakdown = LossBreakdown.compose(
        math.fsum(cls_l) / n_l if n_l else 0.0,
        math.fsum(reg_l) / n_l if n_l else 0.0,
        math.fsum(cls_u) / n_u if n_u else 0.0,
        math.fsum(reg_u) / n_u if n_u else 0.0,
        lambda_u,
    )
    logger.debug("Batch losses over %d labeled / %d unlabeled proposals: %s", n_l, n_u, breakdown)
    return breakdown
