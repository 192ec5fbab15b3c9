"""Target assignment and SGD training of the unrolled predictor.

Each SGD step takes one scene, samples a mini-batch of its proposals and runs
the refinement loop for train.unroll_depth iterations with the current
weights. At every iteration the batch is relabeled against the current
boxes and its loss and gradient are accumulated; the refined boxes that feed
the next iteration are treated as constants. One shared parameter update
follows the last iteration.
"""

import logging
import math
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.config import RefinementConfig, SynthConfig, TrainConfig
from app.geometry import DecodeOverflowError, boxes_to_array, encode_boxes, mirror_boxes, pairwise_iou
from app.models import BACKGROUND, BBox, LossBreakdown, RegressionTarget, Scene
from app.objective import (
    batch_log_loss,
    batch_smooth_l1,
    combine_iterations,
    log_loss_grad_logits,
    smooth_l1_grad,
)
from app.predictor import PredictorModel, normalize_features, with_bias
from app.refine import apply_refinement
from app.synthdata import mirror_scene, synthesize_feature_matrix


logger = logging.getLogger(__name__)

# Label of proposals that take no part in training
EXCLUDED = -1


class TrainingError(Exception):
    """Base exception for training errors."""
    pass


class DivergenceError(TrainingError):
    """Raised when the loss or the weights stop being finite; step is 1-based."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        message = f"divergence at step {step}"
        super().__init__(f"{message}: {detail}" if detail else message)


class AssignedTarget(BaseModel):
    """Training label of one retained proposal."""

    model_config = ConfigDict(frozen=True)

    index: int = Field(..., ge=0, description="Position of the proposal")
    label: int = Field(..., ge=0, description="Ground-truth class g, 0 for background")
    target: Optional[RegressionTarget] = Field(None, description="Regression target, None for background")


class IterationLoss(BaseModel):
    """Mean loss of one unrolled iteration over the batch, with its gradients."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    breakdown: LossBreakdown
    grad_cls: np.ndarray
    grad_reg: np.ndarray
    samples: int = Field(..., ge=0, description="Batch members that took part")


class TrainingResult(BaseModel):
    """Trained weights plus the per-step global loss."""

    model: PredictorModel
    loss_curve: list[float] = Field(default_factory=list, description="Global loss of every SGD step")


# ============================================================================
# Target assignment
# ============================================================================

def assign_target_arrays(
    boxes: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    cfg: TrainConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Label (n, 4) boxes against ground truth.

    Returns:
        Tuple of (labels, targets). Labels are the matched class, 0 for
        background or EXCLUDED; target rows are zero except for positives.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    n = boxes.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    targets = np.zeros((n, 4))
    if n == 0 or len(gt_boxes) == 0:
        return labels, targets

    overlaps = pairwise_iou(boxes, gt_boxes)
    best = np.argmax(overlaps, axis=1)
    best_iou = overlaps[np.arange(n), best]

    positive = best_iou >= cfg.positive_iou
    background = (best_iou >= cfg.background_iou_lo) & (best_iou < cfg.background_iou_hi)
    labels[~positive & ~background] = EXCLUDED
    labels[positive] = gt_classes[best[positive]]
    if positive.any():
        targets[positive] = encode_boxes(boxes[positive], gt_boxes[best[positive]])
    return labels, targets


def assign_targets(proposals: list[BBox], scene: Scene, cfg: TrainConfig) -> list[AssignedTarget]:
    """Label proposals with a class and regression target.

    Proposals whose best overlap falls in neither the positive nor the
    background range are left out of the result.
    """
    gt_boxes, gt_classes = scene.gt_arrays()
    labels, targets = assign_target_arrays(boxes_to_array(proposals), gt_boxes, gt_classes, cfg)

    assigned = []
    for index, (label, target) in enumerate(zip(labels, targets)):
        if label == EXCLUDED:
            continue
        assigned.append(AssignedTarget(
            index=index,
            label=int(label),
            target=RegressionTarget.from_array(target) if label != BACKGROUND else None,
        ))
    return assigned


# ============================================================================
# Loss and gradients
# ============================================================================

def batch_loss_and_gradients(
    model: PredictorModel,
    conditioned: np.ndarray,
    labels: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig
) -> IterationLoss:
    """Mean multitask loss over the retained rows and its weight gradients.

    Rows labeled EXCLUDED contribute nothing. Only the regression rows of a
    positive sample's own class receive gradient.
    """
    labels = np.asarray(labels, dtype=np.int64)
    keep = labels != EXCLUDED
    grad_cls = np.zeros_like(model.cls_weights)
    grad_reg = np.zeros_like(model.reg_weights)
    m = int(keep.sum())
    if m == 0:
        return IterationLoss(
            breakdown=LossBreakdown(cls=0.0, loc=0.0, total=0.0),
            grad_cls=grad_cls, grad_reg=grad_reg, samples=0,
        )

    inputs = with_bias(np.asarray(conditioned)[keep])
    labels = labels[keep]
    targets = np.asarray(targets, dtype=np.float64)[keep]

    logits, flat = model.heads(inputs[:, :-1])
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)

    cls_loss = cfg.cls_weight * batch_log_loss(probs, labels).mean()
    grad_cls = cfg.cls_weight * log_loss_grad_logits(probs, labels).T @ inputs / m

    positive = np.flatnonzero(labels != BACKGROUND)
    predicted = np.zeros((m, 4))
    if positive.size:
        offsets = flat.reshape(m, model.num_classes, 4)
        predicted[positive] = offsets[positive, labels[positive] - 1]
    loc_loss = cfg.loc_weight * batch_smooth_l1(predicted, targets, labels).sum() / m

    if positive.size:
        slope = cfg.loc_weight * smooth_l1_grad(predicted[positive] - targets[positive]) / m
        for row, sample in zip(slope, positive):
            g = labels[sample]
            grad_reg[4 * (g - 1):4 * g] += np.outer(row, inputs[sample])

    cls_loss, loc_loss = float(cls_loss), float(loc_loss)
    if not (math.isfinite(cls_loss) and math.isfinite(loc_loss)):
        raise FloatingPointError(f"non-finite loss (cls={cls_loss}, loc={loc_loss})")

    return IterationLoss(
        breakdown=LossBreakdown(cls=cls_loss, loc=loc_loss, total=cls_loss + loc_loss),
        grad_cls=grad_cls, grad_reg=grad_reg, samples=m,
    )


def learning_rate_at(step: int, cfg: TrainConfig) -> float:
    """Step schedule: the base rate times decay_factor for every decay_step steps taken."""
    return cfg.learning_rate * cfg.lr_decay_factor ** (step // cfg.decay_step)


def _rate_matrix(shape: tuple[int, int], rate: float, cfg: TrainConfig) -> np.ndarray:
    rates = np.full(shape, rate * cfg.weight_lr_mult)
    rates[:, -1] = rate * cfg.bias_lr_mult
    return rates


# ============================================================================
# Training loop
# ============================================================================

def unrolled_step(
    model: PredictorModel,
    scene: Scene,
    boxes: np.ndarray,
    batch: np.ndarray,
    rng: np.random.Generator,
    train_cfg: TrainConfig,
    synth_cfg: SynthConfig,
    refine_cfg: RefinementConfig
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Loss and summed gradients of one scene over the unrolled iterations.

    Raises:
        DecodeOverflowError: If refinement between iterations overflows
        FloatingPointError: If a loss is not finite
    """
    gt_boxes, gt_classes = scene.gt_arrays()
    grad_cls = np.zeros_like(model.cls_weights)
    grad_reg = np.zeros_like(model.reg_weights)
    per_iteration = []

    current = np.asarray(boxes, dtype=np.float64)
    for t in range(1, train_cfg.unroll_depth + 1):
        raw = synthesize_feature_matrix(current, scene, synth_cfg, rng)
        conditioned = normalize_features(raw, model.feature_scale)
        labels, targets = assign_target_arrays(current[batch], gt_boxes, gt_classes, train_cfg)

        result = batch_loss_and_gradients(model, conditioned[batch], labels, targets, train_cfg)
        grad_cls += result.grad_cls
        grad_reg += result.grad_reg
        per_iteration.append(result.breakdown)

        if t < train_cfg.unroll_depth:
            probs, offsets = model.predict_conditioned(conditioned)
            current = apply_refinement(
                current, probs, offsets, refine_cfg, scene.extent,
                pool=train_cfg.pool_during_training,
            )

    return combine_iterations(per_iteration), grad_cls, grad_reg


def sgd_train(
    scenes: list[Scene],
    proposals: list[np.ndarray],
    train_cfg: TrainConfig,
    synth_cfg: SynthConfig,
    refine_cfg: Optional[RefinementConfig] = None,
    initial_model: Optional[PredictorModel] = None
) -> TrainingResult:
    """Train the predictor with plain SGD on the unrolled loss.

    Args:
        scenes: Training scenes
        proposals: (n, 4) proposal arrays aligned with scenes
        train_cfg: Schedule, unrolling and target assignment
        synth_cfg: Class count, feature dimension and feature synthesis
        refine_cfg: Grouping and clipping used between unrolled iterations
        initial_model: Starting weights; Gaussian initialization when omitted

    Returns:
        TrainingResult with the final model and the per-step loss

    Raises:
        TrainingError: If no scene has proposals
        DivergenceError: If the loss or weights become non-finite
    """
    refine_cfg = refine_cfg or RefinementConfig()
    usable = [i for i, boxes in enumerate(proposals) if len(boxes) > 0]
    if len(scenes) != len(proposals):
        raise TrainingError(f"{len(scenes)} scenes but {len(proposals)} proposal sets")
    if not usable:
        raise TrainingError("empty dataset: no scene has proposals")

    rng = np.random.default_rng(train_cfg.seed)
    model = initial_model or PredictorModel.initialize(
        synth_cfg.num_classes,
        synth_cfg.feature_dim,
        rng,
        std_cls=train_cfg.init_std_cls,
        std_reg=train_cfg.init_std_reg,
        feature_scale=train_cfg.feature_scale,
    )

    logger.info(
        "Training on %d scenes: %d steps, batch %d, unroll depth %d",
        len(usable), train_cfg.iterations, train_cfg.batch_size, train_cfg.unroll_depth
    )

    loss_curve: list[float] = []
    order: list[int] = []
    for step in range(train_cfg.iterations):
        if not order:
            order = [usable[i] for i in rng.permutation(len(usable))]
        index = order.pop()
        scene = scenes[index]
        boxes = np.asarray(proposals[index], dtype=np.float64)

        if train_cfg.flip_augment and rng.random() < 0.5:
            scene = mirror_scene(scene)
            boxes = mirror_boxes(boxes, scene.extent)

        n = boxes.shape[0]
        batch = np.sort(rng.choice(n, size=min(train_cfg.batch_size, n), replace=False))

        try:
            breakdown, grad_cls, grad_reg = unrolled_step(
                model, scene, boxes, batch, rng, train_cfg, synth_cfg, refine_cfg
            )
        except (DecodeOverflowError, FloatingPointError) as e:
            raise DivergenceError(step + 1, str(e)) from e

        rate = learning_rate_at(step, train_cfg)
        cls_weights = model.cls_weights - _rate_matrix(grad_cls.shape, rate, train_cfg) * grad_cls
        reg_weights = model.reg_weights - _rate_matrix(grad_reg.shape, rate, train_cfg) * grad_reg
        if not (np.isfinite(cls_weights).all() and np.isfinite(reg_weights).all()):
            raise DivergenceError(step + 1, "weights are no longer finite")
        model = model.updated(cls_weights, reg_weights)

        loss_curve.append(breakdown.total)
        if (step + 1) % train_cfg.log_every == 0:
            window = loss_curve[-train_cfg.log_every:]
            logger.info("Step %d/%d: mean loss %.4f, lr %g", step + 1, train_cfg.iterations, sum(window) / len(window), rate)

    return TrainingResult(model=model, loss_curve=loss_curve)


def window_mean(curve: list[float], window: int = 50, last: bool = False) -> float:
    """Mean of the first (or last) `window` entries of a loss curve."""
    if not curve:
        raise ValueError("empty loss curve")
    values = curve[-window:] if last else curve[:window]
    return sum(values) / len(values)
