"""Iterative refinement engine.

Each step scores the current boxes, regresses the foreground ones with the
offsets of their predicted class, pools them with their same-class neighbors
and optionally clips the result. Boxes predicted as background keep their
location for that step. Pooling reads a snapshot of the regressed boxes, so
the result does not depend on the order of the detections.
"""

import logging
from typing import Callable, Optional, Protocol

import numpy as np

from app.config import RefinementConfig
from app.geometry import array_to_boxes, boxes_to_array, clip_boxes, decode_boxes, pairwise_iou
from app.grouping import group_membership, pool_groups
from app.models import BACKGROUND, BBox, DetectionState, ImageExtent


logger = logging.getLogger(__name__)

# Called with the current (n, 4) boxes and the 1-based iteration number
FeatureProvider = Callable[[np.ndarray, int], np.ndarray]


class RefinementError(Exception):
    """Base exception for refinement errors."""
    pass


class AlignmentError(RefinementError):
    """Raised when features and detection states are not one-to-one."""
    pass


class BoxPredictor(Protocol):
    """Anything that scores a batch of raw feature vectors."""

    @property
    def num_classes(self) -> int: ...

    def predict_batch(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (probs (n, K+1), offsets (n, K, 4))."""
        ...


# ============================================================================
# Array core shared with the trainer
# ============================================================================

def apply_refinement(
    boxes: np.ndarray,
    probs: np.ndarray,
    offsets: np.ndarray,
    config: RefinementConfig,
    extent: Optional[ImageExtent] = None,
    pool: Optional[bool] = None
) -> np.ndarray:
    """One location update over aligned arrays.

    Args:
        boxes: (n, 4) current boxes
        probs: (n, K+1) class distributions for this step
        offsets: (n, K, 4) per-class regression offsets
        config: Refinement settings
        extent: Image extent used for clipping; clipping is skipped when None
        pool: Overrides config.pool_during_refinement when given

    Returns:
        (n, 4) updated boxes; background rows are returned unchanged

    Raises:
        DecodeOverflowError: If a foreground offset leaves the numeric range
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    n = boxes.shape[0]
    if n == 0:
        return boxes.copy()

    classes = np.argmax(probs, axis=1)
    scores = probs[np.arange(n), classes]
    foreground = classes != BACKGROUND

    regressed = boxes.copy()
    if foreground.any():
        fg_offsets = offsets[np.flatnonzero(foreground), classes[foreground] - 1]
        regressed[foreground] = decode_boxes(boxes[foreground], fg_offsets)

    if config.pool_during_refinement if pool is None else pool:
        if config.pool_neighbors == "previous":
            membership = group_membership(regressed, classes, config.group_iou_threshold, neighbor_boxes=boxes)
            refined = pool_groups(regressed, scores, membership, neighbor_boxes=boxes)
        else:
            membership = group_membership(regressed, classes, config.group_iou_threshold)
            refined = pool_groups(regressed, scores, membership)
    else:
        refined = regressed

    if extent is not None and config.clip_to_image:
        clipped, empty = clip_boxes(refined, extent)
        frozen = empty & foreground
        if frozen.any():
            logger.warning("%d refined boxes left the image and keep their previous location", int(frozen.sum()))
            clipped[frozen] = boxes[frozen]
        refined = clipped

    return refined


# ============================================================================
# State-level API
# ============================================================================

def refine_step(
    states: list[DetectionState],
    predictor: BoxPredictor,
    features: np.ndarray,
    config: RefinementConfig,
    extent: Optional[ImageExtent] = None
) -> list[DetectionState]:
    """Run one refinement iteration over all detections.

    Args:
        states: Current detection states
        predictor: Model scoring the raw features
        features: (n, F) raw feature vectors, one row per state
        config: Refinement settings
        extent: Image extent for clipping

    Returns:
        New states with the step's box, class and score appended to their histories

    Raises:
        AlignmentError: If features and states differ in length
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != len(states):
        raise AlignmentError(
            f"alignment error: {len(states)} states, features of shape {features.shape}"
        )
    if not states:
        return []

    probs, offsets = predictor.predict_batch(features)
    boxes = boxes_to_array([state.box for state in states])
    refined = apply_refinement(boxes, probs, offsets, config, extent)

    new_states = []
    for state, row, box in zip(states, probs, array_to_boxes(refined)):
        class_probs = [float(p) for p in row]
        predicted = int(np.argmax(row))
        score = class_probs[predicted]
        new_states.append(DetectionState(
            box=box,
            proposal=state.proposal,
            class_probs=class_probs,
            predicted_class=predicted,
            score=score,
            trajectory=[*state.trajectory, box],
            class_history=[*state.class_history, predicted],
            score_history=[*state.score_history, score],
        ))

    logger.debug(
        "Refinement step: %d detections, %d foreground",
        len(new_states), sum(1 for s in new_states if not s.is_background)
    )
    return new_states


def run_refinement(
    proposals: list[BBox],
    predictor: BoxPredictor,
    feature_fn: FeatureProvider,
    config: RefinementConfig,
    extent: Optional[ImageExtent] = None
) -> list[DetectionState]:
    """Refine proposals for config.iterations steps.

    Features are re-extracted from the current boxes before every step, so
    step t sees the boxes produced by step t - 1.
    """
    states = [DetectionState.initial(p, predictor.num_classes) for p in proposals]
    for iteration in range(1, config.iterations + 1):
        boxes = boxes_to_array([state.box for state in states])
        states = refine_step(states, predictor, feature_fn(boxes, iteration), config, extent)
    return states


# ============================================================================
# Non-maximum suppression
# ============================================================================

def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression over one class; returns kept indices in score order.

    Equal scores keep their input order.
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    overlaps = pairwise_iou(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= overlaps[i] > iou_threshold
    return np.array(keep, dtype=np.int64)


def nms(states: list[DetectionState], iou_threshold: float = 0.45) -> list[DetectionState]:
    """Per-class greedy NMS over final states.

    Background states are dropped. Survivors are returned in input order.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")

    kept: list[int] = []
    classes = np.array([state.predicted_class for state in states], dtype=np.int64)
    for cls in np.unique(classes):
        if cls == BACKGROUND:
            continue
        members = np.flatnonzero(classes == cls)
        boxes = boxes_to_array([states[i].box for i in members])
        scores = np.array([states[i].score for i in members])
        kept.extend(int(members[j]) for j in nms_indices(boxes, scores, iou_threshold))

    return [states[i] for i in sorted(kept)]
