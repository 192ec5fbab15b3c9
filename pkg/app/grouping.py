"""Group formation and group confidence pooling.

A detection's group is every detection predicted as the same class whose
box overlaps it with IoU strictly above the threshold, the detection itself
included. The pooled location is the confidence-weighted mean of the group's
boxes, taken coordinate-wise over (l_x, l_y, l_w, l_h).
"""

from typing import Optional

import numpy as np

from app.geometry import boxes_to_array, iou, pairwise_iou
from app.models import BACKGROUND, BBox, DetectionState, GroupMember


DEFAULT_GROUP_IOU = 0.7


class GroupingError(Exception):
    """Base exception for grouping errors."""
    pass


class BackgroundGroupError(GroupingError):
    """Raised when a group is requested for a background detection."""
    pass


class EmptyGroupError(GroupingError):
    """Raised when pooling an empty group."""
    pass


def form_group(
    target_index: int,
    detections: list[DetectionState],
    iou_threshold: float = DEFAULT_GROUP_IOU
) -> list[GroupMember]:
    """Collect the same-class detections overlapping the target.

    Args:
        target_index: Position of the target in detections
        detections: Current detection states (boxes already regressed)
        iou_threshold: Strict IoU bound in (0, 1)

    Returns:
        Group members in input order; always contains the target

    Raises:
        BackgroundGroupError: If the target is predicted as background
        ValueError: If iou_threshold is outside (0, 1)
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")

    target = detections[target_index]
    if target.predicted_class == BACKGROUND:
        raise BackgroundGroupError("background has no group")

    group = []
    for index, candidate in enumerate(detections):
        if candidate.predicted_class != target.predicted_class:
            continue
        if index == target_index or iou(target.box, candidate.box) > iou_threshold:
            group.append(GroupMember(box=candidate.box, score=candidate.score, index=index))
    return group


def group_confidence_pool(group: list[GroupMember]) -> BBox:
    """Confidence-weighted expected location of a group.

    Raises:
        EmptyGroupError: If the group has no members
    """
    if not group:
        raise EmptyGroupError("empty group")
    if len(group) == 1:
        return group[0].box

    weights = np.array([member.score for member in group], dtype=np.float64)
    boxes = boxes_to_array([member.box for member in group])
    pooled = weights @ boxes / weights.sum()
    return BBox.from_array(pooled)


# ============================================================================
# Vectorized forms used by the refinement engine
# ============================================================================

def group_membership(
    boxes: np.ndarray,
    classes: np.ndarray,
    iou_threshold: float = DEFAULT_GROUP_IOU,
    neighbor_boxes: Optional[np.ndarray] = None
) -> np.ndarray:
    """Boolean (n, n) matrix; row i marks the members of detection i's group.

    Background rows are all False. When neighbor_boxes is given, overlap of
    target i with neighbor j is measured against neighbor_boxes[j] instead of
    boxes[j] (the target itself is always a member).
    """
    classes = np.asarray(classes)
    others = boxes if neighbor_boxes is None else neighbor_boxes
    overlaps = pairwise_iou(boxes, others) > iou_threshold

    foreground = classes != BACKGROUND
    same_class = classes[:, None] == classes[None, :]
    member = overlaps & same_class & foreground[:, None]
    np.fill_diagonal(member, foreground)
    return member


def pool_groups(
    boxes: np.ndarray,
    scores: np.ndarray,
    membership: np.ndarray,
    neighbor_boxes: Optional[np.ndarray] = None
) -> np.ndarray:
    """Pool every row with a non-empty group; other rows are returned unchanged.

    Row i of the result is sum_j s_j * l_j / sum_j s_j over its members, where
    l_i is boxes[i] and l_j (j != i) comes from neighbor_boxes when given.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    weights = membership * np.asarray(scores, dtype=np.float64)[None, :]
    totals = weights.sum(axis=1)
    pooled = boxes.copy()
    # Groups of one pool to themselves exactly
    rows = (totals > 0) & (membership.sum(axis=1) > 1)
    if not rows.any():
        return pooled

    if neighbor_boxes is None:
        pooled[rows] = weights[rows] @ boxes / totals[rows, None]
        return pooled

    # Target's own contribution uses its own box; neighbors use theirs
    self_weight = np.diag(weights)
    off_diagonal = weights.copy()
    np.fill_diagonal(off_diagonal, 0.0)
    numerator = off_diagonal @ np.asarray(neighbor_boxes, dtype=np.float64) + self_weight[:, None] * boxes
    pooled[rows] = numerator[rows] / totals[rows, None]
    return pooled
