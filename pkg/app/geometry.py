"""Axis-aligned box arithmetic.

IoU, the regression encoding f and its inverse, clipping to the image and the
corner-form conversions used at file boundaries. Every operation comes in two
forms: a scalar one over BBox values and a vectorized one over (n, 4) float
arrays in center form (l_x, l_y, l_w, l_h), which the refinement engine and
the trainer use.
"""

import math

import numpy as np

from app.models import BBox, ImageExtent, RegressionTarget


class GeometryError(Exception):
    """Base exception for box arithmetic errors."""
    pass


class EmptyAfterClipError(GeometryError):
    """Raised when clipping leaves a box with no area."""
    pass


class DecodeOverflowError(GeometryError):
    """Raised when offsets push a decoded box outside the numeric range."""
    pass


# ============================================================================
# Representation helpers
# ============================================================================

def boxes_to_array(boxes) -> np.ndarray:
    """Stack BBox values into an (n, 4) center-form array."""
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([[b.l_x, b.l_y, b.l_w, b.l_h] for b in boxes], dtype=np.float64)


def array_to_boxes(array: np.ndarray) -> list[BBox]:
    return [BBox.from_array(row) for row in np.asarray(array, dtype=np.float64)]


def center_to_corners(boxes: np.ndarray) -> np.ndarray:
    """Convert (n, 4) center-form boxes to (xmin, ymin, xmax, ymax)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[:, 2:] / 2.0
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def corners_to_center(corners: np.ndarray) -> np.ndarray:
    corners = np.asarray(corners, dtype=np.float64)
    size = corners[:, 2:] - corners[:, :2]
    return np.concatenate([(corners[:, :2] + corners[:, 2:]) / 2.0, size], axis=1)


# ============================================================================
# IoU
# ============================================================================

def iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area of two boxes.

    Boxes touching only along an edge have zero intersection and IoU 0.

    Args:
        a: First box
        b: Second box

    Returns:
        Ratio in [0, 1]; symmetric in its arguments
    """
    ax1, ay1, ax2, ay2 = a.to_corners()
    bx1, by1, bx2, by2 = b.to_corners()

    inter_w = min(ax2, bx2) - max(ax1, bx1)
    inter_h = min(ay2, by2) - max(ay1, by1)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0

    inter = inter_w * inter_h
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between (n, 4) and (m, 4) center-form arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ca = center_to_corners(a)
    cb = center_to_corners(b)

    xx1 = np.maximum(ca[:, None, 0], cb[None, :, 0])
    yy1 = np.maximum(ca[:, None, 1], cb[None, :, 1])
    xx2 = np.minimum(ca[:, None, 2], cb[None, :, 2])
    yy2 = np.minimum(ca[:, None, 3], cb[None, :, 3])

    inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.minimum(1.0, inter / union)


# ============================================================================
# Regression transform f and its inverse
# ============================================================================

def encode(proposal: BBox, target: BBox) -> RegressionTarget:
    """Offsets r = f(proposal, target).

    r_x = (t_x - p_x) / p_w, r_y = (t_y - p_y) / p_h,
    r_w = ln(t_w / p_w), r_h = ln(t_h / p_h).
    """
    return RegressionTarget(
        r_x=(target.l_x - proposal.l_x) / proposal.l_w,
        r_y=(target.l_y - proposal.l_y) / proposal.l_h,
        r_w=math.log(target.l_w / proposal.l_w),
        r_h=math.log(target.l_h / proposal.l_h),
    )


def decode(proposal: BBox, offsets: RegressionTarget) -> BBox:
    """Apply offsets to a proposal, the inverse of encode.

    Raises:
        DecodeOverflowError: If exponentiating the size shifts overflows or
                             underflows to a non-positive size
    """
    try:
        width = proposal.l_w * math.exp(offsets.r_w)
        height = proposal.l_h * math.exp(offsets.r_h)
    except OverflowError as e:
        raise DecodeOverflowError(f"size offsets overflow: {offsets.r_w}, {offsets.r_h}") from e

    center_x = proposal.l_x + offsets.r_x * proposal.l_w
    center_y = proposal.l_y + offsets.r_y * proposal.l_h
    values = (center_x, center_y, width, height)
    if not all(math.isfinite(v) for v in values) or width <= 0 or height <= 0:
        raise DecodeOverflowError(f"decoded box leaves the numeric range: {values}")

    return BBox(l_x=center_x, l_y=center_y, l_w=width, l_h=height)


def encode_boxes(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized encode over aligned (n, 4) arrays."""
    proposals = np.asarray(proposals, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    out = np.empty_like(proposals)
    out[:, 0] = (targets[:, 0] - proposals[:, 0]) / proposals[:, 2]
    out[:, 1] = (targets[:, 1] - proposals[:, 1]) / proposals[:, 3]
    out[:, 2] = np.log(targets[:, 2] / proposals[:, 2])
    out[:, 3] = np.log(targets[:, 3] / proposals[:, 3])
    return out


def decode_boxes(proposals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Vectorized decode over aligned (n, 4) arrays.

    Raises:
        DecodeOverflowError: If any decoded row is non-finite or has a
                             non-positive size
    """
    proposals = np.asarray(proposals, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    out = np.empty_like(proposals)
    with np.errstate(over="ignore", invalid="ignore"):
        out[:, 0] = proposals[:, 0] + offsets[:, 0] * proposals[:, 2]
        out[:, 1] = proposals[:, 1] + offsets[:, 1] * proposals[:, 3]
        out[:, 2] = proposals[:, 2] * np.exp(offsets[:, 2])
        out[:, 3] = proposals[:, 3] * np.exp(offsets[:, 3])

    bad = ~np.isfinite(out).all(axis=1) | (out[:, 2] <= 0) | (out[:, 3] <= 0)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DecodeOverflowError(f"decoded box {row} leaves the numeric range: offsets {offsets[row].tolist()}")
    return out


# ============================================================================
# Clipping and mirroring
# ============================================================================

def clip(box: BBox, extent: ImageExtent) -> BBox:
    """Clamp a box's corners to [0, width] x [0, height].

    Raises:
        EmptyAfterClipError: If the clamped box has zero width or height
    """
    xmin, ymin, xmax, ymax = box.to_corners()
    if xmin >= 0 and ymin >= 0 and xmax <= extent.width and ymax <= extent.height:
        return box

    xmin = min(max(xmin, 0.0), extent.width)
    xmax = min(max(xmax, 0.0), extent.width)
    ymin = min(max(ymin, 0.0), extent.height)
    ymax = min(max(ymax, 0.0), extent.height)

    if xmax <= xmin or ymax <= ymin:
        raise EmptyAfterClipError("empty after clip")

    return BBox.from_corners(xmin, ymin, xmax, ymax)


def clip_boxes(boxes: np.ndarray, extent: ImageExtent) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized clip.

    Returns:
        Tuple of (clipped boxes, empty mask). Rows flagged in the mask have
        no area left and hold the unclipped input unchanged.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    corners = center_to_corners(boxes)
    outside = (
        (corners[:, 0] < 0) | (corners[:, 1] < 0)
        | (corners[:, 2] > extent.width) | (corners[:, 3] > extent.height)
    )
    corners[:, [0, 2]] = np.clip(corners[:, [0, 2]], 0.0, extent.width)
    corners[:, [1, 3]] = np.clip(corners[:, [1, 3]], 0.0, extent.height)

    empty = (corners[:, 2] <= corners[:, 0]) | (corners[:, 3] <= corners[:, 1])
    # Rows already inside the image are returned bit-exact
    clipped = boxes.copy()
    changed = outside & ~empty
    clipped[changed] = corners_to_center(corners[changed])
    return clipped, empty


def mirror(box: BBox, extent: ImageExtent) -> BBox:
    """Reflect a box about the vertical center line of the image."""
    return BBox(l_x=extent.width - box.l_x, l_y=box.l_y, l_w=box.l_w, l_h=box.l_h)


def mirror_boxes(boxes: np.ndarray, extent: ImageExtent) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[:, 0] = extent.width - out[:, 0]
    return out
