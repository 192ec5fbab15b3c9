"""Training losses.

The per-iteration loss is the log loss of the ground-truth class plus, for
foreground samples only, the smooth L1 loss between the offsets predicted for
that class and the regression target. The unrolled loss sums the
per-iteration losses. Scalar forms operate on single samples; the batch forms
below them are what the trainer differentiates.
"""

import math

import numpy as np

from app.models import BACKGROUND, LossBreakdown, RegressionTarget


# Floor applied to the ground-truth probability before the log
PROB_EPSILON = 1e-12


class ObjectiveError(Exception):
    """Base exception for loss evaluation errors."""
    pass


class InvalidLabelError(ObjectiveError):
    """Raised when a ground-truth label is outside 0..K."""
    pass


class NoIterationsError(ObjectiveError):
    """Raised when summing an empty list of iteration losses."""
    pass


# ============================================================================
# Scalar losses
# ============================================================================

def log_loss(probs, g: int) -> float:
    """-log probs[g], with probs[g] floored at PROB_EPSILON.

    Raises:
        InvalidLabelError: If g is not a valid class index
    """
    if not 0 <= g < len(probs):
        raise InvalidLabelError(f"invalid label {g} for {len(probs)} classes")
    return -math.log(max(float(probs[g]), PROB_EPSILON))


def smooth_l1(predicted: RegressionTarget, target: RegressionTarget) -> float:
    """Sum over the four coordinates of 0.5 x^2 if |x| < 1 else |x| - 0.5."""
    diff = predicted.as_array() - target.as_array()
    return float(smooth_l1_values(diff).sum())


def multitask_loss(
    probs,
    g: int,
    predicted_offsets: RegressionTarget,
    target_offsets: RegressionTarget,
    cls_weight: float = 1.0,
    loc_weight: float = 1.0
) -> LossBreakdown:
    """Classification plus localization loss of one sample.

    The localization term is zero for background samples (g = 0).
    """
    cls = cls_weight * log_loss(probs, g)
    loc = 0.0
    if g != BACKGROUND:
        loc = loc_weight * smooth_l1(predicted_offsets, target_offsets)
    return LossBreakdown(cls=cls, loc=loc, total=cls + loc)


def global_loss(per_iteration: list[LossBreakdown]) -> float:
    """Sum of totals across unrolled iterations.

    Raises:
        NoIterationsError: If the list is empty
    """
    if not per_iteration:
        raise NoIterationsError("no iterations")
    return sum(breakdown.total for breakdown in per_iteration)


def combine_iterations(per_iteration: list[LossBreakdown]) -> LossBreakdown:
    """Fold per-iteration breakdowns into one with per_iteration populated."""
    if not per_iteration:
        raise NoIterationsError("no iterations")
    pairs = [(b.cls, b.loc) for b in per_iteration]
    return LossBreakdown(
        cls=sum(c for c, _ in pairs),
        loc=sum(l for _, l in pairs),
        total=global_loss(per_iteration),
        per_iteration=pairs,
    )


# ============================================================================
# Gradients and batch forms
# ============================================================================

def smooth_l1_values(diff: np.ndarray) -> np.ndarray:
    diff = np.asarray(diff, dtype=np.float64)
    absolute = np.abs(diff)
    return np.where(absolute < 1.0, 0.5 * diff * diff, absolute - 0.5)


def smooth_l1_grad(diff: np.ndarray) -> np.ndarray:
    """Derivative of the smooth L1 penalty: x inside (-1, 1), sign(x) outside."""
    return np.clip(np.asarray(diff, dtype=np.float64), -1.0, 1.0)


def log_loss_grad_logits(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of -log softmax(z)[g] with respect to z: probs - onehot(g)."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    grad = probs.copy()
    grad[np.arange(grad.shape[0]), np.asarray(labels, dtype=np.int64)] -= 1.0
    return grad


def batch_log_loss(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample log loss over an (n, K+1) batch."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise InvalidLabelError(f"invalid label for {probs.shape[1]} classes")
    picked = probs[np.arange(probs.shape[0]), labels]
    return -np.log(np.maximum(picked, PROB_EPSILON))


def batch_smooth_l1(predicted: np.ndarray, targets: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample smooth L1 over (n, 4) arrays, zero where labels are background."""
    values = smooth_l1_values(np.asarray(predicted) - np.asarray(targets)).sum(axis=1)
    return np.where(np.asarray(labels) != BACKGROUND, values, 0.0)
