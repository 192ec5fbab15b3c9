"""Linear softmax predictor with per-class box regression heads.

Raw features are L2-normalized and scaled to a fixed norm before the heads
see them. The classification head maps [v; 1] to K+1 logits, and the
regression head maps it to 4 offsets per foreground class, class k occupying
rows 4(k-1) .. 4k-1.
"""

import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.models import RegressionTarget


logger = logging.getLogger(__name__)

FEATURE_SCALE = 1000.0


class PredictorError(Exception):
    """Base exception for predictor errors."""
    pass


class DimensionMismatchError(PredictorError):
    """Raised when a feature vector does not match the model's input size."""
    pass


class CheckpointError(PredictorError):
    """Raised when a checkpoint cannot be read, written or validated."""
    pass


# ============================================================================
# Numerics
# ============================================================================

def normalize_features(v: np.ndarray, scale: float = FEATURE_SCALE) -> np.ndarray:
    """L2-normalize a vector (or each row of a matrix) and rescale to `scale`.

    Zero vectors pass through unchanged.
    """
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return v / safe * scale


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def with_bias(features: np.ndarray) -> np.ndarray:
    """Append the constant bias input to each row."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return np.hstack([features, np.ones((features.shape[0], 1))])


def _frozen_copy(value) -> np.ndarray:
    array = np.array(value, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


# ============================================================================
# Model
# ============================================================================

class PredictorModel(BaseModel):
    """Weights of both heads; immutable once built."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    cls_weights: np.ndarray = Field(..., description="(K+1) x (F+1) classification weights, bias last")
    reg_weights: np.ndarray = Field(..., description="4K x (F+1) regression weights, bias last")
    feature_scale: float = Field(FEATURE_SCALE, gt=0, description="Norm of conditioned features")

    @field_validator("cls_weights", "reg_weights", mode="before")
    @classmethod
    def _as_array(cls, value) -> np.ndarray:
        array = _frozen_copy(value)
        if array.ndim != 2:
            raise ValueError("weights must be a matrix")
        if not np.isfinite(array).all():
            raise ValueError("weights must be finite")
        return array

    @model_validator(mode="after")
    def _check_shapes(self) -> "PredictorModel":
        k_plus_one, cls_cols = self.cls_weights.shape
        reg_rows, reg_cols = self.reg_weights.shape
        if k_plus_one < 2:
            raise ValueError("classification head needs at least one foreground class")
        if reg_rows != 4 * (k_plus_one - 1):
            raise ValueError(f"regression head must have {4 * (k_plus_one - 1)} rows, got {reg_rows}")
        if reg_cols != cls_cols or cls_cols < 2:
            raise ValueError("heads must share the feature dimension plus bias")
        return self

    @property
    def num_classes(self) -> int:
        return self.cls_weights.shape[0] - 1

    @property
    def feature_dim(self) -> int:
        return self.cls_weights.shape[1] - 1

    @classmethod
    def zeros(cls, num_classes: int, feature_dim: int, feature_scale: float = FEATURE_SCALE) -> "PredictorModel":
        return cls(
            cls_weights=np.zeros((num_classes + 1, feature_dim + 1)),
            reg_weights=np.zeros((4 * num_classes, feature_dim + 1)),
            feature_scale=feature_scale,
        )

    @classmethod
    def initialize(
        cls,
        num_classes: int,
        feature_dim: int,
        rng: np.random.Generator,
        std_cls: float = 0.01,
        std_reg: float = 0.001,
        feature_scale: float = FEATURE_SCALE
    ) -> "PredictorModel":
        """Gaussian weights, zero biases.

        The stds are given for unit-norm inputs and divided by feature_scale,
        so initial outputs do not depend on the conditioning scale.
        """
        cls_w = rng.normal(0.0, std_cls / feature_scale, size=(num_classes + 1, feature_dim + 1))
        reg_w = rng.normal(0.0, std_reg / feature_scale, size=(4 * num_classes, feature_dim + 1))
        cls_w[:, -1] = 0.0
        reg_w[:, -1] = 0.0
        return cls(cls_weights=cls_w, reg_weights=reg_w, feature_scale=feature_scale)

    def heads(self, conditioned: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Logits (n, K+1) and flat offsets (n, 4K) for conditioned features.

        Raises:
            DimensionMismatchError: If the feature width is not F
        """
        conditioned = np.atleast_2d(np.asarray(conditioned, dtype=np.float64))
        if conditioned.shape[1] != self.feature_dim:
            raise DimensionMismatchError(
                f"expected {self.feature_dim} features, got {conditioned.shape[1]}"
            )
        inputs = with_bias(conditioned)
        return inputs @ self.cls_weights.T, inputs @ self.reg_weights.T

    def predict_conditioned(self, conditioned: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        logits, flat = self.heads(conditioned)
        return softmax(logits), flat.reshape(-1, self.num_classes, 4)

    def predict_batch(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Condition raw (n, F) features and return (probs, offsets (n, K, 4))."""
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if features.shape[1] != self.feature_dim:
            raise DimensionMismatchError(
                f"expected {self.feature_dim} features, got {features.shape[1]}"
            )
        return self.predict_conditioned(normalize_features(features, self.feature_scale))

    def updated(self, cls_weights: np.ndarray, reg_weights: np.ndarray) -> "PredictorModel":
        return PredictorModel(cls_weights=cls_weights, reg_weights=reg_weights, feature_scale=self.feature_scale)

    def same_weights(self, other: "PredictorModel") -> bool:
        """Bit-exact equality of both heads."""
        return (
            self.feature_scale == other.feature_scale
            and np.array_equal(self.cls_weights, other.cls_weights)
            and np.array_equal(self.reg_weights, other.reg_weights)
        )


def predict(model: PredictorModel, features: np.ndarray) -> tuple[np.ndarray, list[RegressionTarget]]:
    """Score one conditioned feature vector.

    Args:
        model: Trained predictor
        features: Conditioned vector of length F

    Returns:
        Tuple of (class_probs of length K+1, K per-class offsets)

    Raises:
        DimensionMismatchError: If the vector length is not F
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise DimensionMismatchError(f"expected a single feature vector, got shape {features.shape}")
    probs, offsets = model.predict_conditioned(features)
    return probs[0], [RegressionTarget.from_array(row) for row in offsets[0]]


def describe(model: PredictorModel, name: Optional[str] = None) -> str:
    label = f"{name}: " if name else ""
    return f"{label}K={model.num_classes} F={model.feature_dim} scale={model.feature_scale:g}"
