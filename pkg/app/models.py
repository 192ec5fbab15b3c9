"""
Pydantic data models for group recursive detection refinement.

This module defines the value types shared across the engine: boxes and
regression offsets, the evolving per-proposal detection state, synthetic
scenes, loss breakdowns, evaluation reports and the file-level records read
and written by the parser. Geometry uses the center parameterization
(l_x, l_y, l_w, l_h); corner form (xmin, ymin, xmax, ymax) only appears on
records that mirror file formats.
"""

import math
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


BACKGROUND = 0
BACKGROUND_NAME = "__background__"

# Tolerance used when validating probability vectors
PROB_SUM_TOLERANCE = 1e-6

Corners = tuple[float, float, float, float]


class BBox(BaseModel):
    """Center-parameterized axis-aligned box in pixel coordinates."""

    model_config = ConfigDict(frozen=True)

    l_x: float = Field(..., allow_inf_nan=False, description="Center abscissa in pixels")
    l_y: float = Field(..., allow_inf_nan=False, description="Center ordinate in pixels")
    l_w: float = Field(..., gt=0, allow_inf_nan=False, description="Width in pixels")
    l_h: float = Field(..., gt=0, allow_inf_nan=False, description="Height in pixels")

    @classmethod
    def from_corners(cls, xmin: float, ymin: float, xmax: float, ymax: float) -> "BBox":
        """Build a box from continuous corner coordinates."""
        return cls(
            l_x=(xmin + xmax) / 2.0,
            l_y=(ymin + ymax) / 2.0,
            l_w=xmax - xmin,
            l_h=ymax - ymin,
        )

    @classmethod
    def from_array(cls, values) -> "BBox":
        return cls(l_x=float(values[0]), l_y=float(values[1]), l_w=float(values[2]), l_h=float(values[3]))

    def to_corners(self) -> Corners:
        half_w = self.l_w / 2.0
        half_h = self.l_h / 2.0
        return (self.l_x - half_w, self.l_y - half_h, self.l_x + half_w, self.l_y + half_h)

    def as_array(self) -> np.ndarray:
        return np.array([self.l_x, self.l_y, self.l_w, self.l_h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.l_w * self.l_h


class RegressionTarget(BaseModel):
    """Offsets (r_x, r_y, r_w, r_h) mapping one box onto another."""

    model_config = ConfigDict(frozen=True)

    r_x: float = Field(..., allow_inf_nan=False, description="Scale-invariant horizontal translation")
    r_y: float = Field(..., allow_inf_nan=False, description="Scale-invariant vertical translation")
    r_w: float = Field(..., allow_inf_nan=False, description="Log-space width shift")
    r_h: float = Field(..., allow_inf_nan=False, description="Log-space height shift")

    @classmethod
    def zero(cls) -> "RegressionTarget":
        return cls(r_x=0.0, r_y=0.0, r_w=0.0, r_h=0.0)

    @classmethod
    def from_array(cls, values) -> "RegressionTarget":
        return cls(r_x=float(values[0]), r_y=float(values[1]), r_w=float(values[2]), r_h=float(values[3]))

    def as_array(self) -> np.ndarray:
        return np.array([self.r_x, self.r_y, self.r_w, self.r_h], dtype=np.float64)


class ImageExtent(BaseModel):
    """Image size in pixels."""

    model_config = ConfigDict(frozen=True)

    width: float = Field(..., gt=0, allow_inf_nan=False, description="Image width in pixels")
    height: float = Field(..., gt=0, allow_inf_nan=False, description="Image height in pixels")


class GroupMember(BaseModel):
    """One member of a same-class overlapping group."""

    model_config = ConfigDict(frozen=True)

    box: BBox = Field(..., description="Member location used for pooling")
    score: float = Field(..., gt=0, le=1, allow_inf_nan=False, description="Confidence weight")
    index: int = Field(..., ge=0, description="Position of the source detection")


class DetectionState(BaseModel):
    """Evolving record of one proposal across refinement iterations."""

    model_config = ConfigDict(frozen=True)

    box: BBox = Field(..., description="Current location")
    proposal: BBox = Field(..., description="Location before the first iteration")
    class_probs: list[float] = Field(..., min_length=2, description="Distribution over K+1 classes")
    predicted_class: int = Field(..., ge=0, description="Argmax class, 0 is background")
    score: float = Field(..., ge=0, le=1, description="Probability of the predicted class")
    trajectory: list[BBox] = Field(default_factory=list, description="Box after each iteration")
    class_history: list[int] = Field(default_factory=list, description="Predicted class after each iteration")
    score_history: list[float] = Field(default_factory=list, description="Score after each iteration")

    @model_validator(mode="after")
    def _check_distribution(self) -> "DetectionState":
        probs = self.class_probs
        if any((not math.isfinite(p)) or p < 0 for p in probs):
            raise ValueError("class_probs entries must be finite and non-negative")
        if abs(sum(probs) - 1.0) > PROB_SUM_TOLERANCE:
            raise ValueError("class_probs must sum to 1")
        if self.predicted_class >= len(probs):
            raise ValueError("predicted_class outside the class range")
        if self.predicted_class != int(np.argmax(probs)):
            raise ValueError("predicted_class must be the argmax of class_probs")
        if self.score != probs[self.predicted_class]:
            raise ValueError("score must equal the predicted class probability")
        if not (len(self.trajectory) == len(self.class_history) == len(self.score_history)):
            raise ValueError("trajectory and histories must have equal length")
        return self

    @classmethod
    def initial(cls, proposal: BBox, num_classes: int) -> "DetectionState":
        """State of a proposal that has not been scored yet (all mass on background)."""
        probs = [0.0] * (num_classes + 1)
        probs[BACKGROUND] = 1.0
        return cls(
            box=proposal,
            proposal=proposal,
            class_probs=probs,
            predicted_class=BACKGROUND,
            score=1.0,
        )

    @property
    def num_classes(self) -> int:
        return len(self.class_probs) - 1

    @property
    def is_background(self) -> bool:
        return self.predicted_class == BACKGROUND


class SceneObject(BaseModel):
    """One ground-truth object of a scene."""

    model_config = ConfigDict(frozen=True)

    class_id: int = Field(..., ge=1, description="Object class in 1..K")
    box: BBox = Field(..., description="Ground-truth location")
    difficult: bool = Field(False, description="Excluded from recall when set")


class Scene(BaseModel):
    """Ground truth of one image: extent plus labeled objects."""

    model_config = ConfigDict(frozen=True)

    scene_id: str = Field(..., min_length=1, description="Stable identifier")
    extent: ImageExtent = Field(..., description="Image size")
    objects: list[SceneObject] = Field(default_factory=list, description="Labeled objects")

    @model_validator(mode="after")
    def _check_inside(self) -> "Scene":
        # Allow for rounding introduced by the text formats
        tol = 1e-6
        for obj in self.objects:
            xmin, ymin, xmax, ymax = obj.box.to_corners()
            if xmin < -tol or ymin < -tol or xmax > self.extent.width + tol or ymax > self.extent.height + tol:
                raise ValueError(f"object outside the extent of scene {self.scene_id}")
        return self

    def gt_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ground-truth boxes as an (m, 4) array and classes as an (m,) array."""
        if not self.objects:
            return np.zeros((0, 4)), np.zeros((0,), dtype=np.int64)
        boxes = np.stack([obj.box.as_array() for obj in self.objects])
        classes = np.array([obj.class_id for obj in self.objects], dtype=np.int64)
        return boxes, classes


class LossBreakdown(BaseModel):
    """Classification and localization loss, optionally split per iteration."""

    cls: float = Field(..., ge=0, allow_inf_nan=False, description="Classification loss")
    loc: float = Field(..., ge=0, allow_inf_nan=False, description="Localization loss")
    total: float = Field(..., ge=0, allow_inf_nan=False, description="Combined loss")
    per_iteration: list[tuple[float, float]] = Field(
        default_factory=list,
        description="(cls, loc) per unrolled iteration"
    )

    @model_validator(mode="after")
    def _check_total(self) -> "LossBreakdown":
        if self.per_iteration:
            expected = sum(c + l for c, l in self.per_iteration)
            if not math.isclose(self.total, expected, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError("total must equal the sum of per-iteration losses")
        return self


class APMode(str, Enum):
    """Precision-recall summarization used for AP."""

    ELEVEN_POINT = "11point"
    AREA = "area"


class FalsePositiveCounts(BaseModel):
    """Top-ranked detections binned by error type."""

    Cor: int = Field(0, ge=0, description="Correct detections")
    Loc: int = Field(0, ge=0, description="Poor localization or duplicate")
    Oth: int = Field(0, ge=0, description="Confusion with another class")
    BG: int = Field(0, ge=0, description="Confusion with background")

    @property
    def total(self) -> int:
        return self.Cor + self.Loc + self.Oth + self.BG


class EvalReport(BaseModel):
    """Per-class AP, mAP and false-positive diagnosis."""

    per_class_ap: dict[str, float] = Field(..., description="AP of every evaluable class")
    map: float = Field(..., ge=0, le=1, description="Mean AP over evaluable classes")
    mode: APMode = Field(..., description="AP summarization mode")
    iou_threshold: float = Field(..., gt=0, le=1, description="Matching threshold")
    undefined_classes: list[str] = Field(default_factory=list, description="Classes without ground truth")
    fp_taxonomy: dict[str, FalsePositiveCounts] = Field(default_factory=dict, description="Diagnosis per class")

    @field_validator("per_class_ap")
    @classmethod
    def _check_ap_range(cls, value: dict[str, float]) -> dict[str, float]:
        for name, ap in value.items():
            if not 0.0 <= ap <= 1.0:
                raise ValueError(f"AP of {name} outside [0, 1]")
        return value

    @model_validator(mode="after")
    def _check_mean(self) -> "EvalReport":
        if self.per_class_ap:
            expected = sum(self.per_class_ap.values()) / len(self.per_class_ap)
            if not math.isclose(self.map, expected, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError("map must be the mean of per_class_ap")
        return self


class AnnotatedObject(BaseModel):
    """Object element of a VOC annotation, in continuous 0-based corners."""

    model_config = ConfigDict(frozen=True)

    name: str = Field(..., min_length=1, description="Class name")
    corners: Corners = Field(..., description="(xmin, ymin, xmax, ymax)")
    difficult: bool = Field(False, description="VOC difficult flag")

    @field_validator("corners")
    @classmethod
    def _check_corners(cls, value: Corners) -> Corners:
        xmin, ymin, xmax, ymax = value
        if not all(math.isfinite(v) for v in value):
            raise ValueError("corners must be finite")
        if xmin >= xmax or ymin >= ymax:
            raise ValueError("degenerate box")
        return value

    def to_bbox(self) -> BBox:
        return BBox.from_corners(*self.corners)


class AnnotationRecord(BaseModel):
    """Parsed VOC annotation document."""

    model_config = ConfigDict(frozen=True)

    image_id: str = Field(..., min_length=1, description="Image identifier (filename stem)")
    extent: ImageExtent = Field(..., description="Image size")
    objects: list[AnnotatedObject] = Field(default_factory=list, description="Annotated objects")


class DetectionRecord(BaseModel):
    """One line of a detection result file."""

    model_config = ConfigDict(frozen=True)

    image_id: str = Field(..., min_length=1, description="Image identifier")
    class_name: str = Field(..., min_length=1, description="Detected class name")
    score: float = Field(..., ge=0, le=1, allow_inf_nan=False, description="Detection confidence")
    corners: Corners = Field(..., description="(xmin, ymin, xmax, ymax)")

    @field_validator("corners")
    @classmethod
    def _check_corners(cls, value: Corners) -> Corners:
        xmin, ymin, xmax, ymax = value
        if not all(math.isfinite(v) for v in value):
            raise ValueError("corners must be finite")
        if xmin >= xmax or ymin >= ymax:
            raise ValueError("degenerate box")
        return value

    def to_bbox(self) -> BBox:
        return BBox.from_corners(*self.corners)


class CommandOutcome(BaseModel):
    """Result of one CLI command."""

    exit_code: int = Field(..., description="0 success, 1 validation error, 2 runtime failure")
    summary: str = Field(..., description="Human-readable summary or diagnostic")
    artifacts: list[str] = Field(default_factory=list, description="Paths written by the command")

    @field_validator("exit_code")
    @classmethod
    def _check_exit_code(cls, value: int) -> int:
        if value not in (0, 1, 2):
            raise ValueError("exit_code must be 0, 1 or 2")
        return value

    @property
    def ok(self) -> bool:
        return self.exit_code == 0


class TraceRow(BaseModel):
    """One (detection, iteration) entry of a refinement trace."""

    model_config = ConfigDict(frozen=True)

    detection_id: str
    iteration: int = Field(..., ge=1)
    class_name: str
    score: float
    box: BBox


def class_name_for(class_id: int, class_names: list[str]) -> str:
    """Map a class index (0 = background) to its name."""
    if class_id == BACKGROUND:
        return BACKGROUND_NAME
    return class_names[class_id - 1]
