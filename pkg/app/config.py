"""Run configuration.

Four sections (synth, train, refine, eval) validated by pydantic. Documents
are TOML, so a flat `refine.iterations = 1` line and a `[refine]` table are
equivalent. Unknown keys and type mismatches are rejected with a ConfigError
naming the dotted key; nothing is coerced silently.
"""

import logging
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - Python 3.10 fallback (API-identical backport)
    import tomli as tomllib
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


logger = logging.getLogger(__name__)

# Shared model configuration: strict types, unknown keys rejected
_STRICT = ConfigDict(strict=True, extra="forbid", validate_default=True)


class ConfigError(Exception):
    """Raised for unreadable, unknown or invalid configuration keys."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class SynthConfig(BaseModel):
    """Synthetic benchmark generation parameters."""

    model_config = _STRICT

    num_classes: int = Field(4, ge=1, description="Number of object classes K")
    class_names: Optional[list[str]] = Field(None, description="Names of classes 1..K; generated when omitted")
    train_scenes: int = Field(200, ge=1, description="Scenes in the training split")
    test_scenes: int = Field(50, ge=1, description="Scenes in the held-out split")
    image_width: float = Field(320.0, gt=0, description="Scene width in pixels")
    image_height: float = Field(240.0, gt=0, description="Scene height in pixels")
    min_objects: int = Field(1, ge=1, description="Fewest objects per scene")
    max_objects: int = Field(4, ge=1, description="Most objects per scene")
    min_object_size: float = Field(24.0, gt=0, description="Smallest object side in pixels")
    max_object_size: float = Field(120.0, gt=0, description="Largest object side in pixels")
    max_same_class_iou: float = Field(0.3, gt=0, lt=1, description="Placement rejection bound between same-class objects")
    placement_retries: int = Field(100, ge=1, description="Attempts per object before giving up")
    proposals_per_object: int = Field(8, ge=1, description="Jittered proposals sampled around each object")
    center_jitter: float = Field(0.15, ge=0, description="Center jitter as a fraction of object size")
    log_size_sigma: float = Field(0.15, ge=0, description="Std of the log-size jitter")
    feature_dim: int = Field(16, ge=1, description="Raw feature dimension F")
    feature_noise_sigma: float = Field(0.05, ge=0, description="Std of additive feature noise")
    feature_radius: float = Field(2.5, gt=0, description="L2 radius the clean feature is padded to")
    seed: int = Field(0, ge=0, description="Root seed")

    @model_validator(mode="after")
    def _check_ranges(self) -> "SynthConfig":
        if self.max_objects < self.min_objects:
            raise ValueError("max_objects must be >= min_objects")
        if self.max_object_size < self.min_object_size:
            raise ValueError("max_object_size must be >= min_object_size")
        if self.max_object_size > min(self.image_width, self.image_height):
            raise ValueError("max_object_size must fit inside the image")
        if self.feature_dim < self.num_classes + 10:
            raise ValueError(f"feature_dim must be at least num_classes + 10 = {self.num_classes + 10}")
        if self.class_names is not None:
            if len(self.class_names) != self.num_classes:
                raise ValueError("class_names must list exactly num_classes names")
            if len(set(self.class_names)) != len(self.class_names) or not all(self.class_names):
                raise ValueError("class_names must be unique and non-empty")
        return self

    @property
    def names(self) -> list[str]:
        if self.class_names is not None:
            return list(self.class_names)
        return [f"class{k}" for k in range(1, self.num_classes + 1)]


class TrainConfig(BaseModel):
    """SGD schedule and target assignment for the unrolled predictor."""

    model_config = _STRICT

    learning_rate: float = Field(0.01, ge=0, description="Base learning rate")
    lr_decay_factor: float = Field(0.1, gt=0, description="Multiplier applied at decay_step")
    decay_step: int = Field(1200, ge=1, description="Step at which the rate is decayed")
    iterations: int = Field(2000, ge=1, description="Number of SGD steps")
    batch_size: int = Field(32, ge=1, description="Sampled proposals per step")
    seed: int = Field(0, ge=0, description="Seed for batch sampling, augmentation and feature noise")
    unroll_depth: int = Field(2, ge=1, description="Refinement iterations T unrolled during training")
    pool_during_training: bool = Field(True, description="Apply group pooling between unrolled iterations")
    positive_iou: float = Field(0.5, gt=0, le=1, description="IoU needed to take a ground-truth label")
    background_iou_lo: float = Field(0.1, ge=0, le=1, description="Lower bound of the background IoU range")
    background_iou_hi: float = Field(0.5, ge=0, le=1, description="Upper bound (exclusive) of the background IoU range")
    flip_augment: bool = Field(False, description="Mirror scenes with probability 0.5")
    feature_scale: float = Field(1000.0, gt=0, description="Norm of conditioned features")
    weight_lr_mult: float = Field(1e-4, ge=0, description="Learning-rate multiplier for weight columns")
    bias_lr_mult: float = Field(2.0, ge=0, description="Learning-rate multiplier for the bias column")
    init_std_cls: float = Field(0.01, ge=0, description="Init std of the classification head on unit-scale inputs")
    init_std_reg: float = Field(0.001, ge=0, description="Init std of the regression head on unit-scale inputs")
    cls_weight: float = Field(1.0, ge=0, description="Weight of the classification term")
    loc_weight: float = Field(1.0, ge=0, description="Weight of the localization term")
    log_every: int = Field(200, ge=1, description="Steps between progress log lines")

    @model_validator(mode="after")
    def _check_ranges(self) -> "TrainConfig":
        if self.background_iou_lo >= self.background_iou_hi:
            raise ValueError("background_iou_lo must be < background_iou_hi")
        if self.background_iou_hi > self.positive_iou:
            raise ValueError("background range must end at or below positive_iou")
        return self


class RefinementConfig(BaseModel):
    """Test-time refinement and post-processing."""

    model_config = _STRICT

    iterations: int = Field(2, ge=1, description="Refinement iterations T")
    group_iou_threshold: float = Field(0.7, gt=0, lt=1, description="Strict IoU bound for group membership")
    pool_during_refinement: bool = Field(True, description="Apply group confidence pooling")
    pool_neighbors: Literal["regressed", "previous"] = Field(
        "regressed",
        description="Neighbor boxes pooled: this iteration's regressed boxes or the previous iteration's"
    )
    clip_to_image: bool = Field(True, description="Clip refined boxes to the image")
    nms_iou_threshold: float = Field(0.45, gt=0, lt=1, description="Per-class NMS threshold")
    score_threshold: float = Field(0.05, ge=0, le=1, description="Minimum score of written detections")


class EvalConfig(BaseModel):
    """Evaluation protocol."""

    model_config = _STRICT

    iou_threshold: float = Field(0.5, gt=0, le=1, description="Matching threshold for true positives")
    mode: Literal["11point", "area"] = Field("area", description="AP summarization")
    background_iou: float = Field(0.1, gt=0, lt=1, description="Below this overlap a false positive is BG")


class RunConfig(BaseModel):
    """All sections of a run."""

    # Sections validate strictly themselves; the container only rejects unknown sections
    model_config = ConfigDict(extra="forbid")

    synth: SynthConfig = Field(default_factory=SynthConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    refine: RefinementConfig = Field(default_factory=RefinementConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


# ============================================================================
# Loading
# ============================================================================

def _validation_to_config_error(error: ValidationError) -> ConfigError:
    first = error.errors()[0]
    key = ".".join(str(part) for part in first["loc"])
    if first["type"] == "extra_forbidden":
        return ConfigError(key, "unknown key")
    return ConfigError(key, first["msg"])


def parse_override_value(raw: str) -> Any:
    """Interpret a command-line value as a TOML scalar, falling back to a string."""
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(document: dict, overrides: dict[str, Any]) -> dict:
    """Merge dotted-key overrides into a parsed document (overrides win)."""
    merged = {section: dict(values) if isinstance(values, dict) else values for section, values in document.items()}
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        if len(parts) != 2 or not all(parts):
            raise ConfigError(dotted, "overrides must have the form section.key")
        section, key = parts
        target = merged.setdefault(section, {})
        if not isinstance(target, dict):
            raise ConfigError(section, "not a section")
        target[key] = value
    return merged


def config_from_dict(document: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise _validation_to_config_error(e) from e


def load_config(text: str, overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """Parse and validate a TOML configuration document.

    Args:
        text: TOML text; an empty document yields pure defaults
        overrides: Optional dotted-key values applied on top of the document

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: For malformed TOML, unknown keys or invalid values
    """
    try:
        document = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("", f"malformed config: {e}") from e

    if overrides:
        document = apply_overrides(document, overrides)
    return config_from_dict(document)


def load_config_file(path: Optional[Union[str, Path]], overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """Load a config file (or defaults when path is None) and apply overrides."""
    if path is None:
        return load_config("", overrides)

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError("", f"cannot read config {path}: {e}") from e

    logger.info("Loaded configuration from %s", path)
    return load_config(text, overrides)
