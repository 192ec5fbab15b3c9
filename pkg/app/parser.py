"""File formats.

VOC XML annotations, unified detection files and their per-class devkit
export, proposal files, refinement traces, loss curves and predictor
checkpoints. VOC's 1-based inclusive pixel corners are converted to
continuous 0-based corners here and nowhere else: a box with bndbox
(xmin, ymin, xmax, ymax) covers (xmin - 1, ymin - 1) .. (xmax, ymax).
"""

import csv
import io
import json
import logging
import math
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from app.geometry import center_to_corners, corners_to_center
from app.models import AnnotatedObject, AnnotationRecord, DetectionRecord, ImageExtent, TraceRow
from app.predictor import CheckpointError, PredictorModel


logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "grl-predictor"
CHECKPOINT_VERSION = 1
DETECTION_FIELDS = 7
TRACE_HEADER = ["detection_id", "iteration", "class", "score", "l_x", "l_y", "l_w", "l_h"]


class ParserError(Exception):
    """Base exception for parser-related errors."""
    pass


class MalformedXMLError(ParserError):
    """Raised when an annotation is not well-formed XML."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        location = f" at line {line}, column {column}" if line is not None else ""
        super().__init__(f"malformed XML{location}: {message}")


class SchemaError(ParserError):
    """Raised when a required element is missing or holds an invalid value."""
    pass


class DegenerateBoxError(ParserError):
    """Raised when a box has no extent along an axis."""
    pass


class DetectionFormatError(ParserError):
    """Raised for a detection line that cannot be parsed."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class InvalidScoreError(DetectionFormatError):
    """Raised for a detection score outside [0, 1]."""
    pass


def read_text(file_path: Union[str, Path]) -> str:
    """Read a text file, falling back to latin-1 for legacy encodings.

    Raises:
        ParserError: If the file cannot be read
    """
    try:
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                return f.read()
        except UnicodeDecodeError:
            with open(file_path, "r", encoding="latin-1") as f:
                return f.read()
    except OSError as e:
        raise ParserError(f"Unable to read {file_path}: {e}") from e


def write_text(file_path: Union[str, Path], content: str) -> Path:
    """Write a text file, creating parent directories."""
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(content)
    return path


def format_number(value: float) -> str:
    """Fixed six decimals with trailing zeros removed."""
    text = f"{value:.6f}".rstrip("0").rstrip(".")
    return "0" if text == "-0" else text


def _finite(raw: str, what: str) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"schema error: {what} is not a number: {raw!r}") from e
    if not math.isfinite(value):
        raise SchemaError(f"schema error: {what} is not finite: {raw!r}")
    return value


# ============================================================================
# VOC XML annotations
# ============================================================================

def _required(element: ET.Element, path: str, name: Optional[str] = None) -> str:
    child = element.find(path)
    if child is None or child.text is None or not child.text.strip():
        raise SchemaError(f"schema error: {name or path}")
    return child.text.strip()


def _parse_object(element: ET.Element) -> AnnotatedObject:
    name = _required(element, "name")
    if element.find("bndbox") is None:
        raise SchemaError("schema error: bndbox")
    xmin, ymin, xmax, ymax = (
        _finite(_required(element, f"bndbox/{tag}", tag), tag)
        for tag in ("xmin", "ymin", "xmax", "ymax")
    )
    if xmin >= xmax or ymin >= ymax:
        raise DegenerateBoxError(f"degenerate box for object {name}: ({xmin}, {ymin}, {xmax}, {ymax})")

    difficult = False
    flag = element.find("difficult")
    if flag is not None and flag.text is not None and flag.text.strip():
        if flag.text.strip() not in ("0", "1"):
            raise SchemaError(f"schema error: difficult must be 0 or 1, got {flag.text.strip()!r}")
        difficult = flag.text.strip() == "1"

    return AnnotatedObject(name=name, corners=(xmin - 1.0, ymin - 1.0, xmax, ymax), difficult=difficult)


def parse_voc_xml(document: str) -> AnnotationRecord:
    """Parse a devkit `<annotation>` document.

    Args:
        document: XML text

    Returns:
        AnnotationRecord in continuous 0-based corners

    Raises:
        MalformedXMLError: If the text is not well-formed XML
        SchemaError: If a required element is missing or invalid
        DegenerateBoxError: If an object has xmin >= xmax or ymin >= ymax
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as e:
        line, column = getattr(e, "position", (None, None))
        raise MalformedXMLError(str(e), line, column) from e

    filename = _required(root, "filename")
    if root.find("size") is None:
        raise SchemaError("schema error: size")
    width = _finite(_required(root, "size/width", "width"), "width")
    height = _finite(_required(root, "size/height", "height"), "height")
    if width <= 0 or height <= 0:
        raise SchemaError(f"schema error: size must be positive, got {width}x{height}")

    objects = [_parse_object(element) for element in root.findall("object")]
    return AnnotationRecord(
        image_id=Path(filename).stem,
        extent=ImageExtent(width=width, height=height),
        objects=objects,
    )


def write_voc_xml(record: AnnotationRecord) -> str:
    """Serialize a record in the devkit layout (1-based corners)."""
    root = ET.Element("annotation")
    ET.SubElement(root, "folder").text = "GRL"
    ET.SubElement(root, "filename").text = f"{record.image_id}.jpg"
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = format_number(record.extent.width)
    ET.SubElement(size, "height").text = format_number(record.extent.height)
    ET.SubElement(size, "depth").text = "3"

    for obj in record.objects:
        element = ET.SubElement(root, "object")
        ET.SubElement(element, "name").text = obj.name
        ET.SubElement(element, "difficult").text = "1" if obj.difficult else "0"
        bndbox = ET.SubElement(element, "bndbox")
        xmin, ymin, xmax, ymax = obj.corners
        for tag, value in (("xmin", xmin + 1.0), ("ymin", ymin + 1.0), ("xmax", xmax), ("ymax", ymax)):
            ET.SubElement(bndbox, tag).text = format_number(value)

    ET.indent(root, space="  ")
    return ET.tostring(root, encoding="unicode") + "\n"


def read_voc_xml(file_path: Union[str, Path]) -> AnnotationRecord:
    return parse_voc_xml(read_text(file_path))


# ============================================================================
# Detection files
# ============================================================================

def write_detections(records: list[DetectionRecord]) -> str:
    """One `image_id class score xmin ymin xmax ymax` line per record."""
    lines = []
    for record in records:
        xmin, ymin, xmax, ymax = record.corners
        lines.append(
            f"{record.image_id} {record.class_name} {record.score:.6f} "
            f"{xmin:.6f} {ymin:.6f} {xmax:.6f} {ymax:.6f}"
        )
    return "".join(line + "\n" for line in lines)


def read_detections(text: str) -> list[DetectionRecord]:
    """Inverse of write_detections; blank lines are skipped.

    Raises:
        DetectionFormatError: For a line with the wrong field count or bad numbers
        InvalidScoreError: For a score outside [0, 1]
    """
    records = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != DETECTION_FIELDS:
            raise DetectionFormatError(line_number, f"expected {DETECTION_FIELDS} fields, got {len(fields)}")

        image_id, class_name = fields[0], fields[1]
        try:
            score, xmin, ymin, xmax, ymax = (float(value) for value in fields[2:])
        except ValueError as e:
            raise DetectionFormatError(line_number, f"not a number: {e}") from e

        if not (math.isfinite(score) and 0.0 <= score <= 1.0):
            raise InvalidScoreError(line_number, f"invalid score {fields[2]}")
        if not all(math.isfinite(v) for v in (xmin, ymin, xmax, ymax)):
            raise DetectionFormatError(line_number, "coordinates must be finite")
        if xmin >= xmax or ymin >= ymax:
            raise DetectionFormatError(line_number, "degenerate box")

        records.append(DetectionRecord(
            image_id=image_id,
            class_name=class_name,
            score=score,
            corners=(xmin, ymin, xmax, ymax),
        ))
    return records


def write_devkit_detections(
    records: list[DetectionRecord],
    output_dir: Union[str, Path],
    class_names: list[str],
    prefix: str = "comp4_det_test_"
) -> list[Path]:
    """Per-class devkit files: `image_id score xmin ymin xmax ymax`, 1-based corners."""
    paths = []
    for name in class_names:
        lines = []
        for record in records:
            if record.class_name != name:
                continue
            xmin, ymin, xmax, ymax = record.corners
            lines.append(
                f"{record.image_id} {record.score:.6f} "
                f"{xmin + 1.0:.6f} {ymin + 1.0:.6f} {xmax:.6f} {ymax:.6f}\n"
            )
        paths.append(write_text(Path(output_dir) / f"{prefix}{name}.txt", "".join(lines)))
    return paths


# ============================================================================
# Proposal files
# ============================================================================

def write_proposals(boxes: np.ndarray) -> str:
    """Center-form (n, 4) boxes as `xmin ymin xmax ymax` lines."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return "".join(
        " ".join(f"{v:.6f}" for v in row) + "\n"
        for row in center_to_corners(boxes)
    )


def read_proposals(text: str) -> np.ndarray:
    """Parse a proposal file into center-form (n, 4) boxes.

    Raises:
        DetectionFormatError: For malformed or degenerate lines
    """
    rows = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 4:
            raise DetectionFormatError(line_number, f"expected 4 fields, got {len(fields)}")
        try:
            corners = [float(value) for value in fields]
        except ValueError as e:
            raise DetectionFormatError(line_number, f"not a number: {e}") from e
        if not all(math.isfinite(v) for v in corners):
            raise DetectionFormatError(line_number, "coordinates must be finite")
        if corners[0] >= corners[2] or corners[1] >= corners[3]:
            raise DetectionFormatError(line_number, "degenerate box")
        rows.append(corners)

    if not rows:
        return np.zeros((0, 4))
    return corners_to_center(np.array(rows))


# ============================================================================
# Traces and loss curves
# ============================================================================

def write_trace(rows: list[TraceRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for row in rows:
        writer.writerow([
            row.detection_id, row.iteration, row.class_name, f"{row.score:.6f}",
            f"{row.box.l_x:.6f}", f"{row.box.l_y:.6f}", f"{row.box.l_w:.6f}", f"{row.box.l_h:.6f}",
        ])
    return buffer.getvalue()


def write_loss_curve(curve: list[float]) -> str:
    """`step,loss` CSV with 1-based steps."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["step", "loss"])
    for step, loss in enumerate(curve, start=1):
        writer.writerow([step, repr(float(loss))])
    return buffer.getvalue()


def read_loss_curve(text: str) -> list[float]:
    reader = csv.DictReader(io.StringIO(text))
    try:
        return [float(row["loss"]) for row in reader]
    except (KeyError, TypeError, ValueError) as e:
        raise ParserError(f"malformed loss curve: {e}") from e


# ============================================================================
# Checkpoints
# ============================================================================

class Checkpoint(BaseModel):
    """Versioned header followed by row-major weight matrices."""

    format: Literal["grl-predictor"] = Field(CHECKPOINT_FORMAT, description="File type tag")
    version: int = Field(CHECKPOINT_VERSION, description="Layout version")
    num_classes: int = Field(..., ge=1, description="Foreground classes K")
    feature_dim: int = Field(..., ge=1, description="Raw feature dimension F")
    unroll_depth: int = Field(..., ge=1, description="T used in training")
    feature_scale: float = Field(..., gt=0, description="Feature conditioning norm")
    cls_weights: list[list[float]] = Field(..., description="(K+1) x (F+1), bias last")
    reg_weights: list[list[float]] = Field(..., description="4K x (F+1), bias last")


def dump_checkpoint(model: PredictorModel, unroll_depth: int) -> str:
    checkpoint = Checkpoint(
        num_classes=model.num_classes,
        feature_dim=model.feature_dim,
        unroll_depth=unroll_depth,
        feature_scale=model.feature_scale,
        cls_weights=model.cls_weights.tolist(),
        reg_weights=model.reg_weights.tolist(),
    )
    return checkpoint.model_dump_json(indent=1) + "\n"


def load_checkpoint_text(text: str) -> tuple[PredictorModel, Checkpoint]:
    """Validate a checkpoint document and rebuild the model.

    Raises:
        CheckpointError: For unreadable JSON, a foreign format or version, or
                         weights inconsistent with the header
    """
    try:
        checkpoint = Checkpoint.model_validate(json.loads(text))
    except (json.JSONDecodeError, ValidationError) as e:
        raise CheckpointError(f"invalid checkpoint: {e}") from e

    if checkpoint.version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {checkpoint.version}")

    try:
        model = PredictorModel(
            cls_weights=np.array(checkpoint.cls_weights),
            reg_weights=np.array(checkpoint.reg_weights),
            feature_scale=checkpoint.feature_scale,
        )
    except (ValidationError, ValueError) as e:
        raise CheckpointError(f"invalid checkpoint weights: {e}") from e

    if (model.num_classes, model.feature_dim) != (checkpoint.num_classes, checkpoint.feature_dim):
        raise CheckpointError(
            f"header says K={checkpoint.num_classes} F={checkpoint.feature_dim}, "
            f"weights have K={model.num_classes} F={model.feature_dim}"
        )
    return model, checkpoint


def save_checkpoint(model: PredictorModel, file_path: Union[str, Path], unroll_depth: int) -> Path:
    try:
        path = write_text(file_path, dump_checkpoint(model, unroll_depth))
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {file_path}: {e}") from e
    logger.info("Saved checkpoint to %s", path)
    return path


def load_checkpoint(file_path: Union[str, Path]) -> tuple[PredictorModel, Checkpoint]:
    try:
        text = read_text(file_path)
    except ParserError as e:
        raise CheckpointError(str(e)) from e
    return load_checkpoint_text(text)
