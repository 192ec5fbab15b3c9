"""PASCAL-style detection scoring and false-positive diagnosis.

Detections of one class are ranked by descending score (equal scores keep
their input order) and matched greedily: a detection is a true positive when
the best-overlapping still unmatched ground truth of its image reaches the
IoU threshold, and that ground truth is then consumed. Detections whose match
is a difficult object are ignored, and difficult objects do not count toward
recall.
"""

import json
import logging
from collections import defaultdict
from typing import Mapping, Optional, Union

import numpy as np

from app.geometry import boxes_to_array, pairwise_iou
from app.models import AnnotatedObject, AnnotationRecord, APMode, DetectionRecord, EvalReport, FalsePositiveCounts


logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLD = 0.5
DEFAULT_BACKGROUND_IOU = 0.1

# Outcome of a ranked detection
TRUE_POSITIVE = "tp"
FALSE_POSITIVE = "fp"
IGNORED = "ignored"


class EvaluationError(Exception):
    """Base exception for evaluation errors."""
    pass


class UndefinedAPError(EvaluationError):
    """Raised when a class has no ground truth to recall."""
    pass


class NoEvaluableClassesError(EvaluationError):
    """Raised when every class has an undefined AP."""
    pass


# Per-image ground truth of one class: image_id -> objects
GroundTruths = Mapping[str, list[AnnotatedObject]]


# ============================================================================
# Matching
# ============================================================================

def rank(detections: list[DetectionRecord]) -> list[DetectionRecord]:
    """Descending score, stable for ties."""
    order = np.argsort(-np.array([d.score for d in detections], dtype=np.float64), kind="stable")
    return [detections[i] for i in order]


def count_positives(ground_truths: GroundTruths) -> int:
    return sum(1 for objects in ground_truths.values() for obj in objects if not obj.difficult)


def match_detections(
    detections: list[DetectionRecord],
    ground_truths: GroundTruths,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
) -> list[str]:
    """Outcome of every detection, in ranked order.

    Args:
        detections: Detections of a single class, any order
        ground_truths: Objects of the same class per image
        iou_threshold: Minimum IoU of a true positive

    Returns:
        One of TRUE_POSITIVE, FALSE_POSITIVE or IGNORED per ranked detection
    """
    gt_boxes = {
        image_id: boxes_to_array([obj.to_bbox() for obj in objects])
        for image_id, objects in ground_truths.items() if objects
    }
    matched = {image_id: np.zeros(len(boxes), dtype=bool) for image_id, boxes in gt_boxes.items()}

    outcomes = []
    for detection in rank(detections):
        boxes = gt_boxes.get(detection.image_id)
        if boxes is None:
            outcomes.append(FALSE_POSITIVE)
            continue

        overlaps = pairwise_iou(detection.to_bbox().as_array()[None, :], boxes)[0]
        overlaps[matched[detection.image_id]] = -1.0
        best = int(np.argmax(overlaps))
        if overlaps[best] < iou_threshold:
            outcomes.append(FALSE_POSITIVE)
        elif ground_truths[detection.image_id][best].difficult:
            outcomes.append(IGNORED)
        else:
            matched[detection.image_id][best] = True
            outcomes.append(TRUE_POSITIVE)
    return outcomes


def precision_recall(outcomes: list[str], num_positives: int) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each counted detection."""
    counted = [outcome for outcome in outcomes if outcome != IGNORED]
    tp = np.cumsum([outcome == TRUE_POSITIVE for outcome in counted], dtype=np.float64)
    fp = np.cumsum([outcome == FALSE_POSITIVE for outcome in counted], dtype=np.float64)
    recall = tp / num_positives
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return recall, precision


def summarize(recall: np.ndarray, precision: np.ndarray, mode: APMode) -> float:
    """Reduce a precision-recall curve to AP."""
    if mode == APMode.ELEVEN_POINT:
        total = 0.0
        for i in range(11):
            threshold = i / 10
            reached = precision[recall >= threshold]
            total += reached.max() if reached.size else 0.0
        return total / 11.0

    # Area under the monotone precision envelope
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(
    detections: list[DetectionRecord],
    ground_truths: GroundTruths,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    mode: Union[APMode, str] = APMode.AREA
) -> float:
    """AP of one class.

    Args:
        detections: Detections of the class
        ground_truths: Objects of the class per image
        iou_threshold: Matching threshold
        mode: "11point" or "area"

    Returns:
        AP in [0, 1]

    Raises:
        UndefinedAPError: If there is no non-difficult ground truth
    """
    num_positives = count_positives(ground_truths)
    if num_positives == 0:
        raise UndefinedAPError("undefined AP: no ground truth")
    if not detections:
        return 0.0

    outcomes = match_detections(detections, ground_truths, iou_threshold)
    recall, precision = precision_recall(outcomes, num_positives)
    if recall.size == 0:
        return 0.0
    return min(1.0, summarize(recall, precision, APMode(mode)))


def precision_recall_points(
    detections: list[DetectionRecord],
    ground_truths: GroundTruths,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
) -> list[tuple[float, float]]:
    """Raw (recall, precision) points for external plotting."""
    num_positives = count_positives(ground_truths)
    if num_positives == 0:
        raise UndefinedAPError("undefined AP: no ground truth")
    recall, precision = precision_recall(match_detections(detections, ground_truths, iou_threshold), num_positives)
    return [(float(r), float(p)) for r, p in zip(recall, precision)]


def mean_ap(per_class: Mapping[str, Optional[float]]) -> float:
    """Mean over classes with a defined AP (None marks an undefined one).

    Raises:
        NoEvaluableClassesError: If no class has a defined AP
    """
    defined = [ap for ap in per_class.values() if ap is not None]
    if not defined:
        raise NoEvaluableClassesError("no evaluable classes")
    return sum(defined) / len(defined)


# ============================================================================
# Grouping helpers
# ============================================================================

def objects_by_class(annotations: list[AnnotationRecord]) -> dict[str, dict[str, list[AnnotatedObject]]]:
    """class name -> image id -> objects."""
    index: dict[str, dict[str, list[AnnotatedObject]]] = defaultdict(lambda: defaultdict(list))
    for record in annotations:
        for obj in record.objects:
            index[obj.name][record.image_id].append(obj)
    return {name: dict(images) for name, images in index.items()}


def detections_by_class(detections: list[DetectionRecord]) -> dict[str, list[DetectionRecord]]:
    index: dict[str, list[DetectionRecord]] = defaultdict(list)
    for detection in detections:
        index[detection.class_name].append(detection)
    return dict(index)


def _class_names(
    annotations: list[AnnotationRecord],
    detections: list[DetectionRecord],
    class_names: Optional[list[str]]
) -> list[str]:
    if class_names is not None:
        return list(class_names)
    names = {obj.name for record in annotations for obj in record.objects}
    names.update(d.class_name for d in detections)
    return sorted(names)


# ============================================================================
# False-positive diagnosis
# ============================================================================

def classify_ranked(
    detections: list[DetectionRecord],
    annotations: list[AnnotationRecord],
    class_name: str,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    background_iou: float = DEFAULT_BACKGROUND_IOU
) -> list[str]:
    """Error bin ("Cor", "Loc", "Oth" or "BG") of each ranked detection of a class.

    Hits on difficult objects are neither correct nor errors and get no bin.
    """
    own = [d for d in detections if d.class_name == class_name]
    gt_index = objects_by_class(annotations).get(class_name, {})
    outcomes = match_detections(own, gt_index, iou_threshold)
    records = {record.image_id: record for record in annotations}

    bins = []
    for detection, outcome in zip(rank(own), outcomes):
        if outcome == IGNORED:
            continue
        if outcome == TRUE_POSITIVE:
            bins.append("Cor")
            continue

        record = records.get(detection.image_id)
        objects = record.objects if record is not None else []
        if not objects:
            bins.append("BG")
            continue

        overlaps = pairwise_iou(
            detection.to_bbox().as_array()[None, :],
            boxes_to_array([obj.to_bbox() for obj in objects]),
        )[0]
        same = np.array([obj.name == class_name for obj in objects])
        if (overlaps[same] >= background_iou).any():
            bins.append("Loc")
        elif (overlaps[~same] >= background_iou).any():
            bins.append("Oth")
        else:
            bins.append("BG")
    return bins


def diagnose_false_positives(
    detections: list[DetectionRecord],
    annotations: list[AnnotationRecord],
    top_n_per_class: Optional[Mapping[str, int]] = None,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    background_iou: float = DEFAULT_BACKGROUND_IOU,
    class_names: Optional[list[str]] = None
) -> dict[str, FalsePositiveCounts]:
    """Bin the top-ranked detections of every class by error type.

    Args:
        detections: Detections of all classes
        annotations: Ground truth of all images
        top_n_per_class: Detections considered per class; defaults to the
                         number of non-difficult objects of the class
        iou_threshold: Threshold separating Cor from Loc
        background_iou: Overlap below which a detection is BG
        class_names: Classes to diagnose; inferred when omitted

    Returns:
        Counts per class
    """
    gt_index = objects_by_class(annotations)
    taxonomy = {}
    for name in _class_names(annotations, detections, class_names):
        if top_n_per_class is not None and name in top_n_per_class:
            top_n = top_n_per_class[name]
        else:
            top_n = count_positives(gt_index.get(name, {}))
        bins = classify_ranked(detections, annotations, name, iou_threshold, background_iou)[:top_n]
        taxonomy[name] = FalsePositiveCounts(**{key: bins.count(key) for key in ("Cor", "Loc", "Oth", "BG")})
    return taxonomy


def false_positive_trend(
    detections: list[DetectionRecord],
    annotations: list[AnnotationRecord],
    class_name: str,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    background_iou: float = DEFAULT_BACKGROUND_IOU
) -> list[FalsePositiveCounts]:
    """Cumulative bins over the top 1, 2, ... ranked detections of a class."""
    trend = []
    counts = {"Cor": 0, "Loc": 0, "Oth": 0, "BG": 0}
    for label in classify_ranked(detections, annotations, class_name, iou_threshold, background_iou):
        counts[label] += 1
        trend.append(FalsePositiveCounts(**counts))
    return trend


# ============================================================================
# Full evaluation and reporting
# ============================================================================

def evaluate(
    detections: list[DetectionRecord],
    annotations: list[AnnotationRecord],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    mode: Union[APMode, str] = APMode.AREA,
    background_iou: float = DEFAULT_BACKGROUND_IOU,
    class_names: Optional[list[str]] = None
) -> EvalReport:
    """Per-class AP, mAP and diagnosis of a detection set.

    Raises:
        NoEvaluableClassesError: If no class has ground truth
    """
    mode = APMode(mode)
    gt_index = objects_by_class(annotations)
    det_index = detections_by_class(detections)
    names = _class_names(annotations, detections, class_names)

    per_class: dict[str, Optional[float]] = {}
    for name in names:
        try:
            per_class[name] = average_precision(det_index.get(name, []), gt_index.get(name, {}), iou_threshold, mode)
        except UndefinedAPError:
            logger.warning("Class %s has no ground truth; excluded from mAP", name)
            per_class[name] = None

    overall = mean_ap(per_class)
    return EvalReport(
        per_class_ap={name: ap for name, ap in per_class.items() if ap is not None},
        map=overall,
        mode=mode,
        iou_threshold=iou_threshold,
        undefined_classes=[name for name, ap in per_class.items() if ap is None],
        fp_taxonomy=diagnose_false_positives(
            detections, annotations, None, iou_threshold, background_iou, class_names=names
        ),
    )


def render_report(report: EvalReport) -> str:
    """Per-class AP table with a mAP footer."""
    width = max([len("class")] + [len(name) for name in report.per_class_ap] + [len(n) for n in report.undefined_classes])
    lines = [f"{'class':<{width}}  AP", "-" * (width + 10)]
    for name, ap in report.per_class_ap.items():
        lines.append(f"{name:<{width}}  {ap:.4f}")
    for name in report.undefined_classes:
        lines.append(f"{name:<{width}}  n/a")
    lines.append("-" * (width + 10))
    lines.append(f"{'mAP':<{width}}  {report.map:.4f}  ({report.mode.value}, IoU {report.iou_threshold:g})")
    return "\n".join(lines)


def render_taxonomy(taxonomy: Mapping[str, FalsePositiveCounts]) -> str:
    """Cor/Loc/Oth/BG shares of the top-ranked detections per class."""
    width = max([len("class")] + [len(name) for name in taxonomy])
    lines = [f"{'class':<{width}}  {'N':>5}  {'Cor':>6}  {'Loc':>6}  {'Oth':>6}  {'BG':>6}"]
    for name, counts in taxonomy.items():
        total = counts.total
        shares = [
            f"{(value / total if total else 0.0):>6.1%}"
            for value in (counts.Cor, counts.Loc, counts.Oth, counts.BG)
        ]
        lines.append(f"{name:<{width}}  {total:>5}  " + "  ".join(shares))
    return "\n".join(lines)


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
