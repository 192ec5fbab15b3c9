"""Synthetic scenes, proposals and features.

Scenes are rectangles of labeled objects placed uniformly at random. Proposals
are jittered copies of the objects plus uniform background boxes. Features
stand in for pooled CNN activations: each one carries the proposal geometry,
the class and overlap of its best-matching object and the exact regression
offsets onto that object, padded to a constant norm and corrupted by
Gaussian noise.

Every random draw comes from a numpy Generator seeded by the root seed and
the scene index or id, so scenes can be produced independently and in any
order.
"""

import logging
import zlib
from typing import Optional

import numpy as np

from app.config import SynthConfig
from app.geometry import array_to_boxes, clip_boxes, encode_boxes, iou, mirror_boxes, pairwise_iou
from app.models import BBox, ImageExtent, Scene, SceneObject


logger = logging.getLogger(__name__)

# Independent random streams derived from one scene
PROPOSAL_STREAM = 1
FEATURE_STREAM = 2


class SynthesisError(Exception):
    """Base exception for synthetic data generation errors."""
    pass


class SceneTooCrowdedError(SynthesisError):
    """Raised when an object cannot be placed within the retry budget."""
    pass


def scene_id_for(index: int) -> str:
    return f"scene_{index:06d}"


def scene_rng(seed: int, scene_id: str, stream: int) -> np.random.Generator:
    """Generator keyed on (seed, scene id, stream)."""
    return np.random.default_rng([seed, zlib.crc32(scene_id.encode("utf-8")), stream])


# ============================================================================
# Scenes
# ============================================================================

def generate_scene(cfg: SynthConfig, index: int) -> Scene:
    """Generate scene number `index` of the run.

    Raises:
        SceneTooCrowdedError: If an object cannot be placed without exceeding
                              the same-class overlap bound
    """
    rng = np.random.default_rng([cfg.seed, index])
    extent = ImageExtent(width=cfg.image_width, height=cfg.image_height)
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))

    objects: list[SceneObject] = []
    for _ in range(count):
        class_id = int(rng.integers(1, cfg.num_classes + 1))
        for _attempt in range(cfg.placement_retries):
            w, h = rng.uniform(cfg.min_object_size, cfg.max_object_size, size=2)
            cx = rng.uniform(w / 2.0, cfg.image_width - w / 2.0)
            cy = rng.uniform(h / 2.0, cfg.image_height - h / 2.0)
            box = BBox(l_x=float(cx), l_y=float(cy), l_w=float(w), l_h=float(h))
            if all(
                iou(box, other.box) <= cfg.max_same_class_iou
                for other in objects if other.class_id == class_id
            ):
                objects.append(SceneObject(class_id=class_id, box=box))
                break
        else:
            raise SceneTooCrowdedError(
                f"scene too crowded: {scene_id_for(index)} after {cfg.placement_retries} attempts"
            )

    return Scene(scene_id=scene_id_for(index), extent=extent, objects=objects)


def generate_scenes(cfg: SynthConfig) -> list[Scene]:
    """All scenes of the run, training split first."""
    total = cfg.train_scenes + cfg.test_scenes
    scenes = [generate_scene(cfg, index) for index in range(total)]
    logger.info("Generated %d scenes (%d objects)", total, sum(len(s.objects) for s in scenes))
    return scenes


def generate_splits(cfg: SynthConfig) -> tuple[list[Scene], list[Scene]]:
    scenes = generate_scenes(cfg)
    return scenes[:cfg.train_scenes], scenes[cfg.train_scenes:]


def mirror_scene(scene: Scene) -> Scene:
    """Reflect every object about the vertical center line."""
    if not scene.objects:
        return scene
    boxes, _ = scene.gt_arrays()
    mirrored = array_to_boxes(mirror_boxes(boxes, scene.extent))
    objects = [
        SceneObject(class_id=obj.class_id, box=box, difficult=obj.difficult)
        for obj, box in zip(scene.objects, mirrored)
    ]
    return Scene(scene_id=scene.scene_id, extent=scene.extent, objects=objects)


# ============================================================================
# Proposals
# ============================================================================

def sample_proposal_array(
    scene: Scene,
    cfg: SynthConfig,
    rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Sample proposals as an (n, 4) array, object-derived rows first."""
    if rng is None:
        rng = scene_rng(cfg.seed, scene.scene_id, PROPOSAL_STREAM)

    per_object = cfg.proposals_per_object
    rows = []
    for obj in scene.objects:
        box = obj.box.as_array()
        shift = rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=(per_object, 2))
        scale = np.exp(rng.normal(0.0, cfg.log_size_sigma, size=(per_object, 2)))
        jittered = np.empty((per_object, 4))
        jittered[:, :2] = box[:2] + shift * box[2:]
        jittered[:, 2:] = box[2:] * scale
        rows.append(jittered)

    background = per_object * max(len(scene.objects), 1)
    size = rng.uniform(cfg.min_object_size, cfg.max_object_size, size=(background, 2))
    centers = rng.uniform(0.0, 1.0, size=(background, 2)) * [scene.extent.width, scene.extent.height]
    rows.append(np.hstack([centers, size]))

    proposals, empty = clip_boxes(np.vstack(rows), scene.extent)
    return proposals[~empty]


def sample_proposals(
    scene: Scene,
    cfg: SynthConfig,
    rng: Optional[np.random.Generator] = None
) -> list[BBox]:
    """Jittered object proposals plus as many uniform background boxes, clipped.

    Args:
        scene: Scene to sample around
        cfg: Jitter magnitudes and counts
        rng: Random stream; derived from (seed, scene id) when omitted

    Returns:
        Proposal boxes; with zero jitter the object-derived ones equal the objects
    """
    return array_to_boxes(sample_proposal_array(scene, cfg, rng))


# ============================================================================
# Features
# ============================================================================

def feature_layout(num_classes: int) -> dict[str, slice]:
    """Positions of the feature blocks; the remaining dimensions carry noise only."""
    onehot_end = 4 + num_classes
    return {
        "geometry": slice(0, 4),
        "class": slice(4, onehot_end),
        "offsets": slice(onehot_end, onehot_end + 4),
        "overlap": slice(onehot_end + 4, onehot_end + 5),
        "padding": slice(onehot_end + 5, onehot_end + 6),
    }


def clean_feature_matrix(boxes: np.ndarray, scene: Scene, cfg: SynthConfig) -> np.ndarray:
    """Noise-free features of (n, 4) boxes against the scene's objects."""
    boxes = np.asarray(boxes, dtype=np.float64)
    n = boxes.shape[0]
    layout = feature_layout(cfg.num_classes)
    width, height = scene.extent.width, scene.extent.height

    features = np.zeros((n, cfg.feature_dim))
    geometry = features[:, layout["geometry"]]
    geometry[:, 0] = boxes[:, 0] / width - 0.5
    geometry[:, 1] = boxes[:, 1] / height - 0.5
    geometry[:, 2] = boxes[:, 2] / width
    geometry[:, 3] = boxes[:, 3] / height

    if scene.objects and n:
        gt_boxes, gt_classes = scene.gt_arrays()
        overlaps = pairwise_iou(boxes, gt_boxes)
        best = np.argmax(overlaps, axis=1)
        best_iou = overlaps[np.arange(n), best]
        matched = best_iou > 0
        rows = np.flatnonzero(matched)

        class_block = features[:, layout["class"]]
        class_block[rows, gt_classes[best[rows]] - 1] = best_iou[rows]
        features[rows, layout["offsets"]] = encode_boxes(boxes[rows], gt_boxes[best[rows]])
        features[:, layout["overlap"]] = best_iou[:, None]

    # Pad to a constant norm so L2 conditioning scales every row alike
    squared = (features ** 2).sum(axis=1)
    features[:, layout["padding"]] = np.sqrt(np.maximum(cfg.feature_radius ** 2 - squared, 0.0))[:, None]
    return features


def synthesize_feature_matrix(
    boxes: np.ndarray,
    scene: Scene,
    cfg: SynthConfig,
    rng: np.random.Generator
) -> np.ndarray:
    """Raw (n, F) features of the given boxes, noise drawn from rng."""
    features = clean_feature_matrix(boxes, scene, cfg)
    noise = rng.normal(0.0, cfg.feature_noise_sigma, size=features.shape)
    return features + noise


def synthesize_features(proposal: BBox, scene: Scene, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Raw feature vector of one proposal."""
    return synthesize_feature_matrix(proposal.as_array()[None, :], scene, cfg, rng)[0]


def feature_provider(scene: Scene, cfg: SynthConfig, rng: np.random.Generator):
    """Feature callback for run_refinement, drawing noise from rng."""

    def provide(boxes: np.ndarray, iteration: int) -> np.ndarray:
        return synthesize_feature_matrix(boxes, scene, cfg, rng)

    return provide
