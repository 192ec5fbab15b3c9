"""Basic tests for the refinement engine."""

import numpy as np
import pytest

from app.config import RefinementConfig
from app.geometry import encode_boxes, pairwise_iou
from app.models import BBox, DetectionState, ImageExtent
from app.refine import AlignmentError, apply_refinement, nms, refine_step, run_refinement


EXTENT = ImageExtent(width=200, height=200)


def bbox(x, y, w, h) -> BBox:
    return BBox(l_x=x, l_y=y, l_w=w, l_h=h)


def one_hot_probs(cls: int, score: float, num_classes: int) -> list[float]:
    rest = (1.0 - score) / num_classes
    probs = [rest] * (num_classes + 1)
    probs[cls] = score
    return probs


class FixedPredictor:
    """Returns preset probabilities and offsets, ignoring the features."""

    def __init__(self, probs, offsets=None):
        self.probs = np.asarray(probs, dtype=np.float64)
        k = self.probs.shape[1] - 1
        self.offsets = np.zeros((len(self.probs), k, 4)) if offsets is None else np.asarray(offsets, dtype=np.float64)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1] - 1

    def predict_batch(self, features):
        return self.probs[:len(features)], self.offsets[:len(features)]


class OraclePredictor:
    """Reads boxes from the features and regresses them exactly onto ground truth."""

    def __init__(self, gt_boxes, gt_classes, num_classes):
        self.gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
        self.gt_classes = np.asarray(gt_classes)
        self._num_classes = num_classes

    @property
    def num_classes(self) -> int:
        return self._num_classes

    def predict_batch(self, features):
        boxes = np.asarray(features, dtype=np.float64)
        overlaps = pairwise_iou(boxes, self.gt_boxes)
        best = np.argmax(overlaps, axis=1)
        probs = np.zeros((len(boxes), self._num_classes + 1))
        offsets = np.zeros((len(boxes), self._num_classes, 4))
        for i, j in enumerate(best):
            if overlaps[i, j] >= 0.5:
                probs[i, self.gt_classes[j]] = 1.0
                offsets[i, :] = encode_boxes(boxes[i:i + 1], self.gt_boxes[j:j + 1])[0]
            else:
                probs[i, 0] = 1.0
        return probs, offsets


def boxes_as_features(boxes, iteration):
    return boxes


def initial_states(boxes, num_classes):
    return [DetectionState.initial(b, num_classes) for b in boxes]


class TestRefineStep:
    """Single refinement iterations."""

    def test_all_background_unchanged(self):
        """Background predictions leave every box where it was."""
        boxes = [bbox(20, 20, 10, 10), bbox(50, 60, 30, 20)]
        predictor = FixedPredictor([one_hot_probs(0, 0.9, 2)] * 2, np.full((2, 2, 4), 0.3))
        out = refine_step(initial_states(boxes, 2), predictor, np.zeros((2, 3)), RefinementConfig(), EXTENT)
        assert [s.box for s in out] == boxes
        assert all(s.is_background for s in out)

    def test_zero_offsets_single_detection(self):
        """A lone detection with zero offsets stays put."""
        boxes = [bbox(20, 20, 10, 10)]
        out = refine_step(initial_states(boxes, 2), FixedPredictor([one_hot_probs(1, 0.7, 2)]),
                          np.zeros((1, 3)), RefinementConfig(), EXTENT)
        assert out[0].box == boxes[0]
        assert out[0].predicted_class == 1
        assert out[0].score == pytest.approx(0.7)

    def test_pooled_pair(self):
        """Both members of a pair pool to the score-weighted mean."""
        boxes = [bbox(10, 10, 20, 20), bbox(12, 10, 20, 20)]
        probs = [one_hot_probs(1, 0.8, 5), one_hot_probs(1, 0.2, 5)]
        out = refine_step(initial_states(boxes, 5), FixedPredictor(probs), np.zeros((2, 3)),
                          RefinementConfig(clip_to_image=False))
        for s in out:
            assert s.box.as_array() == pytest.approx([10.4, 10, 20, 20], abs=1e-12)

    def test_histories_appended(self):
        """Each step appends box, class and score."""
        boxes = [bbox(20, 20, 10, 10)]
        out = refine_step(initial_states(boxes, 2), FixedPredictor([one_hot_probs(2, 0.6, 2)]),
                          np.zeros((1, 3)), RefinementConfig(), EXTENT)
        assert out[0].trajectory == [out[0].box]
        assert out[0].class_history == [2]
        assert out[0].score_history == [out[0].score]
        assert out[0].proposal == boxes[0]

    def test_alignment_error(self):
        """Feature rows must match the states one to one."""
        with pytest.raises(AlignmentError, match="alignment error"):
            refine_step(initial_states([bbox(20, 20, 10, 10)], 2), FixedPredictor([one_hot_probs(1, 0.7, 2)]),
                        np.zeros((2, 3)), RefinementConfig(), EXTENT)


class TestApplyRefinement:
    """Array-level update rules."""

    def test_previous_neighbor_mode(self):
        """In "previous" mode neighbors contribute their pre-regression boxes."""
        boxes = np.array([[10.0, 10, 20, 20], [12, 10, 20, 20]])
        probs = np.array([one_hot_probs(1, 0.8, 5), one_hot_probs(1, 0.6, 5)])
        offsets = np.zeros((2, 5, 4))
        offsets[:, 0, 0] = 0.05
        regressed = boxes + [[1.0, 0, 0, 0]]

        config = RefinementConfig(pool_neighbors="previous", clip_to_image=False)
        out = apply_refinement(boxes, probs, offsets, config)
        expected_0 = (0.8 * regressed[0] + 0.6 * boxes[1]) / 1.4
        expected_1 = (0.6 * regressed[1] + 0.8 * boxes[0]) / 1.4
        assert out[0] == pytest.approx(expected_0, abs=1e-12)
        assert out[1] == pytest.approx(expected_1, abs=1e-12)

    def test_no_pooling(self):
        """With pooling off the result is the decoded box."""
        boxes = np.array([[10.0, 10, 20, 20], [12, 10, 20, 20]])
        probs = np.array([one_hot_probs(1, 0.8, 2)] * 2)
        offsets = np.zeros((2, 2, 4))
        offsets[:, 0, 0] = 0.05
        out = apply_refinement(boxes, probs, offsets, RefinementConfig(pool_during_refinement=False), EXTENT)
        assert out == pytest.approx(boxes + [[1.0, 0, 0, 0]])

    def test_box_leaving_image_keeps_previous(self):
        """A box clipped to nothing keeps its previous location."""
        boxes = np.array([[20.0, 20, 10, 10]])
        probs = np.array([one_hot_probs(1, 0.9, 1)])
        offsets = np.array([[[100.0, 0, 0, 0]]])
        out = apply_refinement(boxes, probs, offsets, RefinementConfig(), EXTENT)
        assert np.array_equal(out, boxes)

    def test_empty_input(self):
        """No boxes in, no boxes out."""
        out = apply_refinement(np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 2, 4)), RefinementConfig())
        assert out.shape == (0, 4)


class TestRunRefinement:
    """Multi-iteration refinement."""

    def test_oracle_reaches_ground_truth(self):
        """An exact regressor puts every foreground box on its object in one step."""
        gt = np.array([[50.0, 50, 40, 30], [140, 120, 30, 50]])
        rng = np.random.default_rng(3)
        proposals = []
        for obj in gt:
            for _ in range(5):
                shift = rng.uniform(-0.1, 0.1, 2) * obj[2:]
                proposals.append(bbox(obj[0] + shift[0], obj[1] + shift[1], obj[2] * 1.05, obj[3] * 0.95))

        predictor = OraclePredictor(gt, [1, 2], 2)
        config = RefinementConfig(iterations=1, pool_during_refinement=False)
        states = run_refinement(proposals, predictor, boxes_as_features, config, EXTENT)
        for s in states:
            assert not s.is_background
            target = gt[s.predicted_class - 1]
            assert np.max(np.abs(s.box.as_array() - target)) < 1e-9

    @pytest.mark.parametrize("iterations", [1, 2, 3])
    def test_trajectory_length(self, iterations):
        """Every state records one box per iteration."""
        proposals = [bbox(20, 20, 10, 10), bbox(80, 80, 20, 20)]
        predictor = FixedPredictor([one_hot_probs(1, 0.7, 2), one_hot_probs(0, 0.7, 2)])
        states = run_refinement(proposals, predictor, lambda b, t: np.zeros((len(b), 3)),
                                RefinementConfig(iterations=iterations), EXTENT)
        assert all(len(s.trajectory) == iterations for s in states)

    def test_fixed_point(self):
        """Zero offsets and constant probabilities repeat the same box."""
        proposals = [bbox(20, 20, 10, 10)]
        predictor = FixedPredictor([one_hot_probs(1, 0.7, 2)])
        states = run_refinement(proposals, predictor, lambda b, t: np.zeros((len(b), 3)),
                                RefinementConfig(iterations=3), EXTENT)
        assert states[0].trajectory == [proposals[0]] * 3

    def test_background_box_resumes_moving(self):
        """A box held in place as background moves once a later step predicts an object."""
        offsets = np.zeros((1, 1, 4))
        offsets[0, 0, 0] = 0.1
        steps = iter([
            FixedPredictor([one_hot_probs(0, 0.9, 1)], offsets),
            FixedPredictor([one_hot_probs(1, 0.9, 1)], offsets),
        ])

        class SwitchingPredictor:
            num_classes = 1

            def predict_batch(self, features):
                return next(steps).predict_batch(features)

        proposal = bbox(50, 50, 10, 10)
        [state] = run_refinement([proposal], SwitchingPredictor(), lambda b, t: np.zeros((len(b), 3)),
                                 RefinementConfig(iterations=2), EXTENT)
        assert state.class_history == [0, 1]
        assert state.trajectory[0] == proposal
        assert state.trajectory[1].as_array() == pytest.approx([51, 50, 10, 10])

    def test_features_see_current_boxes(self):
        """The feature callback receives the boxes of the previous iteration."""
        seen = []

        def record(boxes, iteration):
            seen.append((iteration, boxes.copy()))
            return np.zeros((len(boxes), 3))

        offsets = np.zeros((1, 1, 4))
        offsets[0, 0, 0] = 0.1
        predictor = FixedPredictor([one_hot_probs(1, 0.9, 1)], offsets)
        run_refinement([bbox(50, 50, 10, 10)], predictor, record, RefinementConfig(iterations=2), EXTENT)
        assert [t for t, _ in seen] == [1, 2]
        assert seen[1][1][0] == pytest.approx([51, 50, 10, 10])

    def test_deterministic(self):
        """Identical inputs give identical trajectories."""
        gt = np.array([[60.0, 60, 40, 40]])
        proposals = [bbox(62, 59, 38, 44), bbox(57, 61, 41, 37), bbox(150, 150, 20, 20)]
        runs = [
            run_refinement(proposals, OraclePredictor(gt, [1], 1), boxes_as_features, RefinementConfig(), EXTENT)
            for _ in range(2)
        ]
        assert [s.trajectory for s in runs[0]] == [s.trajectory for s in runs[1]]


class TestNMS:
    """Per-class greedy suppression."""

    @staticmethod
    def detection(x, score, cls=1, w=20.0):
        box = bbox(x, 10, w, 20)
        return DetectionState(box=box, proposal=box, class_probs=one_hot_probs(cls, score, 2),
                              predicted_class=cls, score=score)

    def test_disjoint_all_kept(self):
        """Nothing overlaps, nothing is suppressed."""
        states = [self.detection(10, 0.9), self.detection(50, 0.8), self.detection(90, 0.7)]
        assert nms(states, 0.45) == states

    def test_identical_boxes(self):
        """Of two identical boxes only the higher score survives."""
        low, high = self.detection(10, 0.8), self.detection(10, 0.9)
        assert nms([low, high], 0.45) == [high]

    def test_chain(self):
        """a-b and b-c overlap, a-c do not: a and c survive."""
        a, b, c = self.detection(10, 0.9), self.detection(20, 0.8), self.detection(30.5, 0.7)
        assert nms([c, a, b], 0.3) == [c, a]

    def test_classes_independent(self):
        """Boxes of different classes never suppress each other."""
        states = [self.detection(10, 0.9, cls=1), self.detection(10, 0.8, cls=2)]
        assert nms(states, 0.45) == states

    def test_background_dropped(self):
        """Background states are not detections."""
        states = [self.detection(10, 0.9, cls=0), self.detection(50, 0.8)]
        assert nms(states, 0.45) == [states[1]]
