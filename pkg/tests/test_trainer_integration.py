"""Integration tests for target assignment and SGD training."""

import numpy as np
import pytest

import app.trainer as trainer
from app.config import RefinementConfig, SynthConfig, TrainConfig
from app.models import BBox, ImageExtent, Scene, SceneObject
from app.predictor import PredictorModel
from app.synthdata import generate_splits, sample_proposal_array, synthesize_feature_matrix
from app.trainer import (
    EXCLUDED,
    DivergenceError,
    TrainingError,
    assign_target_arrays,
    assign_targets,
    batch_loss_and_gradients,
    learning_rate_at,
    sgd_train,
    window_mean,
)


def box(x, y, w, h) -> BBox:
    return BBox(l_x=x, l_y=y, l_w=w, l_h=h)


def scene_with(*objects) -> Scene:
    return Scene(
        scene_id="s",
        extent=ImageExtent(width=200, height=200),
        objects=[SceneObject(class_id=c, box=b) for c, b in objects],
    )


def tiny_synth(**overrides) -> SynthConfig:
    values = {"num_classes": 3, "feature_dim": 16, "train_scenes": 6, "test_scenes": 2}
    values.update(overrides)
    return SynthConfig(**values)


def dataset(cfg: SynthConfig):
    scenes, _ = generate_splits(cfg)
    return scenes, [sample_proposal_array(s, cfg) for s in scenes]


def biased_model(num_classes: int, feature_dim: int, cls_bias: int, offsets) -> PredictorModel:
    """Model that predicts cls_bias everywhere with constant offsets for it."""
    model = PredictorModel.zeros(num_classes, feature_dim)
    cls_w = model.cls_weights.copy()
    reg_w = model.reg_weights.copy()
    cls_w[cls_bias, -1] = 20.0
    reg_w[4 * (cls_bias - 1):4 * cls_bias, -1] = offsets
    return model.updated(cls_w, reg_w)


class TestAssignTargets:
    """Labels and regression targets of proposals."""

    def test_identical_box(self):
        scene = scene_with((3, box(50, 50, 20, 20)))
        [assigned] = assign_targets([box(50, 50, 20, 20)], scene, TrainConfig())
        assert assigned.label == 3
        assert assigned.target.as_array().tolist() == [0.0, 0.0, 0.0, 0.0]

    def test_background_range(self):
        """IoU 0.2 falls in [0.1, 0.5) and is labeled background."""
        scene = scene_with((1, box(50, 50, 20, 20)), (2, box(150, 150, 20, 20)))
        [assigned] = assign_targets([box(50 + 40 / 3, 50, 20, 20)], scene, TrainConfig())
        assert assigned.label == 0
        assert assigned.target is None

    def test_low_overlap_excluded(self):
        scene = scene_with((1, box(50, 50, 20, 20)))
        proposals = [box(50, 50, 20, 20), box(68, 50, 20, 20), box(150, 150, 20, 20)]
        assigned = assign_targets(proposals, scene, TrainConfig())
        assert [a.index for a in assigned] == [0]

    def test_empty_scene(self):
        scene = Scene(scene_id="empty", extent=ImageExtent(width=200, height=200))
        assigned = assign_targets([box(50, 50, 20, 20), box(150, 150, 30, 30)], scene, TrainConfig())
        assert [a.label for a in assigned] == [0, 0]

    def test_best_object_wins(self):
        scene = scene_with((1, box(50, 50, 20, 20)), (2, box(56, 50, 20, 20)))
        labels, _ = assign_target_arrays(
            np.array([[55.0, 50, 20, 20]]), *scene.gt_arrays(), TrainConfig()
        )
        assert labels.tolist() == [2]


class TestGradients:
    """Analytic gradients of the batch loss."""

    @staticmethod
    def batch(seed=0, n=12, num_classes=3, feature_dim=6):
        rng = np.random.default_rng(seed)
        model = PredictorModel.initialize(
            num_classes, feature_dim, rng, std_cls=0.8, std_reg=0.8, feature_scale=1.0
        )
        cls_w = model.cls_weights.copy()
        reg_w = model.reg_weights.copy()
        cls_w[:, -1] = rng.normal(0, 0.5, num_classes + 1)
        reg_w[:, -1] = rng.normal(0, 0.5, 4 * num_classes)
        model = model.updated(cls_w, reg_w)
        conditioned = rng.normal(0, 1, (n, feature_dim))
        labels = rng.integers(0, num_classes + 1, n)
        labels[0] = EXCLUDED
        targets = rng.normal(0, 1.5, (n, 4))
        targets[labels <= 0] = 0.0
        return model, conditioned, labels, targets

    def test_matches_finite_differences(self):
        model, conditioned, labels, targets = self.batch()
        cfg = TrainConfig()
        result = batch_loss_and_gradients(model, conditioned, labels, targets, cfg)
        h = 1e-6

        def total(cls_w, reg_w):
            return batch_loss_and_gradients(model.updated(cls_w, reg_w), conditioned, labels, targets, cfg).breakdown.total

        for name, analytic in (("cls", result.grad_cls), ("reg", result.grad_reg)):
            numeric = np.zeros_like(analytic)
            for index in np.ndindex(analytic.shape):
                cls_w, reg_w = model.cls_weights.copy(), model.reg_weights.copy()
                weights = cls_w if name == "cls" else reg_w
                weights[index] += h
                up = total(cls_w, reg_w)
                weights[index] -= 2 * h
                down = total(cls_w, reg_w)
                numeric[index] = (up - down) / (2 * h)
            assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-7), name

    def test_excluded_rows_ignored(self):
        model, conditioned, labels, targets = self.batch()
        result = batch_loss_and_gradients(model, conditioned, labels, targets, TrainConfig())
        kept = labels != EXCLUDED
        again = batch_loss_and_gradients(model, conditioned[kept], labels[kept], targets[kept], TrainConfig())
        assert result.samples == int(kept.sum())
        assert again.breakdown.total == pytest.approx(result.breakdown.total)

    def test_only_ground_truth_rows_receive_regression_gradient(self):
        model, conditioned, _, targets = self.batch()
        labels = np.full(len(conditioned), 2)
        result = batch_loss_and_gradients(model, conditioned, labels, targets + 0.3, TrainConfig())
        assert not result.grad_reg[:4].any()
        assert not result.grad_reg[8:].any()
        assert result.grad_reg[4:8].any()

    def test_background_has_no_regression_gradient(self):
        model, conditioned, _, targets = self.batch()
        labels = np.zeros(len(conditioned), dtype=np.int64)
        result = batch_loss_and_gradients(model, conditioned, labels, targets, TrainConfig())
        assert result.breakdown.loc == 0.0
        assert not result.grad_reg.any()

    def test_all_excluded(self):
        model, conditioned, _, targets = self.batch()
        labels = np.full(len(conditioned), EXCLUDED)
        result = batch_loss_and_gradients(model, conditioned, labels, targets, TrainConfig())
        assert result.samples == 0
        assert result.breakdown.total == 0.0


class TestSchedule:
    def test_step_decay(self):
        cfg = TrainConfig(learning_rate=0.5, lr_decay_factor=0.1, decay_step=10)
        assert learning_rate_at(0, cfg) == 0.5
        assert learning_rate_at(9, cfg) == 0.5
        assert learning_rate_at(10, cfg) == pytest.approx(0.05)

    def test_window_mean(self):
        curve = [4.0, 2.0, 1.0, 1.0]
        assert window_mean(curve, window=2) == 3.0
        assert window_mean(curve, window=2, last=True) == 1.0


class TestSgdTrain:
    """End-to-end behavior of the training loop."""

    def test_zero_learning_rate_keeps_model(self):
        synth = tiny_synth()
        scenes, proposals = dataset(synth)
        initial = PredictorModel.initialize(3, 16, np.random.default_rng(1))
        result = sgd_train(scenes, proposals, TrainConfig(learning_rate=0.0, iterations=5), synth,
                           initial_model=initial)
        assert result.model.same_weights(initial)
        assert len(result.loss_curve) == 5

    def test_zero_learning_rate_flat_curve(self):
        """One scene, the whole proposal set per step and no noise: every step sees the same loss."""
        synth = tiny_synth(feature_noise_sigma=0.0)
        scenes, proposals = dataset(synth)
        cfg = TrainConfig(learning_rate=0.0, iterations=6, batch_size=10_000)
        result = sgd_train(scenes[:1], proposals[:1], cfg, synth)
        assert len(set(result.loss_curve)) == 1

    def test_deterministic(self):
        synth = tiny_synth()
        scenes, proposals = dataset(synth)
        cfg = TrainConfig(iterations=20, batch_size=8, flip_augment=True, seed=3)
        a = sgd_train(scenes, proposals, cfg, synth)
        b = sgd_train(scenes, proposals, cfg, synth)
        assert a.model.same_weights(b.model)
        assert a.loss_curve == b.loss_curve

    def test_later_iterations_label_refined_boxes(self, monkeypatch):
        """Targets at t >= 2 are assigned against refined boxes, not proposals."""
        synth = tiny_synth(feature_noise_sigma=0.0)
        scenes, proposals = dataset(synth)
        seen = []
        original = trainer.assign_target_arrays

        def spy(boxes, gt_boxes, gt_classes, cfg):
            seen.append(np.array(boxes))
            return original(boxes, gt_boxes, gt_classes, cfg)

        monkeypatch.setattr(trainer, "assign_target_arrays", spy)
        model = biased_model(3, 16, 1, [0.1, 0.0, 0.0, 0.0])
        cfg = TrainConfig(iterations=1, unroll_depth=2, batch_size=10_000, pool_during_training=False)
        sgd_train(scenes[:1], proposals[:1], cfg, synth, RefinementConfig(clip_to_image=False), initial_model=model)

        assert len(seen) == 2
        assert np.array_equal(seen[0], proposals[0])
        expected = proposals[0].copy()
        expected[:, 0] += 0.1 * expected[:, 2]
        assert seen[1] == pytest.approx(expected)

    def test_divergence_reports_step(self):
        """Offsets that overflow between unrolled iterations abort training."""
        synth = tiny_synth()
        scenes, proposals = dataset(synth)
        model = biased_model(3, 16, 1, [0.0, 0.0, 900.0, 0.0])
        with pytest.raises(DivergenceError, match="divergence at step 1") as info:
            sgd_train(scenes, proposals, TrainConfig(iterations=3), synth, initial_model=model)
        assert info.value.step == 1

    def test_empty_dataset(self):
        with pytest.raises(TrainingError):
            sgd_train([], [], TrainConfig(), tiny_synth())


@pytest.mark.slow
class TestTrainingConverges:
    """Full-length training on the default benchmark."""

    def test_loss_halves_and_positives_classified(self):
        synth = SynthConfig()
        train_scenes, test_scenes = generate_splits(synth)
        proposals = [sample_proposal_array(s, synth) for s in train_scenes]
        train_cfg = TrainConfig()
        result = sgd_train(train_scenes, proposals, train_cfg, synth)

        assert window_mean(result.loss_curve, last=True) < 0.5 * window_mean(result.loss_curve)

        rng = np.random.default_rng(99)
        correct = total = 0
        for scene in test_scenes:
            boxes = sample_proposal_array(scene, synth)
            labels, _ = assign_target_arrays(boxes, *scene.gt_arrays(), train_cfg)
            positive = labels > 0
            if not positive.any():
                continue
            probs, _ = result.model.predict_batch(synthesize_feature_matrix(boxes[positive], scene, synth, rng))
            correct += int((np.argmax(probs, axis=1) == labels[positive]).sum())
            total += int(positive.sum())
        assert correct / total >= 0.9
