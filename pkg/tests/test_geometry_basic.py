"""Basic tests for box arithmetic."""

import math

import numpy as np
import pytest

from app.geometry import (
    DecodeOverflowError,
    EmptyAfterClipError,
    clip,
    clip_boxes,
    decode,
    decode_boxes,
    encode,
    encode_boxes,
    iou,
    mirror,
    pairwise_iou,
)
from app.models import BBox, ImageExtent, RegressionTarget


def box(x, y, w, h) -> BBox:
    return BBox(l_x=x, l_y=y, l_w=w, l_h=h)


class TestIoU:
    """IoU values on hand-computed cases."""

    def test_identical_boxes(self):
        """A box overlaps itself completely."""
        assert iou(box(10, 10, 20, 20), box(10, 10, 20, 20)) == 1.0

    def test_disjoint_boxes(self):
        """Far apart boxes do not overlap."""
        assert iou(box(10, 10, 20, 20), box(100, 100, 20, 20)) == 0.0

    def test_shifted_box(self):
        """A 2-pixel shift leaves 360 of 440 pixels shared."""
        assert iou(box(10, 10, 20, 20), box(12, 10, 20, 20)) == pytest.approx(360 / 440, abs=1e-12)

    def test_edge_touching_boxes(self):
        """Boxes sharing only an edge have IoU 0."""
        assert iou(box(10, 10, 20, 20), box(30, 10, 20, 20)) == 0.0

    def test_symmetric(self):
        """Argument order does not matter."""
        a, b = box(10, 12, 20, 30), box(18, 15, 25, 10)
        assert iou(a, b) == iou(b, a)

    def test_pairwise_matches_scalar(self):
        """The matrix form agrees with the scalar form."""
        boxes = [box(10, 10, 20, 20), box(12, 10, 20, 20), box(50, 40, 8, 6)]
        arr = np.array([b.as_array() for b in boxes])
        matrix = pairwise_iou(arr, arr)
        for i, a in enumerate(boxes):
            for j, b in enumerate(boxes):
                assert matrix[i, j] == pytest.approx(iou(a, b), abs=1e-12)


class TestEncodeDecode:
    """The regression transform and its inverse."""

    def test_encode_identity(self):
        """A box relative to itself has zero offsets."""
        r = encode(box(10, 10, 20, 20), box(10, 10, 20, 20))
        assert r.as_array().tolist() == [0.0, 0.0, 0.0, 0.0]

    def test_encode_example(self):
        """Closed-form offsets of a shifted and resized target."""
        r = encode(box(10, 10, 20, 20), box(12, 11, 24, 18))
        assert r.r_x == pytest.approx(0.1)
        assert r.r_y == pytest.approx(0.05)
        assert r.r_w == pytest.approx(math.log(1.2))
        assert r.r_h == pytest.approx(math.log(0.9))

    def test_encode_doubling(self):
        """Doubling the size gives ln 2 in both size offsets."""
        r = encode(box(10, 10, 20, 20), box(10, 10, 40, 40))
        assert (r.r_x, r.r_y) == (0.0, 0.0)
        assert r.r_w == pytest.approx(math.log(2))
        assert r.r_h == pytest.approx(math.log(2))

    def test_decode_zero_offsets(self):
        """Zero offsets leave the proposal in place."""
        proposal = box(10, 10, 20, 20)
        assert decode(proposal, RegressionTarget.zero()) == proposal

    def test_decode_example(self):
        """Decoding inverts the encode example."""
        out = decode(box(10, 10, 20, 20), RegressionTarget(r_x=0.1, r_y=0.05, r_w=math.log(1.2), r_h=math.log(0.9)))
        assert out.as_array() == pytest.approx([12, 11, 24, 18], abs=1e-12)

    def test_decode_overflow(self):
        """Huge size offsets are rejected."""
        with pytest.raises(DecodeOverflowError):
            decode(box(10, 10, 20, 20), RegressionTarget(r_x=0, r_y=0, r_w=1000.0, r_h=0))

    def test_decode_underflow(self):
        """Size offsets that collapse a box to zero are rejected."""
        with pytest.raises(DecodeOverflowError):
            decode(box(10, 10, 20, 20), RegressionTarget(r_x=0, r_y=0, r_w=-1000.0, r_h=0))

    def test_round_trip_seeded(self):
        """decode(encode) recovers the target on 1000 seeded pairs."""
        rng = np.random.default_rng(7)
        proposals = np.column_stack([rng.uniform(0, 500, (1000, 2)), rng.uniform(1, 200, (1000, 2))])
        targets = np.column_stack([rng.uniform(0, 500, (1000, 2)), rng.uniform(1, 200, (1000, 2))])
        recovered = decode_boxes(proposals, encode_boxes(proposals, targets))
        assert np.max(np.abs(recovered - targets)) < 1e-9

    def test_scale_invariance(self):
        """Scaling both boxes by the same factor leaves offsets unchanged."""
        a, b = box(10, 10, 20, 20), box(12, 11, 24, 18)
        scaled = encode(box(30, 30, 60, 60), box(36, 33, 72, 54))
        assert scaled.as_array() == pytest.approx(encode(a, b).as_array(), abs=1e-12)

    def test_vectorized_decode_overflow(self):
        """The array form names the offending row."""
        proposals = np.array([[10.0, 10, 20, 20], [10, 10, 20, 20]])
        offsets = np.array([[0.0, 0, 0, 0], [0, 0, 900, 0]])
        with pytest.raises(DecodeOverflowError, match="box 1"):
            decode_boxes(proposals, offsets)


class TestClip:
    """Clipping to the image extent."""

    extent = ImageExtent(width=10, height=10)

    def test_inside_unchanged(self):
        """A box inside the image is returned as is."""
        b = box(5, 5, 4, 4)
        assert clip(b, self.extent) is b

    def test_partial_overlap(self):
        """Corners (-5..15, 0..10) clamp to (0..10, 0..10)."""
        out = clip(BBox.from_corners(-5, 0, 15, 10), self.extent)
        assert out.to_corners() == pytest.approx((0, 0, 10, 10))

    def test_fully_outside(self):
        """A box left of the image has nothing left."""
        with pytest.raises(EmptyAfterClipError, match="empty after clip"):
            clip(BBox.from_corners(-5, 2, -1, 6), self.extent)

    def test_idempotent(self):
        """Clipping twice is the same as clipping once."""
        once = clip(BBox.from_corners(-3.3, -1.7, 8.2, 12.9), self.extent)
        twice = clip(once, self.extent)
        assert twice.as_array() == pytest.approx(once.as_array(), abs=1e-12)

    def test_clip_boxes_mask(self):
        """The array form flags empty rows and leaves them untouched."""
        boxes = np.array([[5.0, 5, 4, 4], [-3, 5, 4, 4], [5, 5, 20, 4]])
        clipped, empty = clip_boxes(boxes, self.extent)
        assert empty.tolist() == [False, True, False]
        assert np.array_equal(clipped[0], boxes[0])
        assert np.array_equal(clipped[1], boxes[1])
        assert clipped[2] == pytest.approx([5, 5, 10, 4])


def test_mirror_reflects_center():
    """Mirroring moves the center across the vertical midline."""
    out = mirror(box(30, 20, 10, 8), ImageExtent(width=100, height=50))
    assert out.as_array().tolist() == [70, 20, 10, 8]


def test_bbox_rejects_non_positive_size():
    """Boxes need a positive width and height."""
    with pytest.raises(ValueError):
        box(10, 10, 0, 5)
