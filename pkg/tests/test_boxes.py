import math

import numpy as np
import pytest

from boxregress.boxes import (
    Box,
    Offsets,
    apply_offsets,
    apply_offsets_array,
    boxes_from_array,
    boxes_to_array,
    center_from_corner,
    corner_from_center,
    encode_offsets,
    encode_offsets_array,
    iou,
    iou_elementwise,
    iou_pairwise,
    match_nearest_gt,
)


def random_box(rng):
    return Box(rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0.5, 5), rng.uniform(0.5, 5))


def raster_iou(u, v, cells=1000):
    """Brute-force IoU: count raster cell centers inside each box."""
    xmin = min(u.x - u.w / 2, v.x - v.w / 2)
    xmax = max(u.x + u.w / 2, v.x + v.w / 2)
    ymin = min(u.y - u.h / 2, v.y - v.h / 2)
    ymax = max(u.y + u.h / 2, v.y + v.h / 2)
    xs = xmin + (np.arange(cells) + 0.5) * (xmax - xmin) / cells
    ys = ymin + (np.arange(cells) + 0.5) * (ymax - ymin) / cells

    def mask(b):
        in_x = np.abs(xs - b.x) <= b.w / 2
        in_y = np.abs(ys - b.y) <= b.h / 2
        return np.outer(in_y, in_x)

    mu, mv = mask(u), mask(v)
    inter = np.logical_and(mu, mv).sum()
    union = np.logical_or(mu, mv).sum()
    return inter / union


class TestBoxTypes:
    def test_rejects_nonpositive_sides(self):
        with pytest.raises(ValueError):
            Box(0, 0, 0, 2)
        with pytest.raises(ValueError):
            Box(0, 0, 2, -1)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Box(math.nan, 0, 1, 1)
        with pytest.raises(ValueError):
            Offsets(0, math.inf, 0, 0)

    def test_immutability(self):
        b = Box(0, 0, 1, 1)
        with pytest.raises(AttributeError):
            b.x = 5


class TestIou:
    def test_identity(self):
        b = Box(0, 0, 2, 2)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 2, 2), Box(10, 10, 2, 2)) == 0.0

    def test_one_seventh(self):
        # I = 1, U = 4 + 4 - 1 = 7
        assert abs(iou(Box(0, 0, 2, 2), Box(1, 1, 2, 2)) - 1 / 7) < 1e-12

    def test_edge_touching_is_zero(self):
        assert iou(Box(0, 0, 2, 2), Box(2, 0, 2, 2)) == 0.0
        assert iou(Box(0, 0, 2, 2), Box(0, 2, 2, 2)) == 0.0

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            u, v = random_box(rng), random_box(rng)
            a, b = iou(u, v), iou(v, u)
            assert a == b
            assert 0.0 <= a <= 1.0
        assert iou(u, u) == 1.0

    def test_agrees_with_raster_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(150):
            u, v = random_box(rng), random_box(rng)
            assert abs(iou(u, v) - raster_iou(u, v)) < 1e-2


class TestOffsets:
    def test_zero_offsets_identity(self):
        b = Box(3, -2, 4, 5)
        assert apply_offsets(b, Offsets(0, 0, 0, 0)) == b

    def test_apply_example(self):
        out = apply_offsets(Box(0, 0, 10, 10), Offsets(0.1, -0.2, math.log(2), 0))
        assert abs(out.x - 1) < 1e-12
        assert abs(out.y - -2) < 1e-12
        assert abs(out.w - 20) < 1e-12
        assert abs(out.h - 10) < 1e-12

    def test_encode_identity(self):
        b = Box(1, 2, 3, 4)
        assert encode_offsets(b, b) == Offsets(0, 0, 0, 0)

    def test_encode_example(self):
        d = encode_offsets(Box(0, 0, 10, 10), Box(1, -2, 20, 10))
        assert abs(d.tx - 0.1) < 1e-12
        assert abs(d.ty - -0.2) < 1e-12
        assert abs(d.tw - math.log(2)) < 1e-12
        assert abs(d.th) < 1e-12

    def test_roundtrip_sweep(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(10_000):
            b, g = random_box(rng), random_box(rng)
            r = apply_offsets(b, encode_offsets(b, g))
            worst = max(worst, abs(r.x - g.x), abs(r.y - g.y), abs(r.w - g.w), abs(r.h - g.h))
        assert worst < 1e-9

    def test_overflow_reported(self):
        with pytest.raises(OverflowError):
            apply_offsets(Box(0, 0, 1, 1), Offsets(0, 0, 800.0, 0))
        with pytest.raises(OverflowError):
            apply_offsets(Box(1e308, 0, 1e308, 1), Offsets(1e4, 0, 0, 0))


class TestMatching:
    def test_single(self):
        b = Box(0, 0, 2, 2)
        assert match_nearest_gt(b, [b]) == 0

    def test_example(self):
        # IoUs 0 vs 3/5
        b = Box(0, 0, 2, 2)
        assert match_nearest_gt(b, [Box(10, 10, 2, 2), Box(0.5, 0, 2, 2)]) == 1

    def test_all_zero_iou_ties_to_lowest(self):
        b = Box(0, 0, 1, 1)
        assert match_nearest_gt(b, [Box(50, 50, 1, 1), Box(60, 60, 1, 1)]) == 0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            match_nearest_gt(Box(0, 0, 1, 1), [])

    def test_maximizes_iou(self):
        rng = np.random.default_rng(6)
        for _ in range(300):
            b = random_box(rng)
            gts = [random_box(rng) for _ in range(5)]
            idx = match_nearest_gt(b, gts)
            best = max(iou(b, g) for g in gts)
            assert iou(b, gts[idx]) == best


class TestCornerConversion:
    def test_example(self):
        assert corner_from_center(Box(0, 0, 2, 2)) == (-1, -1, 1, 1)

    def test_roundtrip(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            b = random_box(rng)
            r = center_from_corner(corner_from_center(b))
            assert abs(r.x - b.x) < 1e-12
            assert abs(r.w - b.w) < 1e-12

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            center_from_corner((0, 0, 0, 5))
        with pytest.raises(ValueError):
            center_from_corner((0, 5, 3, 5))


class TestArrayHelpers:
    def test_array_roundtrip(self):
        boxes = [Box(1, 2, 3, 4), Box(-1, 0, 0.5, 9)]
        assert boxes_from_array(boxes_to_array(boxes)) == boxes

    def test_pairwise_matches_scalar(self):
        rng = np.random.default_rng(8)
        a = [random_box(rng) for _ in range(12)]
        b = [random_box(rng) for _ in range(9)]
        mat = iou_pairwise(boxes_to_array(a), boxes_to_array(b))
        for i, u in enumerate(a):
            for j, v in enumerate(b):
                assert mat[i, j] == iou(u, v)

    def test_elementwise_matches_scalar(self):
        rng = np.random.default_rng(9)
        a = [random_box(rng) for _ in range(20)]
        b = [random_box(rng) for _ in range(20)]
        vals = iou_elementwise(boxes_to_array(a), boxes_to_array(b))
        for i in range(20):
            assert vals[i] == iou(a[i], b[i])

    def test_apply_encode_arrays_match_scalar(self):
        rng = np.random.default_rng(10)
        boxes = [random_box(rng) for _ in range(50)]
        gts = [random_box(rng) for _ in range(50)]
        enc = encode_offsets_array(boxes_to_array(boxes), boxes_to_array(gts))
        applied = apply_offsets_array(boxes_to_array(boxes), enc)
        for i in range(50):
            d = encode_offsets(boxes[i], gts[i])
            assert np.allclose(enc[i], [d.tx, d.ty, d.tw, d.th], atol=1e-15)
            assert np.allclose(applied[i], [gts[i].x, gts[i].y, gts[i].w, gts[i].h], atol=1e-9)
