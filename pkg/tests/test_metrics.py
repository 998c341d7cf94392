import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stageroute.errors import ShapeError
from stageroute.metrics import (boundary_points, dice, evaluate_masks, hd95,
                                hd95_bruteforce_oracle, iou)

masks = hnp.arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12)))
paired_masks = st.integers(1, 12).flatmap(
    lambda h: st.integers(1, 12).flatmap(
        lambda w: st.tuples(hnp.arrays(bool, (h, w)), hnp.arrays(bool, (h, w)))))


def test_dice_hand_cases():
    full = np.ones((3, 3), bool)
    assert dice(full, full) == 1.0
    a = np.zeros((2, 4), bool)
    b = np.zeros((2, 4), bool)
    a[0, :2] = True
    b[1, 2:] = True
    assert dice(a, b) == 0.0  # disjoint, non-empty
    p = np.zeros((3, 3), bool)
    g = np.zeros((3, 3), bool)
    p.flat[:4] = True
    g.flat[2:6] = True  # |P|=|G|=4, overlap 2
    assert dice(p, g) == 0.5


def test_iou_hand_cases():
    m = np.eye(4, dtype=bool)
    assert iou(m, m) == 1.0
    p = np.zeros((2, 4), bool)
    g = np.zeros((2, 4), bool)
    p.flat[:4] = True
    g.flat[2:6] = True  # inter 2, union 6
    assert iou(p, g) == pytest.approx(1 / 3)


def test_both_empty_conventions():
    e = np.zeros((5, 5), bool)
    assert dice(e, e) == 1.0
    assert iou(e, e) == 1.0
    assert hd95(e, e) == 0.0


def test_one_empty_conventions():
    e = np.zeros((64, 64), bool)
    g = np.zeros((64, 64), bool)
    g[10:20, 10:20] = True
    assert dice(e, g) == 0.0
    assert hd95(e, g) == pytest.approx(np.sqrt(2 * 63 ** 2))
    assert hd95(g, e) == hd95(e, g)


def test_hd95_single_pixel_pair():
    p = np.zeros((8, 8), bool)
    g = np.zeros((8, 8), bool)
    p[0, 0] = True
    g[3, 4] = True
    assert hd95(p, g) == 5.0
    assert hd95_bruteforce_oracle(p, g) == 5.0


def test_hd95_identical_masks_zero():
    m = np.zeros((10, 10), bool)
    m[2:7, 3:9] = True
    assert hd95(m, m) == 0.0


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        dice(np.zeros((2, 2), bool), np.zeros((3, 2), bool))
    with pytest.raises(ShapeError):
        hd95(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


def test_boundary_definition():
    m = np.zeros((5, 5), bool)
    m[1:4, 1:4] = True  # 3x3 block: center is interior
    pts = {tuple(p) for p in boundary_points(m)}
    assert (2, 2) not in pts
    assert len(pts) == 8
    full = np.ones((3, 3), bool)  # border pixels always count
    assert len(boundary_points(full)) == 8


@given(paired_masks)
@settings(max_examples=120, deadline=None)
def test_dice_iou_identity_and_symmetry(pair):
    p, g = pair
    d = dice(p, g)
    j = iou(p, g)
    assert 0.0 <= d <= 1.0 and 0.0 <= j <= 1.0
    assert d == dice(g, p)
    assert j == iou(g, p)
    assert abs(j - d / (2.0 - d)) < 1e-12


@given(paired_masks)
@settings(max_examples=60, deadline=None)
def test_hd95_matches_bruteforce_oracle(pair):
    p, g = pair
    assert hd95(p, g) == hd95_bruteforce_oracle(p, g)


def test_hd95_oracle_symmetry():
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = rng.random((9, 9)) < 0.3
        g = rng.random((9, 9)) < 0.3
        assert hd95_bruteforce_oracle(p, g) == hd95_bruteforce_oracle(g, p)


def test_hd95_translation_invariance():
    rng = np.random.default_rng(1)
    base_p = rng.random((8, 8)) < 0.4
    base_g = rng.random((8, 8)) < 0.4
    canvas = 20
    def embed(mask, dy, dx):
        out = np.zeros((canvas, canvas), bool)
        out[dy:dy + 8, dx:dx + 8] = mask
        return out
    ref = hd95(embed(base_p, 0, 0), embed(base_g, 0, 0))
    for dy, dx in [(3, 5), (9, 2), (11, 11)]:
        assert hd95(embed(base_p, dy, dx), embed(base_g, dy, dx)) == ref


def test_evaluate_masks_report():
    gt = np.zeros((16, 16), np.int64)
    gt[2:6, 2:6] = 1
    gt[9:14, 9:14] = 2
    pred = gt.copy()
    pred[2, 2] = 0  # clip one pixel of class 1
    report = evaluate_masks(pred, gt, num_classes=4)
    assert report.included_classes == [1, 2, 3]
    assert report.per_class_dice[2] == 1.0
    assert report.per_class_dice[1] < 1.0
    assert report.mean_dice == pytest.approx(
        np.mean([report.per_class_dice[c] for c in (1, 2, 3)]))
    assert report.mean_hd95 == pytest.approx(
        np.mean([report.per_class_hd95[c] for c in (1, 2, 3)]))
    # class 3 absent from both: flagged convention
    assert any("class 3" in f and "both masks empty" in f for f in report.flags)
    assert report.per_class_dice[3] == 1.0
    assert report.per_class_hd95[3] == 0.0


def test_evaluate_masks_one_empty_flag():
    gt = np.zeros((8, 8), np.int64)
    gt[2:5, 2:5] = 1
    pred = np.zeros_like(gt)
    report = evaluate_masks(pred, gt, num_classes=2)
    assert report.per_class_dice[1] == 0.0
    assert report.per_class_hd95[1] == pytest.approx(np.sqrt(2 * 49))
    assert any("one mask empty" in f for f in report.flags)
