"""Unit tests for the detection metrics against hand values and the oracle."""

import math

import numpy as np
import pytest

from semidet.boxes import Box, iou
from semidet.evalmap import (COCO_THRESHOLDS, average_precision,
                             build_pr_curve, map_coco, match_detections,
                             read_results, write_results)

from oracle_map import oracle_map, oracle_map_5095


def _gt(x0, y0, x1, y1, cls=0):
    return Box(x0, y0, x1, y1, cls)


def _det(x0, y0, x1, y1, cls=0, score=0.9):
    return Box(x0, y0, x1, y1, cls, score)


# ---------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------

def test_iou_identical_boxes():
    a = _gt(0, 0, 2, 2)
    assert iou(a, a) == 1.0


def test_iou_disjoint_boxes():
    assert iou(_gt(0, 0, 2, 2), _gt(5, 5, 7, 7)) == 0.0


def test_iou_partial_overlap():
    assert iou(_gt(0, 0, 2, 2), _gt(1, 1, 3, 3)) == pytest.approx(1 / 7,
                                                                  abs=1e-12)


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        Box(0, 0, 0, 2, 0)


# ---------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------

def test_match_exact_hit():
    assert match_detections([_det(0, 0, 2, 2)], [_gt(0, 0, 2, 2)], 0.5) == [True]


def test_match_one_gt_claimed_once():
    dets = [_det(0, 0, 2, 2, score=0.9), _det(0, 0, 2, 2, score=0.8)]
    assert match_detections(dets, [_gt(0, 0, 2, 2)], 0.5) == [True, False]


def test_match_greedy_score_order():
    # higher-scored detection claims the ground truth first even though
    # the other detection overlaps it better
    gt = _gt(0, 0, 10, 10)
    loose = _det(0, 0, 10, 16, score=0.9)    # IoU 10/16 = 0.625
    tight = _det(0, 0, 10, 11, score=0.8)    # IoU 10/11
    assert match_detections([loose, tight], [gt], 0.5) == [True, False]


def test_match_flags_align_with_input_order():
    gt = _gt(0, 0, 10, 10)
    low_first = [_det(0, 0, 10, 16, score=0.2), _det(0, 0, 10, 11, score=0.9)]
    assert match_detections(low_first, [gt], 0.5) == [False, True]


# ---------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------

def test_ap_perfect_detector():
    curve = build_pr_curve([0.9, 0.8], [True, True], n_gt=2)
    assert average_precision(curve) == pytest.approx(1.0, abs=1e-12)


def test_ap_zero_detections():
    curve = build_pr_curve([], [], n_gt=3)
    assert average_precision(curve) == 0.0


def test_ap_tp_fp_tp_hand_value():
    # 2 GTs, detections sorted [TP, FP, TP]:
    # PR points (0.5, 1.0), (0.5, 0.5), (1.0, 2/3)
    curve = build_pr_curve([0.9, 0.8, 0.7], [True, False, True], n_gt=2)
    expected = (51 * 1.0 + 50 * (2 / 3)) / 101
    assert average_precision(curve) == pytest.approx(expected, abs=1e-12)
    assert average_precision(curve) == pytest.approx(0.8350, abs=5e-5)


def test_ap_undefined_without_ground_truth():
    with pytest.raises(ValueError):
        average_precision(build_pr_curve([0.9], [False], n_gt=0))


# ---------------------------------------------------------------------
# map_coco
# ---------------------------------------------------------------------

def test_map_perfect_detector_everywhere():
    gts = {0: [_gt(0, 0, 10, 10, 0), _gt(20, 20, 40, 40, 1)],
           1: [_gt(5, 5, 25, 25, 2)]}
    dets = {img: [Box(b.x_min, b.y_min, b.x_max, b.y_max, b.class_id, 0.9)
                  for b in boxes] for img, boxes in gts.items()}
    table = map_coco(dets, gts, [0, 1, 2])
    assert table.map_5095 == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(table.ap, 1.0)


def test_map_is_mean_of_class_aps():
    table_ap = np.array([[0.6], [0.3], [0.9]])
    # construct through the public API: one class AP each via controlled FPs
    # simpler: verify the arithmetic property on a real table
    gts = {0: [_gt(0, 0, 10, 10, c) for c in range(3)]}
    dets = {0: [_det(0, 0, 10, 10, 0, 0.9),          # class 0 perfect
                _det(50, 50, 60, 60, 1, 0.95),       # class 1: FP above TP
                _det(0, 0, 10, 10, 1, 0.9),
                _det(0, 0, 10, 10, 2, 0.9)]}         # class 2 perfect
    table = map_coco(dets, gts, [0, 1, 2], thresholds=(0.5,))
    expected = float(np.mean([table.ap[i, 0] for i in range(3)]))
    assert table.map_50 == pytest.approx(expected, abs=1e-12)
    del table_ap


def test_map_iou_exactly_on_threshold_boundary():
    # detection whose IoU with its GT is exactly 0.70: TP at thresholds
    # <= 0.70 (5 of 10), FP above, so map_5095 = map_50 / 2
    gt = _gt(0, 0, 10, 10)
    det = Box(0, 0, 10, 7, 0, 0.9)  # IoU = 70/100
    assert iou(det, gt) == pytest.approx(0.7, abs=1e-12)
    table = map_coco({0: [det]}, {0: [gt]}, [0])
    assert table.map_5095 == pytest.approx(table.map_50 * 0.5, abs=1e-12)


def test_map_excludes_classes_without_ground_truth():
    gts = {0: [_gt(0, 0, 10, 10, 0)]}
    dets = {0: [_det(0, 0, 10, 10, 0, 0.9), _det(20, 20, 30, 30, 1, 0.8)]}
    table = map_coco(dets, gts, [0, 1])
    assert np.isnan(table.ap[1]).all()
    assert table.map_5095 == pytest.approx(1.0, abs=1e-12)
    assert 1 not in table.per_class_5095


def test_map_empty_class_universe_rejected():
    with pytest.raises(ValueError):
        map_coco({}, {}, [])


# ---------------------------------------------------------------------
# metric properties
# ---------------------------------------------------------------------

def _random_instance(rng):
    n_images = int(rng.integers(1, 6))
    class_ids = [0, 1, 2]
    gts, dets = {}, {}
    for img in range(n_images):
        gts[img] = []
        for _ in range(int(rng.integers(0, 6))):
            x0, y0 = rng.uniform(0, 40, size=2)
            w, h = rng.uniform(4, 20, size=2)
            gts[img].append(Box(x0, y0, x0 + w, y0 + h,
                                int(rng.integers(3))))
        dets[img] = []
        for _ in range(int(rng.integers(0, 11))):
            if gts[img] and rng.random() < 0.6:
                src = gts[img][int(rng.integers(len(gts[img])))]
                jit = rng.uniform(-3, 3, size=4)
                x0, y0 = src.x_min + jit[0], src.y_min + jit[1]
                x1, y1 = src.x_max + jit[2], src.y_max + jit[3]
                if x1 - x0 < 1 or y1 - y0 < 1:
                    continue
                cls = src.class_id
            else:
                x0, y0 = rng.uniform(0, 40, size=2)
                w, h = rng.uniform(4, 20, size=2)
                x1, y1 = x0 + w, y0 + h
                cls = int(rng.integers(3))
            dets[img].append(Box(x0, y0, x1, y1, cls,
                                 float(np.round(rng.uniform(0.05, 1.0), 3))))
    return dets, gts, class_ids


@pytest.mark.parametrize("seed", range(40))
def test_oracle_equivalence(seed):
    rng = np.random.default_rng(seed)
    dets, gts, class_ids = _random_instance(rng)
    table = map_coco(dets, gts, class_ids)
    expected = oracle_map(dets, gts, class_ids, COCO_THRESHOLDS)
    for i, cls in enumerate(class_ids):
        for j, thr in enumerate(COCO_THRESHOLDS):
            a, b = table.ap[i, j], expected[(cls, thr)]
            if math.isnan(b):
                assert math.isnan(a)
            else:
                assert a == pytest.approx(b, abs=1e-9)
    exp_5095 = oracle_map_5095(dets, gts, class_ids, COCO_THRESHOLDS)
    if not math.isnan(exp_5095):
        assert table.map_5095 == pytest.approx(exp_5095, abs=1e-9)


def test_score_monotone_invariance():
    rng = np.random.default_rng(123)
    dets, gts, class_ids = _random_instance(rng)
    base = map_coco(dets, gts, class_ids)
    squashed = {img: [Box(b.x_min, b.y_min, b.x_max, b.y_max, b.class_id,
                          b.score ** 3) for b in boxes]
                for img, boxes in dets.items()}
    after = map_coco(squashed, gts, class_ids)
    np.testing.assert_allclose(after.ap, base.ap, rtol=0, atol=1e-12)


def test_false_positive_never_helps():
    rng = np.random.default_rng(321)
    for seed in range(10):
        dets, gts, class_ids = _random_instance(np.random.default_rng(seed))
        base = map_coco(dets, gts, class_ids)
        with_fp = {img: list(boxes) for img, boxes in dets.items()}
        img0 = next(iter(with_fp))
        with_fp[img0] = with_fp[img0] + [
            Box(900, 900, 950, 950, int(rng.integers(3)),
                float(rng.uniform(0.05, 1.0)))]
        worse = map_coco(with_fp, gts, class_ids)
        mask = ~np.isnan(base.ap)
        assert (worse.ap[mask] <= base.ap[mask] + 1e-12).all()


# ---------------------------------------------------------------------
# result-file interop
# ---------------------------------------------------------------------

def test_results_round_trip(tmp_path):
    dets = {3: [Box(26, 26, 46, 46, 0, 0.875)],
            7: [Box(1, 2, 11, 22, 2, 0.5), Box(5, 5, 15, 25, 1, 0.25)]}
    path = tmp_path / "results.json"
    write_results(dets, path)
    loaded = read_results(path)
    assert set(loaded) == {3, 7}
    b = loaded[3][0]
    assert (b.x_min, b.y_min, b.x_max, b.y_max) == (26, 26, 46, 46)
    assert b.class_id == 0 and b.score == 0.875


def test_results_reject_degenerate_boxes(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('[{"image_id": 1, "category_id": 1, '
                    '"bbox": [0, 0, 0, 5], "score": 0.5}]')
    with pytest.raises(ValueError):
        read_results(path)
