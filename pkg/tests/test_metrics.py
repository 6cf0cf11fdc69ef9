"""Metrics: map mIoU, occupancy mIoU, center-distance detection AP."""
import numpy as np
import pytest

from oracles import greedy_ap, iou_counts
from protomtl.heads import DecodedBox
from protomtl.metrics import (
    detection_ap,
    map_miou,
    occ_miou,
    occupancy_labels_from_logits,
    load_prediction_dump,
    prediction_dump,
)
from protomtl.scene import Box, default_taxonomy

TAX = default_taxonomy()


def test_map_miou_perfect_prediction():
    rng = np.random.default_rng(0)
    gt = (rng.random((3, 6, 6)) < 0.4).astype(np.int64)
    probs = np.where(gt > 0, 0.9, 0.1)
    per_class, mean = map_miou(probs, gt, 0.5)
    assert mean == pytest.approx(1.0)
    assert all(v == pytest.approx(1.0) for v in per_class if v is not None)


def test_map_miou_disjoint_and_half_covered():
    gt = np.zeros((1, 4, 4))
    gt[0, 0, :2] = 1
    pred = np.zeros((1, 4, 4))
    pred[0, 1, :2] = 0.9
    per_class, mean = map_miou(pred, gt, 0.5)
    assert per_class[0] == 0.0 and mean == 0.0
    # prediction covers exactly half of a 2-cell gt, no false positives
    pred2 = np.zeros((1, 4, 4))
    pred2[0, 0, 0] = 0.9
    per_class, mean = map_miou(pred2, gt, 0.5)
    assert per_class[0] == pytest.approx(0.5)


def test_map_miou_empty_union_classes_are_excluded():
    gt = np.zeros((2, 4, 4))
    gt[0, 0, 0] = 1
    pred = np.zeros((2, 4, 4))
    pred[0, 0, 0] = 0.9
    per_class, mean = map_miou(pred, gt, 0.5)
    assert per_class == [pytest.approx(1.0), None]
    assert mean == pytest.approx(1.0)
    per_class, mean = map_miou(np.zeros((2, 4, 4)), np.zeros((2, 4, 4)), 0.5)
    assert per_class == [None, None] and mean is None


def test_map_miou_rejects_bad_inputs():
    with pytest.raises(ValueError, match="threshold"):
        map_miou(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), 0.0)
    with pytest.raises(ValueError, match="vs gt"):
        map_miou(np.zeros((1, 2, 2)), np.zeros((2, 2, 2)), 0.5)


def test_occ_miou_perfect_and_all_free():
    rng = np.random.default_rng(1)
    gt = rng.integers(0, TAX.K + 1, size=(5, 5, 2))
    per_class, mean = occ_miou(gt, gt, TAX)
    assert mean == pytest.approx(1.0)
    pred = np.zeros_like(gt)
    single = np.where(rng.random((5, 5, 2)) < 0.3, 3, 0)
    per_class, mean = occ_miou(pred, single, TAX)
    assert per_class == {3: 0.0}
    assert mean == 0.0


def test_occ_miou_matches_hand_counted_confusion():
    gt = np.array([[[1, 1], [2, 5]], [[5, 0], [0, 2]]])
    pred = np.array([[[1, 2], [2, 5]], [[0, 0], [0, 2]]])
    per_class, mean = occ_miou(pred, gt, TAX)
    for cid in per_class:
        inter, union = iou_counts(pred == cid, gt == cid)
        assert per_class[cid] == pytest.approx(inter / union)
    # class 1: inter 1, union 2; class 2: inter 2, union 3; class 5: inter 1, union 2
    assert per_class == {
        1: pytest.approx(0.5),
        2: pytest.approx(2 / 3),
        5: pytest.approx(0.5),
    }
    assert mean == pytest.approx((0.5 + 2 / 3 + 0.5) / 3)


def test_occupancy_labels_from_logits_respects_order():
    logits = np.zeros((TAX.K + 1, 2, 2, 1))
    logits[TAX.K, 0, 0, 0] = 5.0  # free wins at one voxel
    logits[0, 0, 1, 0] = 5.0  # first foreground class elsewhere
    labels = occupancy_labels_from_logits(logits, TAX)
    assert labels[0, 0, 0] == TAX.free_label
    assert labels[0, 1, 0] == TAX.foreground_ids[0]


def _pred(class_id, score, cx, cy):
    return DecodedBox(
        class_index=class_id - 1,
        class_id=class_id,
        score=score,
        box=Box(class_id, (cx, cy), (2.0, 2.0), 0.0),
    )


def test_detection_ap_perfect_predictions():
    gts = [[Box(1, (3.0, 3.0), (2, 2), 0.0), Box(2, (8.0, 8.0), (2, 2), 0.0)]]
    preds = [[_pred(1, 1.0, 3.0, 3.0), _pred(2, 1.0, 8.0, 8.0)]]
    per_class, mean = detection_ap(preds, gts, (1, 2), (1.0, 2.0))
    assert per_class == {1: pytest.approx(1.0), 2: pytest.approx(1.0)}
    assert mean == pytest.approx(1.0)


def test_detection_ap_no_predictions_or_no_gt():
    gts = [[Box(1, (3.0, 3.0), (2, 2), 0.0)]]
    per_class, mean = detection_ap([[]], gts, (1, 2), (1.0,))
    assert per_class == {1: 0.0}
    assert mean == 0.0  # class 2 has no gt and no predictions: excluded
    per_class, mean = detection_ap([[_pred(2, 0.9, 1.0, 1.0)]], [[]], (1, 2), (1.0,))
    assert per_class == {2: 0.0}


def test_detection_ap_true_then_false_versus_swapped_scores():
    gts = [[Box(1, (5.0, 5.0), (2, 2), 0.0)]]
    preds = [[_pred(1, 0.9, 5.0, 5.0), _pred(1, 0.8, 20.0, 20.0)]]
    _, ap = detection_ap(preds, gts, (1,), (1.0,))
    assert ap == pytest.approx(1.0)
    swapped = [[_pred(1, 0.8, 5.0, 5.0), _pred(1, 0.9, 20.0, 20.0)]]
    _, ap = detection_ap(swapped, gts, (1,), (1.0,))
    assert ap == pytest.approx(0.5)


def test_detection_ap_is_permutation_invariant_and_bounded():
    rng = np.random.default_rng(7)
    gts = [[Box(1, (float(x), float(y)), (2, 2), 0.0)
            for x, y in rng.uniform(2, 14, (3, 2))]]
    preds = [
        [_pred(1, float(s), float(x), float(y))
         for s, (x, y) in zip(rng.random(5), rng.uniform(2, 14, (5, 2)))]
    ]
    _, ap = detection_ap(preds, gts, (1,), (1.0, 2.0))
    shuffled = [list(reversed(preds[0]))]
    _, ap2 = detection_ap(shuffled, gts, (1,), (1.0, 2.0))
    assert ap == ap2
    assert 0.0 <= ap <= 1.0


def test_detection_ap_demoting_a_true_positive_does_not_increase_ap():
    gts = [[Box(1, (5.0, 5.0), (2, 2), 0.0), Box(1, (10.0, 10.0), (2, 2), 0.0)]]
    preds = [[
        _pred(1, 0.9, 5.0, 5.0),
        _pred(1, 0.8, 10.0, 10.0),
        _pred(1, 0.7, 20.0, 20.0),
    ]]
    _, before = detection_ap(preds, gts, (1,), (1.0,))
    demoted = [[
        _pred(1, 0.9, 5.0, 5.0),
        _pred(1, 0.6, 10.0, 10.0),  # now below the false positive
        _pred(1, 0.7, 20.0, 20.0),
    ]]
    _, after = detection_ap(demoted, gts, (1,), (1.0,))
    assert after <= before


def test_detection_ap_matches_hand_rolled_oracle_on_random_scenes():
    rng = np.random.default_rng(11)
    for _ in range(25):
        n_gt, n_pred = int(rng.integers(0, 4)), int(rng.integers(0, 6))
        gt_centers = [tuple(c) for c in rng.uniform(0, 16, (n_gt, 2))]
        preds = [
            (float(s), float(x), float(y))
            for s, (x, y) in zip(rng.random(n_pred), rng.uniform(0, 16, (n_pred, 2)))
        ]
        tau = float(rng.uniform(1.0, 4.0))
        expected = greedy_ap(preds, gt_centers, tau)
        gts = [[Box(1, c, (2, 2), 0.0) for c in gt_centers]]
        pred_boxes = [[_pred(1, s, x, y) for s, x, y in preds]]
        per_class, mean = detection_ap(pred_boxes, gts, (1,), (tau,))
        if expected is None:
            assert per_class == {}
            assert mean is None
        else:
            assert per_class[1] == pytest.approx(expected, abs=1e-12)


def test_miou_decreases_under_random_corruption():
    rng = np.random.default_rng(13)
    clean_scores, corrupted_scores = [], []
    for seed in range(20):
        srng = np.random.default_rng(seed)
        gt = (srng.random((2, 8, 8)) < 0.4).astype(np.int64)
        probs = np.where(gt > 0, 0.9, 0.1)
        noise = srng.random((2, 8, 8)) < 0.25
        corrupted = np.where(noise, 1.0 - probs, probs)
        _, clean = map_miou(probs, gt, 0.5)
        _, bad = map_miou(corrupted, gt, 0.5)
        clean_scores.append(clean)
        corrupted_scores.append(bad)
    assert np.mean(corrupted_scores) < np.mean(clean_scores)


def test_prediction_dump_round_trip(tmp_path):
    boxes = [_pred(2, 0.7, 4.0, 5.0)]
    map_probs = np.random.default_rng(0).random((3, 4, 4))
    occ = np.random.default_rng(1).integers(0, 9, size=(4, 4, 2))
    doc = prediction_dump(boxes, map_probs, occ)
    path = tmp_path / "pred.json"
    import json

    path.write_text(json.dumps(doc))
    loaded = load_prediction_dump(path)
    assert np.allclose(loaded["map_probabilities"], map_probs)
    assert np.array_equal(loaded["occupancy_labels"], occ)
    assert loaded["boxes"][0].class_id == 2
    assert loaded["boxes"][0].score == pytest.approx(0.7)
