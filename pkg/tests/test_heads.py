"""Prediction heads and center-heatmap decoding."""
import numpy as np
import pytest

from protomtl import autodiff as ad
from protomtl.autodiff import ParameterStore
from protomtl.heads import DetectionHead, MapHead, OccupancyHead, decode_boxes
from protomtl.losses import heatmap_targets, regression_targets
from protomtl.scene import Box, GridGeometry

GEOM = GridGeometry(16, 16, 2)
DET_IDS = (1, 2, 3)


def zeroed(store):
    for p in store.parameters():
        p.data[...] = 0.0
    return store


def test_detection_head_zero_weights():
    store = ParameterStore(0)
    head = DetectionHead(store, channels=4, n_det=3)
    zeroed(store)
    feats = ad.constant(np.random.default_rng(0).standard_normal((4, 6, 6)))
    raw = head.detect(feats)
    assert raw.heatmaps.shape == (3, 6, 6)
    assert raw.regression.shape == (6, 6, 6)
    assert np.allclose(raw.heatmaps.data, 0.5, atol=1e-15)
    assert np.all(raw.regression.data == 0.0)


def test_detection_head_shapes_at_default_scale():
    store = ParameterStore(1)
    head = DetectionHead(store, channels=16, n_det=4)
    feats = ad.constant(np.random.default_rng(1).standard_normal((16, 32, 32)))
    raw = head.detect(feats)
    assert raw.heatmaps.shape == (4, 32, 32)
    assert raw.regression.shape == (6, 32, 32)
    assert raw.heatmaps.data.min() >= 0.0 and raw.heatmaps.data.max() <= 1.0


def test_map_head_zero_weights_and_range():
    store = ParameterStore(2)
    head = MapHead(store, channels=4, n_map=4)
    zeroed(store)
    feats = ad.constant(np.random.default_rng(2).standard_normal((4, 8, 8)))
    probs = head.segment_map(feats)
    assert probs.shape == (4, 8, 8)
    assert np.allclose(probs.data, 0.5, atol=1e-15)
    live = MapHead(ParameterStore(3), channels=4, n_map=2)
    for trial in range(100):
        feats = ad.constant(np.random.default_rng(trial).standard_normal((4, 5, 5)) * 4)
        p = live.segment_map(feats).data
        assert p.min() >= 0.0 and p.max() <= 1.0


def test_decode_empty_cases():
    heat = np.zeros((2, 16, 16))
    reg = np.zeros((6, 16, 16))
    assert decode_boxes(heat, reg, GEOM, (1, 2), 0.5) == []
    heat = np.random.default_rng(0).uniform(0, 0.99, (2, 16, 16))
    assert decode_boxes(heat, reg, GEOM, (1, 2), 1.0) == []


def test_decode_single_synthetic_peak():
    heat = np.zeros((1, 16, 16))
    heat[0, 5, 7] = 0.9
    reg = np.zeros((6, 16, 16))
    reg[0, 5, 7] = 0.5  # dx
    reg[1, 5, 7] = 0.5  # dy
    reg[2, 5, 7] = np.log(2.0)
    reg[3, 5, 7] = np.log(2.0)
    reg[4, 5, 7] = 0.0  # sin
    reg[5, 5, 7] = 1.0  # cos
    boxes = decode_boxes(heat, reg, GEOM, (4,), 0.5)
    assert len(boxes) == 1
    b = boxes[0]
    assert b.class_id == 4 and b.score == pytest.approx(0.9)
    assert b.box.center_xy == pytest.approx((5.5 + 0.5, 7.5 + 0.5))
    assert b.box.size_wl == pytest.approx((2.0, 2.0))
    assert b.box.yaw == pytest.approx(0.0)


def test_decode_requires_local_maximum():
    heat = np.zeros((1, 16, 16))
    heat[0, 5, 5] = 0.8
    heat[0, 5, 6] = 0.9  # dominates its neighbor
    boxes = decode_boxes(heat, np.zeros((6, 16, 16)), GEOM, (1,), 0.5)
    assert len(boxes) == 1
    assert (boxes[0].box.center_xy[0], boxes[0].box.center_xy[1]) == (5.5, 6.5)


def test_decode_plateau_tie_goes_to_lexicographically_smallest():
    heat = np.zeros((1, 16, 16))
    heat[0, 4, 4] = 0.7
    heat[0, 4, 5] = 0.7
    heat[0, 5, 4] = 0.7
    boxes = decode_boxes(heat, np.zeros((6, 16, 16)), GEOM, (1,), 0.5)
    assert len(boxes) == 1
    assert boxes[0].box.center_xy == (4.5, 4.5)


def test_decode_emits_at_most_one_box_per_peak():
    rng = np.random.default_rng(9)
    heat = rng.uniform(0, 1, (2, 16, 16))
    reg = rng.standard_normal((6, 16, 16)) * 0.1
    boxes = decode_boxes(heat, reg, GEOM, (1, 2), 0.2, max_per_class=1000)
    for ci in (0, 1):
        cells = set()
        strict_maxima = 0
        h = heat[ci]
        for i in range(16):
            for j in range(16):
                window = h[max(0, i - 1) : i + 2, max(0, j - 1) : j + 2]
                if h[i, j] >= 0.2 and h[i, j] == window.max():
                    strict_maxima += 1
        emitted = [b for b in boxes if b.class_index == ci]
        for b in emitted:
            cell = (int(b.box.center_xy[0]), int(b.box.center_xy[1]))
            assert cell not in cells
            cells.add(cell)
        assert len(emitted) <= strict_maxima


def test_decode_encode_round_trip_recovers_ground_truth():
    gt = [
        Box(1, (4.3, 11.2), (2.4, 3.1), 0.6),
        Box(2, (10.7, 5.1), (3.0, 2.2), -2.4),
    ]
    heat = np.zeros((3, 16, 16))
    targets = heatmap_targets(gt, GEOM, DET_IDS)
    # perfect prediction: the exact splat targets
    heat = targets
    cells, values = regression_targets(gt, GEOM)
    reg = np.zeros((6, 16, 16))
    for n, (ci, cj) in enumerate(cells):
        reg[:, ci, cj] = values[:, n]
    decoded = decode_boxes(heat, reg, GEOM, DET_IDS, 0.5)
    assert len(decoded) == 2
    decoded = sorted(decoded, key=lambda b: b.class_id)
    half_diag = 0.5 * np.hypot(GEOM.cell_size, GEOM.cell_size)
    for d, g in zip(decoded, gt):
        assert d.class_id == g.class_id
        dist = np.hypot(
            d.box.center_xy[0] - g.center_xy[0], d.box.center_xy[1] - g.center_xy[1]
        )
        assert dist <= half_diag
        assert d.box.size_wl[0] == pytest.approx(g.size_wl[0], rel=1e-9)
        assert d.box.size_wl[1] == pytest.approx(g.size_wl[1], rel=1e-9)
        assert abs(d.box.yaw - g.yaw) < 1e-9


def test_decode_rejects_bad_threshold():
    with pytest.raises(ValueError, match="threshold"):
        decode_boxes(np.zeros((1, 4, 4)), np.zeros((6, 4, 4)), GEOM, (1,), 0.0)


def test_occupancy_zero_phi_gives_uniform_softmax():
    store = ParameterStore(4)
    head = OccupancyHead(store, channels=4, n_classes=3)
    head.phi_w.data[...] = 0.0
    head.phi_b.data[...] = 0.0
    feats = ad.constant(np.random.default_rng(3).standard_normal((4, 3, 3, 2)))
    queries = ad.constant(np.random.default_rng(4).standard_normal((3, 4)))
    logits = head.predict_occupancy(feats, queries)
    assert logits.shape == (4, 3, 3, 2)
    assert np.all(logits.data == 0.0)
    soft = ad.softmax(logits, axis=0).data
    assert np.allclose(soft, 0.25, atol=1e-15)


def _identity_head(store, c):
    head = OccupancyHead(store, channels=c, n_classes=3)
    head.phi_w.data[...] = 0.0
    for i in range(c):
        head.phi_w.data[i, i, 0, 0, 0] = 1.0
    head.phi_b.data[...] = 0.0
    head.psi_w1.data = np.eye(c)
    head.psi_b1.data[...] = 0.0
    head.psi_w2.data = np.eye(c)
    head.psi_b2.data[...] = 0.0
    head.free_prototype.data[...] = 0.0
    return head


def test_occupancy_identity_projections_maximize_matching_prototype():
    c = 4
    head = _identity_head(ParameterStore(5), c)
    queries = np.zeros((3, c))
    queries[0, 0] = queries[1, 1] = queries[2, 2] = 1.0  # orthogonal, relu-safe
    feats = np.zeros((c, 2, 2, 1))
    feats[1, 0, 1, 0] = 5.0  # voxel (0,1,0) equals prototype 1 scaled
    logits = head.predict_occupancy(ad.constant(feats), ad.constant(queries))
    assert np.argmax(logits.data[:, 0, 1, 0]) == 1


def test_occupancy_matches_nested_loop_oracle():
    from oracles import mlp_forward, prototype_dot_maps

    store = ParameterStore(23)
    c = 5
    head = OccupancyHead(store, channels=c, n_classes=4)
    rng = np.random.default_rng(23)
    feats = rng.standard_normal((c, 4, 3, 2))
    queries = rng.standard_normal((4, c))
    logits = head.predict_occupancy(ad.constant(feats), ad.constant(queries))

    full = np.vstack([queries, head.free_prototype.data[None]])
    projected = mlp_forward(
        full, head.psi_w1.data, head.psi_b1.data, head.psi_w2.data, head.psi_b2.data
    )
    phi = np.zeros_like(feats)
    flat = feats.reshape(c, -1)
    phi_flat = phi.reshape(c, -1)
    for v in range(flat.shape[1]):
        phi_flat[:, v] = head.phi_w.data.reshape(c, c) @ flat[:, v] + head.phi_b.data
    expected = prototype_dot_maps(projected, phi)
    assert np.abs(logits.data - expected).max() < 1e-12


def test_occupancy_logits_linear_in_prototypes_with_identity_psi():
    c = 4
    head = _identity_head(ParameterStore(6), c)
    rng = np.random.default_rng(7)
    feats = ad.constant(rng.standard_normal((c, 3, 3, 2)))
    q1 = np.abs(rng.standard_normal((3, c)))  # relu-safe superposition
    q2 = np.abs(rng.standard_normal((3, c)))
    l1 = head.predict_occupancy(feats, ad.constant(q1)).data
    l2 = head.predict_occupancy(feats, ad.constant(q2)).data
    combo = head.predict_occupancy(feats, ad.constant(2.0 * q1 + 3.0 * q2)).data
    # the free-prototype row is unaffected by the queries
    assert np.abs(combo[:3] - (2.0 * l1[:3] + 3.0 * l2[:3])).max() < 1e-10
    assert np.abs(combo[3] - l1[3]).max() < 1e-12
