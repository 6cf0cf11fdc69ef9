"""Per-task prediction heads and center-heatmap box decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import RELU_GAIN, ParameterStore, Tensor
from .scene import Box, GridGeometry

LINEAR_GAIN = np.sqrt(3.0)

REGRESSION_CHANNELS = 6  # dx, dy, log w, log l, sin yaw, cos yaw
FOCAL_PRIOR_BIAS = -float(np.log(9.0))  # sigmoid starts near 0.1 under focal losses


@dataclass
class DetectionRaw:
    heatmaps: Tensor  # (N_det, X, Y) in [0, 1]
    regression: Tensor  # (6, X, Y)


@dataclass
class DecodedBox:
    class_index: int  # position in the detection class list
    class_id: int
    score: float
    box: Box

    def to_json(self) -> dict:
        return {
            "class_id": self.class_id,
            "score": self.score,
            "center_xy": list(self.box.center_xy),
            "size_wl": list(self.box.size_wl),
            "yaw": self.box.yaw,
        }


class DetectionHead:
    """Shared 3x3 trunk, then 1x1 heads for heatmaps and regression."""

    def __init__(self, store: ParameterStore, channels: int, n_det: int):
        c = channels
        self.trunk_w = store.create("head/det/trunk/w", (c, c, 3, 3), c * 9, gain=RELU_GAIN)
        self.trunk_b = store.create("head/det/trunk/b", (c,), c * 9)
        self.heat_w = store.create("head/det/heat/w", (n_det, c, 1, 1), c)
        self.heat_b = store.create_constant("head/det/heat/b", (n_det,), FOCAL_PRIOR_BIAS)
        self.reg_w = store.create("head/det/reg/w", (REGRESSION_CHANNELS, c, 1, 1), c)
        self.reg_b = store.create("head/det/reg/b", (REGRESSION_CHANNELS,), c)

    def detect(self, features: Tensor) -> DetectionRaw:
        trunk = ad.relu(ad.conv2d(features, self.trunk_w, self.trunk_b))
        heat = ad.sigmoid(ad.conv2d(trunk, self.heat_w, self.heat_b))
        reg = ad.conv2d(trunk, self.reg_w, self.reg_b)
        return DetectionRaw(heatmaps=heat, regression=reg)


class MapHead:
    """Shared 3x3 trunk, then independent sigmoid masks per map class."""

    def __init__(self, store: ParameterStore, channels: int, n_map: int):
        c = channels
        self.trunk_w = store.create("head/map/trunk/w", (c, c, 3, 3), c * 9, gain=RELU_GAIN)
        self.trunk_b = store.create("head/map/trunk/b", (c,), c * 9)
        self.out_w = store.create("head/map/out/w", (n_map, c, 1, 1), c)
        self.out_b = store.create_constant("head/map/out/b", (n_map,), FOCAL_PRIOR_BIAS)

    def segment_map(self, features: Tensor) -> Tensor:
        trunk = ad.relu(ad.conv2d(features, self.trunk_w, self.trunk_b))
        return ad.sigmoid(ad.conv2d(trunk, self.out_w, self.out_b))


class OccupancyHead:
    """Prototype-query similarity classifier over the voxel grid.

    Per-voxel logits are dot products between projected queries (one per
    semantic class, plus a learnable free-space prototype) and pointwise
    projected voxel features.
    """

    def __init__(
        self,
        store: ParameterStore,
        channels: int,
        n_classes: int,
        with_base_queries: bool = False,
    ):
        c = channels
        self.phi_w = store.create("head/occ/phi/w", (c, c, 1, 1, 1), c, gain=LINEAR_GAIN)
        self.phi_b = store.create("head/occ/phi/b", (c,), c)
        self.psi_w1 = store.create("head/occ/psi/w1", (c, c), c, gain=RELU_GAIN)
        self.psi_b1 = store.create("head/occ/psi/b1", (c,), c)
        self.psi_w2 = store.create("head/occ/psi/w2", (c, c), c, gain=LINEAR_GAIN)
        self.psi_b2 = store.create("head/occ/psi/b2", (c,), c)
        self.free_prototype = store.create("head/occ/free", (c,), c)
        # learned class queries stand in when the prototype stage is disabled
        self.base_queries = (
            store.create("head/occ/queries", (n_classes, c), c) if with_base_queries else None
        )

    def predict_occupancy(self, features: Tensor, queries: Tensor | None) -> Tensor:
        """Logits (K+1, X, Y, Z): semantic classes in query order, then free."""
        if queries is None:
            queries = self.base_queries
        c = self.free_prototype.shape[0]
        full = ad.concat([queries, ad.reshape(self.free_prototype, (1, c))], axis=0)
        h = ad.relu(ad.linear(full, self.psi_w1, self.psi_b1))
        projected = ad.linear(h, self.psi_w2, self.psi_b2)
        phi = ad.conv3d(features, self.phi_w, self.phi_b)
        return ad.dot_channels(projected, phi)


def decode_boxes(
    heatmaps: np.ndarray,
    regression: np.ndarray,
    geometry: GridGeometry,
    det_class_ids: tuple[int, ...],
    threshold: float,
    max_per_class: int = 20,
) -> list[DecodedBox]:
    """Emit one box per 3x3-neighborhood peak at or above the threshold.

    A cell wins its neighborhood when strictly larger than every neighbor,
    with equal values resolved in favor of the lexicographically smaller
    (x, y). Results are ordered by class, then descending score, then cell.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"decode threshold must be in (0, 1], got {threshold}")
    heat = np.asarray(heatmaps, dtype=np.float64)
    reg = np.asarray(regression, dtype=np.float64)
    n_det, X, Y = heat.shape
    cs = geometry.cell_size
    boxes: list[DecodedBox] = []
    for ci in range(n_det):
        h = heat[ci]
        padded = np.full((X + 2, Y + 2), -np.inf)
        padded[1 : X + 1, 1 : Y + 1] = h
        keep = h >= threshold
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                shifted = padded[1 + di : 1 + di + X, 1 + dj : 1 + dj + Y]
                if di > 0 or (di == 0 and dj > 0):
                    keep &= h >= shifted  # we precede the neighbor on ties
                else:
                    keep &= h > shifted
        cells = np.argwhere(keep)
        scored = sorted(
            ((float(h[i, j]), int(i), int(j)) for i, j in cells),
            key=lambda t: (-t[0], t[1], t[2]),
        )[:max_per_class]
        for score, i, j in scored:
            dx, dy, logw, logl, sy, cy = reg[:, i, j]
            center = (
                geometry.origin[0] + (i + 0.5 + dx) * cs,
                geometry.origin[1] + (j + 0.5 + dy) * cs,
            )
            size = (float(np.exp(logw)) * cs, float(np.exp(logl)) * cs)
            yaw = float(np.arctan2(sy, cy))
            boxes.append(
                DecodedBox(
                    class_index=ci,
                    class_id=det_class_ids[ci],
                    score=score,
                    box=Box(det_class_ids[ci], center, size, yaw),
                )
            )
    return boxes
