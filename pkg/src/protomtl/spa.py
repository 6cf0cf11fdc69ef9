"""Scene prototype aggregation for the occupancy decoder.

Detection prototypes come from RoIAlign over predicted boxes; map
prototypes from masked pooling over predicted segmentation. Both are
merged into the occupancy prototype group: one contributor is summed
directly, several contributors are averaged first.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cpg import PrototypeGroup
from .errors import ConfigError
from .scene import Box, ClassTaxonomy, GridGeometry, MapClassSpec

ROI_ALIGN_LATTICE = 3  # default sample lattice per box side


@dataclass(frozen=True)
class CorrespondenceTable:
    """Contributors per occupancy group member, in group order.

    Each entry is a list of (source, index) pairs where source is "det"
    (detection class index) or "map" (map class index).
    """

    entries: tuple[tuple[tuple[str, int], ...], ...]

    def validate(self, n_members: int, n_det: int, n_map: int) -> None:
        if len(self.entries) != n_members:
            raise ConfigError(
                f"correspondence table has {len(self.entries)} entries "
                f"for {n_members} group members"
            )
        for contributors in self.entries:
            for source, idx in contributors:
                limit = {"det": n_det, "map": n_map}.get(source)
                if limit is None:
                    raise ConfigError(f"unknown prototype source {source!r}")
                if not 0 <= idx < limit:
                    raise ConfigError(f"contributor index {idx} out of range for {source}")


def default_correspondence(
    taxonomy: ClassTaxonomy, map_classes: tuple[MapClassSpec, ...]
) -> CorrespondenceTable:
    """Foreground <- same detection class; background <- its map classes."""
    entries: list[tuple[tuple[str, int], ...]] = []
    for i, _ in enumerate(taxonomy.foreground_ids):
        entries.append((("det", i),))
    for bg_id in taxonomy.background_ids:
        feeders = tuple(
            ("map", m) for m, spec in enumerate(map_classes) if spec.bg_class_id == bg_id
        )
        entries.append(feeders)
    return CorrespondenceTable(tuple(entries))


def _box_lattice(box: Box, geometry: GridGeometry, out_h: int, out_w: int):
    """Continuous grid coordinates of a regular sample lattice in the box."""
    lx = ((np.arange(out_h) + 0.5) / out_h - 0.5) * box.size_wl[0]
    ly = ((np.arange(out_w) + 0.5) / out_w - 0.5) * box.size_wl[1]
    lxg, lyg = np.meshgrid(lx, ly, indexing="ij")
    cos, sin = np.cos(box.yaw), np.sin(box.yaw)
    wx = box.center_xy[0] + cos * lxg - sin * lyg
    wy = box.center_xy[1] + sin * lxg + cos * lyg
    gx = (wx - geometry.origin[0]) / geometry.cell_size - 0.5
    gy = (wy - geometry.origin[1]) / geometry.cell_size - 0.5
    return gx.ravel(), gy.ravel()


_FAR_OUTSIDE = 1e12  # clip lattice coordinates; anything this far samples zero


def _bilinear_batch(features: Tensor, gx: np.ndarray, gy: np.ndarray) -> Tensor:
    """Zero-padded bilinear samples at continuous grid points: (C, n)."""
    c, X, Y = features.shape
    n = gx.size
    # non-finite or absurd points (e.g. boxes decoded from wild regression
    # outputs) land far outside and sample zero under the padding convention
    gx = np.nan_to_num(gx, nan=_FAR_OUTSIDE, posinf=_FAR_OUTSIDE, neginf=-_FAR_OUTSIDE)
    gy = np.nan_to_num(gy, nan=_FAR_OUTSIDE, posinf=_FAR_OUTSIDE, neginf=-_FAR_OUTSIDE)
    gx = np.clip(gx, -_FAR_OUTSIDE, _FAR_OUTSIDE)
    gy = np.clip(gy, -_FAR_OUTSIDE, _FAR_OUTSIDE)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx, fy = gx - x0, gy - y0
    total = None
    for dx, wx_frac in ((0, 1.0 - fx), (1, fx)):
        for dy, wy_frac in ((0, 1.0 - fy), (1, fy)):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < X) & (yi >= 0) & (yi < Y)
            weight = wx_frac * wy_frac * inside
            flat = np.clip(xi, 0, X - 1) * Y + np.clip(yi, 0, Y - 1)
            idx = np.arange(c)[:, None] * (X * Y) + flat[None, :]
            corner = ad.mul(
                ad.take(features, idx),
                ad.constant(np.broadcast_to(weight, (c, n)).copy()),
            )
            total = corner if total is None else ad.add(total, corner)
    return total


def roi_align_bev(
    features: Tensor,
    box: Box,
    geometry: GridGeometry,
    out_h: int = ROI_ALIGN_LATTICE,
    out_w: int = ROI_ALIGN_LATTICE,
) -> Tensor:
    """Bilinear samples on a regular lattice inside a rotated BEV box.

    Returns (C, out_h, out_w). Samples outside the grid use zero padding.
    """
    if min(box.size_wl) <= 0:
        raise ValueError(f"roi_align_bev: box sizes must be positive, got {box.size_wl}")
    if out_h < 1 or out_w < 1:
        raise ValueError("roi_align_bev: output extents must be at least 1")
    gx, gy = _box_lattice(box, geometry, out_h, out_w)
    samples = _bilinear_batch(features, gx, gy)
    return ad.reshape(samples, (features.shape[0], out_h, out_w))


@dataclass
class DecodedBoxLike:
    """Minimal box view used for pooling: class index + geometry."""

    class_index: int
    box: Box


def detection_prototypes(
    features: Tensor,
    boxes: list,
    n_det: int,
    geometry: GridGeometry,
    lattice: int = ROI_ALIGN_LATTICE,
) -> Tensor:
    """Class-wise mean of RoIAligned box samples; zero rows for empty classes.

    ``boxes`` entries need ``class_index`` and ``box`` attributes. All boxes
    share one sample batch; with equal lattices per box, averaging over all
    of a class's samples equals the mean over lattice then boxes.
    """
    c = features.shape[0]
    by_class = sorted(range(len(boxes)), key=lambda i: boxes[i].class_index)
    if not by_class:
        return ad.constant(np.zeros((n_det, c)))
    gxs, gys, owners = [], [], []
    for i in by_class:
        gx, gy = _box_lattice(boxes[i].box, geometry, lattice, lattice)
        gxs.append(gx)
        gys.append(gy)
        owners.append(boxes[i].class_index)
    samples = _bilinear_batch(features, np.concatenate(gxs), np.concatenate(gys))
    per_point = lattice * lattice
    total = len(by_class) * per_point
    rows = []
    for class_index in range(n_det):
        cols = [
            np.arange(j * per_point, (j + 1) * per_point)
            for j, owner in enumerate(owners)
            if owner == class_index
        ]
        if not cols:
            rows.append(ad.constant(np.zeros((1, c))))
            continue
        cols = np.concatenate(cols)
        idx = np.arange(c)[:, None] * total + cols[None, :]
        rows.append(ad.reshape(ad.tmean(ad.take(samples, idx), axes=1), (1, c)))
    return ad.concat(rows, axis=0)


def map_prototypes(features: Tensor, probabilities: np.ndarray, threshold: float = 0.5) -> Tensor:
    """Masked mean of map features per predicted class mask.

    ``probabilities`` (N_map, X, Y) are treated as constants; the mask is
    probability >= threshold. Empty selections give zero rows.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"map threshold must be in (0, 1), got {threshold}")
    probs = np.asarray(probabilities, dtype=np.float64)
    c = features.shape[0]
    rows = []
    for m in range(probs.shape[0]):
        mask = (probs[m] >= threshold).astype(np.float64)
        count = mask.sum()
        if count == 0:
            rows.append(ad.constant(np.zeros((1, c))))
            continue
        masked = ad.scale_cells(features, ad.constant(mask))
        rows.append(ad.reshape(ad.mul(ad.tsum(masked, axes=(1, 2)), 1.0 / count), (1, c)))
    return ad.concat(rows, axis=0)


@dataclass
class ScenePrototypes:
    class_ids: tuple[int, ...]
    vectors: Tensor  # (N_fg + N_bg, C), aligned with the occupancy group


def _row(matrix: Tensor, index: int) -> Tensor:
    c = matrix.shape[1]
    return ad.take(matrix, index * c + np.arange(c))


def aggregate(
    group: PrototypeGroup,
    det_prototypes: Tensor | None,
    map_prototypes_: Tensor | None,
    table: CorrespondenceTable,
) -> ScenePrototypes:
    """Merge task-oriented prototypes into the occupancy group.

    No contributor: copy the group vector. One contributor: add it.
    Several: add their mean. Sources whose prototype matrix is None are
    skipped (prototype-removal ablations).
    """
    if len(table.entries) != group.size:
        raise ConfigError(
            f"correspondence table size {len(table.entries)} != group size {group.size}"
        )
    sources = {"det": det_prototypes, "map": map_prototypes_}
    rows = []
    c = group.vectors.shape[1]
    for i in range(group.size):
        base = _row(group.vectors, i)
        contribs = []
        for source, idx in table.entries[i]:
            matrix = sources.get(source)
            if matrix is None:
                continue
            if idx >= matrix.shape[0]:
                raise ConfigError(f"contributor index {idx} out of range for {source}")
            contribs.append(_row(matrix, idx))
        if contribs:
            acc = contribs[0]
            for v in contribs[1:]:
                acc = ad.add(acc, v)
            base = ad.add(base, ad.mul(acc, 1.0 / len(contribs)))
        rows.append(ad.reshape(base, (1, c)))
    return ScenePrototypes(group.class_ids, ad.concat(rows, axis=0))
