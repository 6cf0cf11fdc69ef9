"""Differentiable loss primitives and the composed task losses.

All losses are scalars built from taped primitives, so every one of them
can be finite-difference checked. Probabilities are clamped before logs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericalAbort
from .heads import DetectionRaw
from .scene import Box, ClassTaxonomy, GridGeometry

PROB_CLAMP_EPS = 1e-7
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
HEATMAP_NEG_BETA = 4.0  # penalty reduction exponent around center peaks
DICE_SMOOTHING = 1.0


def _const(arr) -> Tensor:
    return ad.constant(np.asarray(arr, dtype=np.float64))


def focal_loss(
    probs: Tensor,
    targets: np.ndarray,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
    eps: float = PROB_CLAMP_EPS,
) -> Tensor:
    """Mean focal loss; targets may be binary or soft weights in [0, 1]."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != probs.shape:
        raise ad.ShapeError(f"focal_loss: targets {t.shape} vs probs {probs.shape}")
    if not 0.0 < alpha < 1.0 or gamma < 0.0:
        raise ValueError(f"focal_loss: bad alpha={alpha} gamma={gamma}")
    p = ad.clamp(probs, eps, 1.0 - eps)
    one_minus_p = ad.add(ad.neg(p), 1.0)
    pos = ad.mul(ad.mul(ad.power(one_minus_p, gamma), ad.log(p)), -alpha)
    neg = ad.mul(ad.mul(ad.power(p, gamma), ad.log(one_minus_p)), -(1.0 - alpha))
    return ad.tmean(ad.add(ad.mul(pos, _const(t)), ad.mul(neg, _const(1.0 - t))))


def _class_slice(probs: Tensor, class_index: int, flat_cells: np.ndarray) -> Tensor:
    spatial = int(np.prod(probs.shape[1:]))
    return ad.take(probs, class_index * spatial + flat_cells)


def dice_loss(
    probs: Tensor,
    targets: np.ndarray,
    valid: np.ndarray | None = None,
    smoothing: float = DICE_SMOOTHING,
) -> Tensor:
    """Smoothed Dice averaged over the leading class axis."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != probs.shape:
        raise ad.ShapeError(f"dice_loss: targets {t.shape} vs probs {probs.shape}")
    n_classes = probs.shape[0]
    cells = np.arange(int(np.prod(probs.shape[1:])))
    vm = np.ones(cells.size) if valid is None else np.asarray(valid, dtype=np.float64).ravel()
    acc = None
    for c in range(n_classes):
        pc = ad.mul(_class_slice(probs, c, cells), _const(vm))
        tc = t[c].ravel() * vm
        num = ad.add(ad.mul(ad.tsum(ad.mul(pc, _const(tc))), 2.0), smoothing)
        den = ad.add(ad.tsum(pc), float(tc.sum()) + smoothing)
        loss_c = ad.add(ad.neg(ad.div(num, den)), 1.0)
        acc = loss_c if acc is None else ad.add(acc, loss_c)
    return ad.mul(acc, 1.0 / n_classes)


def lovasz_softmax(
    probs: Tensor,
    target_indices: np.ndarray,
    valid: np.ndarray | None = None,
    frozen_perms: dict[int, np.ndarray] | None = None,
) -> Tensor:
    """Lovasz extension of the Jaccard loss over present classes.

    ``target_indices`` hold class positions along axis 0 of ``probs``.
    Sorting permutations are constants for differentiation; tests may pin
    them across perturbed evaluations via ``frozen_perms``.
    """
    idx = np.asarray(target_indices, dtype=np.int64)
    if idx.shape != probs.shape[1:]:
        raise ad.ShapeError(f"lovasz_softmax: targets {idx.shape} vs probs {probs.shape}")
    spatial = int(np.prod(probs.shape[1:]))
    if valid is None:
        flat_cells = np.arange(spatial)
    else:
        flat_cells = np.flatnonzero(np.asarray(valid).ravel())
    labels = idx.ravel()[flat_cells]
    present = np.unique(labels)
    if labels.size == 0 or present.size == 0:
        return _const(0.0)
    acc = None
    for c in present:
        pc = _class_slice(probs, int(c), flat_cells)
        is_c = (labels == c).astype(np.float64)
        errors = ad.add(ad.mul(pc, _const(1.0 - 2.0 * is_c)), _const(is_c))
        if frozen_perms is not None and int(c) in frozen_perms:
            perm = frozen_perms[int(c)]
        else:
            perm = np.argsort(-errors.data, kind="stable")
        sorted_errors = ad.take(errors, perm)
        ts = is_c[perm]
        total = ts.sum()
        intersection = total - np.cumsum(ts)
        union = total + np.cumsum(1.0 - ts)
        jaccard = 1.0 - intersection / union
        coeff = jaccard.copy()
        coeff[1:] -= jaccard[:-1]
        loss_c = ad.tsum(ad.mul(sorted_errors, _const(coeff)))
        acc = loss_c if acc is None else ad.add(acc, loss_c)
    return ad.mul(acc, 1.0 / present.size)


def cpg_loss(scores: Tensor, voxel_labels: np.ndarray, free_label: int) -> Tensor:
    """Dice + Lovasz supervision of the voxel classifier on occupied voxels."""
    labels = np.asarray(voxel_labels, dtype=np.int64)
    valid = labels != free_label
    if not valid.any():
        return _const(0.0)
    K = scores.shape[0]
    onehot = np.zeros(scores.shape)
    for k in range(K):
        onehot[k] = labels == k + 1
    class_idx = np.where(valid, labels - 1, 0)
    return ad.add(
        dice_loss(scores, onehot, valid),
        lovasz_softmax(scores, class_idx, valid),
    )


def suppression_loss(
    scores: dict[str, Tensor],
    roi_masks: dict[str, np.ndarray],
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> Tensor:
    """Focal supervision of all three suppression score maps, summed."""
    expected = ("det", "map", "occ")
    if set(scores) != set(expected) or set(roi_masks) != set(expected):
        raise ValueError(
            f"suppression_loss needs exactly tasks {expected}, "
            f"got scores={sorted(scores)} masks={sorted(roi_masks)}"
        )
    acc = None
    for task in expected:
        term = focal_loss(scores[task], roi_masks[task], alpha, gamma)
        acc = term if acc is None else ad.add(acc, term)
    return acc


# ---------------------------------------------------------------------------
# detection targets and loss
# ---------------------------------------------------------------------------

def heatmap_targets(
    gt_boxes: list[Box], geometry: GridGeometry, det_class_ids: tuple[int, ...]
) -> np.ndarray:
    """Max-combined Gaussian splats with peak 1 at each box's center cell."""
    X, Y, cs = geometry.X, geometry.Y, geometry.cell_size
    targets = np.zeros((len(det_class_ids), X, Y))
    ii, jj = np.meshgrid(np.arange(X), np.arange(Y), indexing="ij")
    for box in gt_boxes:
        ci = int(np.clip(np.floor((box.center_xy[0] - geometry.origin[0]) / cs), 0, X - 1))
        cj = int(np.clip(np.floor((box.center_xy[1] - geometry.origin[1]) / cs), 0, Y - 1))
        size_cells = max(box.size_wl) / cs
        sigma = max(1.0, size_cells / 6.0)
        gauss = np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2.0 * sigma**2))
        k = det_class_ids.index(box.class_id)
        targets[k] = np.maximum(targets[k], gauss)
    return targets


def regression_targets(
    gt_boxes: list[Box], geometry: GridGeometry
) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Center cells and the 6 regression values for each ground-truth box."""
    cs = geometry.cell_size
    cells, values = [], []
    for box in gt_boxes:
        fx = (box.center_xy[0] - geometry.origin[0]) / cs
        fy = (box.center_xy[1] - geometry.origin[1]) / cs
        ci = int(np.clip(np.floor(fx), 0, geometry.X - 1))
        cj = int(np.clip(np.floor(fy), 0, geometry.Y - 1))
        cells.append((ci, cj))
        values.append(
            [
                fx - (ci + 0.5),
                fy - (cj + 0.5),
                np.log(box.size_wl[0] / cs),
                np.log(box.size_wl[1] / cs),
                np.sin(box.yaw),
                np.cos(box.yaw),
            ]
        )
    return cells, np.asarray(values, dtype=np.float64).T.reshape(6, -1)


def det_loss(
    raw: DetectionRaw,
    gt_boxes: list[Box],
    geometry: GridGeometry,
    det_class_ids: tuple[int, ...],
    gamma: float = FOCAL_GAMMA,
    neg_beta: float = HEATMAP_NEG_BETA,
    eps: float = PROB_CLAMP_EPS,
) -> Tensor:
    """Center-heatmap focal with penalty-reduced negatives, plus L1 at
    ground-truth center cells over the 6 regression channels."""
    targets = heatmap_targets(gt_boxes, geometry, det_class_ids)
    p = ad.clamp(raw.heatmaps, eps, 1.0 - eps)
    one_minus_p = ad.add(ad.neg(p), 1.0)
    pos_mask = (targets >= 1.0).astype(np.float64)
    neg_weight = ((1.0 - targets) ** neg_beta) * (1.0 - pos_mask)
    pos = ad.mul(ad.mul(ad.power(one_minus_p, gamma), ad.log(p)), -1.0)
    neg = ad.mul(ad.mul(ad.power(p, gamma), ad.log(one_minus_p)), -1.0)
    heat_sum = ad.tsum(
        ad.add(ad.mul(pos, _const(pos_mask)), ad.mul(neg, _const(neg_weight)))
    )
    loss = ad.mul(heat_sum, 1.0 / max(1.0, pos_mask.sum()))
    if gt_boxes:
        cells, reg_targets = regression_targets(gt_boxes, geometry)
        X, Y = geometry.X, geometry.Y
        flat = []
        for ch in range(6):
            for ci, cj in cells:
                flat.append(ch * X * Y + ci * Y + cj)
        picked = ad.take(raw.regression, np.asarray(flat))
        diff = ad.sub(picked, _const(reg_targets.reshape(-1)))
        l1 = ad.tmean(ad.add(ad.relu(diff), ad.relu(ad.neg(diff))))
        loss = ad.add(loss, l1)
    return loss


def map_loss(probs: Tensor, gt_masks: np.ndarray) -> Tensor:
    """Per-class focal segmentation loss over all cells."""
    return focal_loss(probs, np.asarray(gt_masks, dtype=np.float64))


def occ_loss(
    logits: Tensor, voxel_labels: np.ndarray, taxonomy: ClassTaxonomy
) -> Tensor:
    """Mean cross-entropy plus Lovasz over K semantic classes and free."""
    order = taxonomy.occupancy_order()
    lut = np.zeros(taxonomy.K + 1, dtype=np.int64)
    lut[taxonomy.free_label] = taxonomy.K
    for pos, class_id in enumerate(order):
        lut[class_id] = pos
    target_idx = lut[np.asarray(voxel_labels, dtype=np.int64)]
    ce = ad.cross_entropy(logits, target_idx)
    lv = lovasz_softmax(ad.softmax(logits, axis=0), target_idx)
    return ad.add(ce, lv)


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------

LOSS_COMPONENTS = ("cpg", "sup", "det", "map", "occ")


@dataclass
class LossBreakdown:
    l_cpg: float
    l_sup: float
    l_det: float
    l_map: float
    l_occ: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "l_cpg": self.l_cpg,
            "l_sup": self.l_sup,
            "l_det": self.l_det,
            "l_map": self.l_map,
            "l_occ": self.l_occ,
            "total": self.total,
        }


def total_loss(components: dict[str, Tensor]) -> tuple[LossBreakdown, Tensor]:
    """Sum the five components with unit weights; abort on any NaN."""
    missing = [k for k in LOSS_COMPONENTS if k not in components]
    if missing:
        raise ValueError(f"total_loss: missing components {missing}")
    values = {}
    for name in LOSS_COMPONENTS:
        v = float(components[name].data)
        if not np.isfinite(v):
            raise NumericalAbort(f"non-finite value in loss component {name!r}: {v}")
        values[name] = v
    total = None
    for name in LOSS_COMPONENTS:
        total = components[name] if total is None else ad.add(total, components[name])
    breakdown = LossBreakdown(
        l_cpg=values["cpg"],
        l_sup=values["sup"],
        l_det=values["det"],
        l_map=values["map"],
        l_occ=values["occ"],
        total=float(total.data),
    )
    return breakdown, total
