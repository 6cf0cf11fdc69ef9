"""Evaluation metrics: BEV map mIoU, voxel occupancy mIoU, detection AP."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .heads import DecodedBox
from .scene import Box, ClassTaxonomy


@dataclass
class MetricsReport:
    map_miou: float | None
    occ_miou: float | None
    det_map: float | None
    map_iou_per_class: list[float | None] = field(default_factory=list)
    occ_iou_per_class: dict[int, float] = field(default_factory=dict)
    det_ap_per_class: dict[int, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "map_miou": self.map_miou,
            "occ_miou": self.occ_miou,
            "det_map": self.det_map,
            "map_iou_per_class": self.map_iou_per_class,
            "occ_iou_per_class": {str(k): v for k, v in self.occ_iou_per_class.items()},
            "det_ap_per_class": {str(k): v for k, v in self.det_ap_per_class.items()},
        }

    def csv_row(self) -> dict[str, float | str]:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        return {
            "map_miou": fmt(self.map_miou),
            "occ_miou": fmt(self.occ_miou),
            "det_map": fmt(self.det_map),
        }


def map_miou(
    probabilities: np.ndarray, gt_masks: np.ndarray, threshold: float = 0.5
) -> tuple[list[float | None], float | None]:
    """Per-class IoU of thresholded masks; empty-union classes are skipped."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"map threshold must be in (0, 1), got {threshold}")
    probs = np.asarray(probabilities, dtype=np.float64)
    gt = np.asarray(gt_masks) > 0
    if probs.shape != gt.shape:
        raise ValueError(f"map_miou: prediction {probs.shape} vs gt {gt.shape}")
    pred = probs >= threshold
    per_class: list[float | None] = []
    defined = []
    for c in range(probs.shape[0]):
        union = np.logical_or(pred[c], gt[c]).sum()
        if union == 0:
            per_class.append(None)
            continue
        iou = np.logical_and(pred[c], gt[c]).sum() / union
        per_class.append(float(iou))
        defined.append(float(iou))
    mean = float(np.mean(defined)) if defined else None
    return per_class, mean


def occupancy_labels_from_logits(
    logits: np.ndarray, taxonomy: ClassTaxonomy
) -> np.ndarray:
    """Argmax over K+1 logits mapped back to class ids (free included)."""
    order = taxonomy.occupancy_order() + (taxonomy.free_label,)
    winner = np.argmax(np.asarray(logits), axis=0)
    return np.asarray(order, dtype=np.int64)[winner]


def occ_miou(
    predicted_labels: np.ndarray, gt_labels: np.ndarray, taxonomy: ClassTaxonomy
) -> tuple[dict[int, float], float | None]:
    """Per-semantic-class voxel IoU over classes present in gt or prediction.

    Free space participates in the confusion (wrongly-free voxels count
    against their class) but has no IoU of its own.
    """
    pred = np.asarray(predicted_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"occ_miou: prediction {pred.shape} vs gt {gt.shape}")
    per_class: dict[int, float] = {}
    for class_id in taxonomy.occupancy_order():
        p = pred == class_id
        g = gt == class_id
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        per_class[class_id] = float(np.logical_and(p, g).sum() / union)
    mean = float(np.mean(list(per_class.values()))) if per_class else None
    return per_class, mean


def _average_precision(matches: list[tuple[float, bool]], n_gt: int) -> float | None:
    """All-point-interpolated AP from (score, is_tp) pairs sorted by score."""
    if n_gt == 0 and not matches:
        return None
    if n_gt == 0:
        return 0.0
    if not matches:
        return 0.0
    tps = np.cumsum([1.0 if tp else 0.0 for _, tp in matches])
    fps = np.cumsum([0.0 if tp else 1.0 for _, tp in matches])
    recall = tps / n_gt
    precision = tps / (tps + fps)
    # precision envelope from the right, then sum recall increments
    env = precision.copy()
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def detection_ap(
    predictions: list[list[DecodedBox]],
    gt_boxes: list[list[Box]],
    det_class_ids: tuple[int, ...],
    distance_thresholds: tuple[float, ...],
) -> tuple[dict[int, float], float | None]:
    """Center-distance AP per class, averaged over distance thresholds.

    ``predictions`` and ``gt_boxes`` are parallel lists over scenes. Greedy
    matching walks predictions in descending score order and claims the
    nearest unmatched ground truth within the threshold.
    """
    if len(predictions) != len(gt_boxes):
        raise ValueError("detection_ap: scene counts differ")
    per_class: dict[int, float] = {}
    defined = []
    for class_id in det_class_ids:
        aps = []
        undefined = True
        for tau in distance_thresholds:
            matches: list[tuple[float, bool]] = []
            n_gt = 0
            for scene_preds, scene_gts in zip(predictions, gt_boxes):
                gts = [b for b in scene_gts if b.class_id == class_id]
                n_gt += len(gts)
                used = [False] * len(gts)
                preds = sorted(
                    (p for p in scene_preds if p.class_id == class_id),
                    key=lambda p: (-p.score, p.box.center_xy),
                )
                for p in preds:
                    best, best_d = -1, np.inf
                    for gi, g in enumerate(gts):
                        if used[gi]:
                            continue
                        d = float(
                            np.hypot(
                                p.box.center_xy[0] - g.center_xy[0],
                                p.box.center_xy[1] - g.center_xy[1],
                            )
                        )
                        if d < best_d:
                            best, best_d = gi, d
                    if best >= 0 and best_d <= tau:
                        used[best] = True
                        matches.append((p.score, True))
                    else:
                        matches.append((p.score, False))
            matches.sort(key=lambda t: -t[0])
            ap = _average_precision(matches, n_gt)
            if ap is not None:
                aps.append(ap)
                undefined = False
        if not undefined:
            per_class[class_id] = float(np.mean(aps))
            defined.append(per_class[class_id])
    mean = float(np.mean(defined)) if defined else None
    return per_class, mean


# ---------------------------------------------------------------------------
# prediction dump (written by `eval`, readable back for offline scoring)
# ---------------------------------------------------------------------------

def prediction_dump(
    boxes: list[DecodedBox], map_probs: np.ndarray, occ_labels: np.ndarray
) -> dict:
    return {
        "schema_version": 1,
        "boxes": [b.to_json() for b in boxes],
        "map_probabilities": np.asarray(map_probs).ravel().tolist(),
        "map_shape": list(np.asarray(map_probs).shape),
        "occupancy_labels": np.asarray(occ_labels).ravel().tolist(),
        "occupancy_shape": list(np.asarray(occ_labels).shape),
    }


def load_prediction_dump(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    doc["map_probabilities"] = np.asarray(doc["map_probabilities"]).reshape(
        doc["map_shape"]
    )
    doc["occupancy_labels"] = np.asarray(doc["occupancy_labels"], dtype=np.int64).reshape(
        doc["occupancy_shape"]
    )
    doc["boxes"] = [
        DecodedBox(
            class_index=-1,
            class_id=b["class_id"],
            score=b["score"],
            box=Box(b["class_id"], tuple(b["center_xy"]), tuple(b["size_wl"]), b["yaw"]),
        )
        for b in doc["boxes"]
    ]
    return doc
