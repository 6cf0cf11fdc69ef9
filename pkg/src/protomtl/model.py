"""Full network: shared features -> prototypes -> task branches -> heads.

The toggle set reproduces the ablation topologies: everything off leaves
each head on its own transformed view of the shared features; switching
stages on inserts prototype generation, enhancement/suppression per task,
and scene-prototype aggregation in front of the occupancy decoder.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import ParameterStore, Tensor
from .cpg import PrototypeGenerator, TaskGroups
from .errors import ConfigError
from .heads import DecodedBox, DetectionHead, DetectionRaw, MapHead, OccupancyHead, decode_boxes
from .scene import GroundTruthScene, Scene, SceneConfig, derive_roi_mask
from .spa import (
    CorrespondenceTable,
    ScenePrototypes,
    aggregate,
    default_correspondence,
    detection_prototypes,
    map_prototypes,
)
from .tsfg import BranchOutputs, TaskBranch

TASKS = ("det", "map", "occ")


@dataclass(frozen=True)
class ModelToggles:
    use_cpg: bool = True
    use_tsfg_det: bool = True
    use_tsfg_map: bool = True
    use_tsfg_occ: bool = True
    use_spa: bool = True
    spa_stop_gradient: bool = False
    tsfg_use_wise: bool = True
    tsfg_use_aware: bool = True
    tsfg_use_suppression: bool = True
    spa_use_det_prototypes: bool = True
    spa_use_map_prototypes: bool = True

    def validate(self) -> None:
        if self.use_spa and not self.use_cpg:
            raise ConfigError("use_spa requires use_cpg (aggregation needs the occ group)")
        if any((self.use_tsfg_det, self.use_tsfg_map, self.use_tsfg_occ)) and not self.use_cpg:
            raise ConfigError("task-specific feature generation requires use_cpg")

    def tsfg_for(self, task: str) -> bool:
        return {
            "det": self.use_tsfg_det,
            "map": self.use_tsfg_map,
            "occ": self.use_tsfg_occ,
        }[task]


@dataclass
class ModelOutputs:
    semantic_scores: Tensor | None
    task_groups: TaskGroups | None
    branches: dict[str, BranchOutputs]
    det_raw: DetectionRaw
    map_probs: Tensor
    occ_logits: Tensor
    decoded_boxes: list[DecodedBox]
    scene_prototypes: ScenePrototypes | None


class PerceptionModel:
    def __init__(
        self,
        scene_config: SceneConfig,
        toggles: ModelToggles = ModelToggles(),
        param_seed: int = 0,
        decode_threshold: float = 0.4,
        map_threshold: float = 0.5,
        max_boxes_per_class: int = 8,
        correspondence: CorrespondenceTable | None = None,
        loss_clamp_eps: float = L.PROB_CLAMP_EPS,
    ):
        toggles.validate()
        self.scene_config = scene_config
        self.toggles = toggles
        self.decode_threshold = decode_threshold
        self.map_threshold = map_threshold
        self.max_boxes_per_class = max_boxes_per_class
        self.loss_clamp_eps = loss_clamp_eps
        tax = scene_config.taxonomy
        c = scene_config.channels
        self.det_class_ids = tax.foreground_ids
        self.store = ParameterStore(param_seed)

        self.cpg = PrototypeGenerator(self.store, tax, c) if toggles.use_cpg else None
        group_sizes = {"det": tax.n_fg, "map": tax.n_bg, "occ": tax.K}
        self.branches = {
            task: TaskBranch(
                self.store,
                task,
                c,
                scene_config.geometry.Z,
                group_sizes[task],
                enhancement=toggles.tsfg_for(task),
                use_wise=toggles.tsfg_use_wise,
                use_aware=toggles.tsfg_use_aware,
                use_suppression=toggles.tsfg_use_suppression,
            )
            for task in TASKS
        }
        self.det_head = DetectionHead(self.store, c, tax.n_fg)
        self.map_head = MapHead(self.store, c, scene_config.n_map)
        self.occ_head = OccupancyHead(
            self.store, c, tax.K, with_base_queries=not toggles.use_cpg
        )
        self.correspondence = correspondence or default_correspondence(
            tax, scene_config.map_classes
        )

    def parameters(self):
        return self.store.parameters()

    def zero_grad(self) -> None:
        self.store.zero_grad()

    # ------------------------------------------------------------------

    def forward(self, features: np.ndarray | Tensor) -> ModelOutputs:
        feats = features if isinstance(features, Tensor) else ad.constant(features)
        toggles = self.toggles

        semantic_scores, groups = None, None
        if self.cpg is not None:
            semantic_scores, _, groups = self.cpg.run(feats)

        branches: dict[str, BranchOutputs] = {}
        for task in TASKS:
            group = None
            if groups is not None and toggles.tsfg_for(task):
                group = groups.for_task(task)
            branches[task] = self.branches[task].forward(feats, group)

        det_raw = self.det_head.detect(branches["det"].task_specific)
        map_probs = self.map_head.segment_map(branches["map"].task_specific)

        decoded = decode_boxes(
            det_raw.heatmaps.data,
            det_raw.regression.data,
            self.scene_config.geometry,
            self.det_class_ids,
            self.decode_threshold,
            self.max_boxes_per_class,
        )

        scene_protos = None
        queries = None
        if toggles.use_spa:
            p_det = None
            if toggles.spa_use_det_prototypes:
                p_det = detection_prototypes(
                    branches["det"].task_specific,
                    decoded,
                    len(self.det_class_ids),
                    self.scene_config.geometry,
                )
                if toggles.spa_stop_gradient:
                    p_det = ad.detach(p_det)
            p_map = None
            if toggles.spa_use_map_prototypes:
                p_map = map_prototypes(
                    branches["map"].task_specific, map_probs.data, self.map_threshold
                )
                if toggles.spa_stop_gradient:
                    p_map = ad.detach(p_map)
            scene_protos = aggregate(groups.occ, p_det, p_map, self.correspondence)
            queries = scene_protos.vectors
        elif groups is not None:
            queries = groups.occ.vectors

        occ_logits = self.occ_head.predict_occupancy(branches["occ"].task_specific, queries)

        return ModelOutputs(
            semantic_scores=semantic_scores,
            task_groups=groups,
            branches=branches,
            det_raw=det_raw,
            map_probs=map_probs,
            occ_logits=occ_logits,
            decoded_boxes=decoded,
            scene_prototypes=scene_protos,
        )

    # ------------------------------------------------------------------

    def compute_losses(self, outputs: ModelOutputs, gt: GroundTruthScene) -> dict[str, Tensor]:
        cfg = self.scene_config
        tax = cfg.taxonomy
        components: dict[str, Tensor] = {}

        if outputs.semantic_scores is not None:
            components["cpg"] = L.cpg_loss(
                outputs.semantic_scores, gt.voxel_labels, tax.free_label
            )
        else:
            components["cpg"] = ad.constant(0.0)

        supp_scores = {
            task: b.suppression for task, b in outputs.branches.items() if b.suppression is not None
        }
        if set(supp_scores) == set(TASKS):
            roi = {t: derive_roi_mask(gt, t, cfg).mask for t in TASKS}
            components["sup"] = L.suppression_loss(supp_scores, roi)
        elif supp_scores:
            acc = None
            for task in TASKS:
                if task not in supp_scores:
                    continue
                mask = derive_roi_mask(gt, task, cfg).mask
                term = L.focal_loss(supp_scores[task], mask, eps=self.loss_clamp_eps)
                acc = term if acc is None else ad.add(acc, term)
            components["sup"] = acc
        else:
            components["sup"] = ad.constant(0.0)

        components["det"] = L.det_loss(
            outputs.det_raw,
            gt.boxes,
            cfg.geometry,
            self.det_class_ids,
            eps=self.loss_clamp_eps,
        )
        components["map"] = L.map_loss(outputs.map_probs, gt.map_masks)
        components["occ"] = L.occ_loss(outputs.occ_logits, gt.voxel_labels, tax)
        return components

    # ------------------------------------------------------------------

    def predict(self, scene: Scene) -> dict:
        """Inference without a tape: decoded boxes, map probs, occ labels."""
        outputs = self.forward(scene.features)
        order = self.scene_config.taxonomy.occupancy_order() + (
            self.scene_config.taxonomy.free_label,
        )
        winner = np.argmax(outputs.occ_logits.data, axis=0)
        occ_labels = np.asarray(order, dtype=np.int64)[winner]
        return {
            "boxes": outputs.decoded_boxes,
            "map_probs": outputs.map_probs.data.copy(),
            "occ_labels": occ_labels,
        }
