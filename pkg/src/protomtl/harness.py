"""Training loop, experiment runner, and the ablation comparison matrix."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .errors import ConfigError, NumericalAbort
from .losses import LossBreakdown, total_loss
from .metrics import MetricsReport, detection_ap, map_miou, occ_miou
from .model import ModelToggles, PerceptionModel
from .optim import AdamW
from .scene import (
    ClassTaxonomy,
    GridGeometry,
    MapClassSpec,
    Scene,
    SceneConfig,
    synthesize_scene,
)
from .spa import CorrespondenceTable

CONFIG_SCHEMA_VERSION = 1
TRAIN_SEED_OFFSET = 1_000_000
VAL_SEED_OFFSET = 9_000_000


@dataclass
class TrainConfig:
    label: str = "experiment"
    seed: int = 0
    epochs: int = 6
    batch_size: int = 4
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    train_scenes: int = 96
    val_scenes: int = 24
    toggles: ModelToggles = field(default_factory=ModelToggles)
    decode_threshold: float = 0.4
    map_threshold: float = 0.5
    max_boxes_per_class: int = 8
    grad_abort_norm: float = 1e6
    prob_clamp_eps: float = 1e-7
    correspondence: CorrespondenceTable | None = None  # None: derived default
    scene: SceneConfig = field(default_factory=SceneConfig)

    def validate(self) -> None:
        self.toggles.validate()
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch size >= 1")
        if self.train_scenes < 1 or self.val_scenes < 1:
            raise ConfigError("need at least one train and one validation scene")
        if not 0.0 < self.decode_threshold <= 1.0:
            raise ConfigError(f"decode threshold {self.decode_threshold} outside (0, 1]")
        if not 0.0 < self.map_threshold < 1.0:
            raise ConfigError(f"map threshold {self.map_threshold} outside (0, 1)")

    # -- serialization ---------------------------------------------------

    def to_json(self) -> dict:
        scene = self.scene
        doc = {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "label": self.label,
            "seed": self.seed,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "train_scenes": self.train_scenes,
            "val_scenes": self.val_scenes,
            "toggles": asdict(self.toggles),
            "decode_threshold": self.decode_threshold,
            "map_threshold": self.map_threshold,
            "max_boxes_per_class": self.max_boxes_per_class,
            "grad_abort_norm": self.grad_abort_norm,
            "prob_clamp_eps": self.prob_clamp_eps,
            "correspondence": (
                [list(map(list, entry)) for entry in self.correspondence.entries]
                if self.correspondence is not None
                else None
            ),
            "scene": {
                "channels": scene.channels,
                "noise_sigma": scene.noise_sigma,
                "signature_seed": scene.signature_seed,
                "signature_scale": scene.signature_scale,
                "box_count_range": list(scene.box_count_range),
                "box_size_range_cells": list(scene.box_size_range_cells),
                "box_z_levels": list(scene.box_z_levels),
                "band_width_range_cells": list(scene.band_width_range_cells),
                "geometry": {
                    "X": scene.geometry.X,
                    "Y": scene.geometry.Y,
                    "Z": scene.geometry.Z,
                    "cell_size": scene.geometry.cell_size,
                    "origin": list(scene.geometry.origin),
                },
                "taxonomy": {
                    "foreground_ids": list(scene.taxonomy.foreground_ids),
                    "background_ids": list(scene.taxonomy.background_ids),
                    "names": {str(k): v for k, v in scene.taxonomy.names.items()},
                    "free_label": scene.taxonomy.free_label,
                },
                "map_classes": [
                    {"name": s.name, "bg_class_id": s.bg_class_id}
                    for s in scene.map_classes
                ],
            },
        }
        return doc

    @staticmethod
    def from_json(doc: dict) -> "TrainConfig":
        version = doc.get("schema_version")
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(
                f"config schema_version {version} != supported {CONFIG_SCHEMA_VERSION}"
            )
        s = doc["scene"]
        tax = ClassTaxonomy(
            foreground_ids=tuple(s["taxonomy"]["foreground_ids"]),
            background_ids=tuple(s["taxonomy"]["background_ids"]),
            names={int(k): v for k, v in s["taxonomy"]["names"].items()},
            free_label=s["taxonomy"]["free_label"],
        )
        geom = GridGeometry(
            X=s["geometry"]["X"],
            Y=s["geometry"]["Y"],
            Z=s["geometry"]["Z"],
            cell_size=s["geometry"]["cell_size"],
            origin=tuple(s["geometry"]["origin"]),
        )
        scene = SceneConfig(
            taxonomy=tax,
            geometry=geom,
            channels=s["channels"],
            map_classes=tuple(
                MapClassSpec(m["name"], m["bg_class_id"]) for m in s["map_classes"]
            ),
            box_count_range=tuple(s["box_count_range"]),
            box_size_range_cells=tuple(s["box_size_range_cells"]),
            box_z_levels=tuple(s["box_z_levels"]),
            band_width_range_cells=tuple(s["band_width_range_cells"]),
            noise_sigma=s["noise_sigma"],
            signature_seed=s["signature_seed"],
            signature_scale=s["signature_scale"],
        )
        corr = doc.get("correspondence")
        table = (
            CorrespondenceTable(
                tuple(tuple((src, int(i)) for src, i in entry) for entry in corr)
            )
            if corr is not None
            else None
        )
        return TrainConfig(
            label=doc["label"],
            seed=doc["seed"],
            epochs=doc["epochs"],
            batch_size=doc["batch_size"],
            learning_rate=doc["learning_rate"],
            weight_decay=doc["weight_decay"],
            train_scenes=doc["train_scenes"],
            val_scenes=doc["val_scenes"],
            toggles=ModelToggles(**doc["toggles"]),
            decode_threshold=doc["decode_threshold"],
            map_threshold=doc["map_threshold"],
            max_boxes_per_class=doc["max_boxes_per_class"],
            grad_abort_norm=doc["grad_abort_norm"],
            prob_clamp_eps=doc["prob_clamp_eps"],
            correspondence=table,
            scene=scene,
        )

    def fingerprint(self) -> str:
        doc = self.to_json()
        doc.pop("label")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def scene_fingerprint(self) -> str:
        blob = json.dumps(self.to_json()["scene"], sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def load_config(path: str | Path) -> TrainConfig:
    cfg = TrainConfig.from_json(json.loads(Path(path).read_text()))
    cfg.validate()
    return cfg


def save_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_json(), indent=1))


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

def train_scene_seed(config: TrainConfig, index: int) -> int:
    return config.seed + TRAIN_SEED_OFFSET + index


def val_scene_seed(config: TrainConfig, index: int) -> int:
    return config.seed + VAL_SEED_OFFSET + index


class Trainer:
    def __init__(self, config: TrainConfig):
        config.validate()
        self.config = config
        self.model = PerceptionModel(
            config.scene,
            config.toggles,
            param_seed=config.seed,
            decode_threshold=config.decode_threshold,
            map_threshold=config.map_threshold,
            max_boxes_per_class=config.max_boxes_per_class,
            correspondence=config.correspondence,
            loss_clamp_eps=config.prob_clamp_eps,
        )
        self.optimizer = AdamW(
            self.model.parameters(),
            lr=config.learning_rate,
            weight_decay=config.weight_decay,
        )
        self.step_count = 0

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.config.train_scenes / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.config.epochs

    def _train_scene(self, index: int) -> Scene:
        return synthesize_scene(self.config.scene, train_scene_seed(self.config, index))

    def train_step(self) -> tuple[LossBreakdown, float]:
        """One batch: forward, averaged losses, backward, AdamW update."""
        cfg = self.config
        batch = [
            (self.step_count * cfg.batch_size + j) % cfg.train_scenes
            for j in range(cfg.batch_size)
        ]
        with Tape() as tape:
            sums = None
            for index in batch:
                scene = self._train_scene(index)
                outputs = self.model.forward(scene.features)
                comps = self.model.compute_losses(outputs, scene.gt)
                if sums is None:
                    sums = comps
                else:
                    sums = {k: ad.add(sums[k], comps[k]) for k in comps}
            avg = {k: ad.mul(v, 1.0 / cfg.batch_size) for k, v in sums.items()}
            breakdown, total = total_loss(avg)
        self.model.zero_grad()
        tape.backward(total, np.float64(1.0))
        grad_norm = self.optimizer.grad_norm()
        if not np.isfinite(grad_norm) or grad_norm > cfg.grad_abort_norm:
            raise NumericalAbort(
                f"gradient norm {grad_norm:.3e} exceeds abort threshold "
                f"{cfg.grad_abort_norm:.3e} at step {self.step_count}"
            )
        self.optimizer.step()
        self.step_count += 1
        return breakdown, grad_norm

    # -- checkpointing ---------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        arrays = dict(self.model.store.state_arrays())
        arrays.update(self.optimizer.state_arrays())
        header = {
            "kind": "trainer",
            "fingerprint": self.config.fingerprint(),
            "step": self.step_count,
            "optimizer_step": self.optimizer.step_count,
            "config": self.config.to_json(),
        }
        save_arrays(path, header, arrays)

    def load_checkpoint(self, path: str | Path) -> None:
        header, arrays = load_arrays(path)
        saved_tax = header["config"]["scene"]["taxonomy"]
        mine = self.config.to_json()["scene"]["taxonomy"]
        if saved_tax != mine:
            raise CheckpointError(
                f"checkpoint taxonomy {saved_tax} does not match model taxonomy {mine}"
            )
        params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
        self.model.store.load_state(params)
        self.optimizer.load_state(arrays, header["optimizer_step"])
        self.step_count = int(header["step"])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_model(model: PerceptionModel, config: TrainConfig) -> MetricsReport:
    """Metrics over the validation split (aggregated across scenes)."""
    scene_cfg = config.scene
    map_preds, map_gts = [], []
    occ_preds, occ_gts = [], []
    det_preds, det_gts = [], []
    for i in range(config.val_scenes):
        scene = synthesize_scene(scene_cfg, val_scene_seed(config, i))
        pred = model.predict(scene)
        map_preds.append(pred["map_probs"])
        map_gts.append(scene.gt.map_masks)
        occ_preds.append(pred["occ_labels"])
        occ_gts.append(scene.gt.voxel_labels)
        det_preds.append(pred["boxes"])
        det_gts.append(scene.gt.boxes)
    map_per_class, map_mean = map_miou(
        np.concatenate(map_preds, axis=1),
        np.concatenate(map_gts, axis=1),
        config.map_threshold,
    )
    occ_per_class, occ_mean = occ_miou(
        np.concatenate(occ_preds, axis=0),
        np.concatenate(occ_gts, axis=0),
        scene_cfg.taxonomy,
    )
    cell = scene_cfg.geometry.cell_size
    det_per_class, det_mean = detection_ap(
        det_preds, det_gts, scene_cfg.taxonomy.foreground_ids, (cell, 2.0 * cell)
    )
    return MetricsReport(
        map_miou=map_mean,
        occ_miou=occ_mean,
        det_map=det_mean,
        map_iou_per_class=map_per_class,
        occ_iou_per_class=occ_per_class,
        det_ap_per_class=det_per_class,
    )


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    label: str
    seed: int
    fingerprint: str
    epoch_trajectory: list[dict]
    step_records: list[dict]
    metrics: MetricsReport
    wall_seconds: float

    def summary(self) -> dict:
        return {
            "label": self.label,
            "seed": self.seed,
            "fingerprint": self.fingerprint,
            "epochs": len(self.epoch_trajectory),
            "final_total": (
                self.epoch_trajectory[-1]["total"] if self.epoch_trajectory else None
            ),
            "initial_total": (
                self.epoch_trajectory[0]["total"] if self.epoch_trajectory else None
            ),
            "metrics": self.metrics.as_dict(),
            "wall_seconds": self.wall_seconds,
        }


def run_experiment(
    config: TrainConfig, outdir: str | Path | None = None, resume: bool = False
) -> ExperimentResult:
    """Train one config, evaluate on the validation split, write artifacts."""
    start = time.time()
    trainer = Trainer(config)
    out = Path(outdir) if outdir is not None else None
    log_records: list[dict] = []
    log_path = ckpt_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(config, out / "config.json")
        log_path = out / "log.jsonl"
        ckpt_path = out / "checkpoint.ckpt"
        if resume and ckpt_path.exists():
            trainer.load_checkpoint(ckpt_path)
            if log_path.exists():
                kept = [
                    json.loads(line)
                    for line in log_path.read_text().splitlines()
                    if line.strip()
                ]
                log_records = [r for r in kept if r["step"] < trainer.step_count]

    while trainer.step_count < trainer.total_steps:
        breakdown, grad_norm = trainer.train_step()
        record = {
            "step": trainer.step_count - 1,
            "epoch": (trainer.step_count - 1) // trainer.steps_per_epoch,
            "grad_norm": grad_norm,
            **breakdown.as_dict(),
        }
        log_records.append(record)

    trajectory = []
    for epoch in range(config.epochs):
        rows = [r for r in log_records if r["epoch"] == epoch]
        if not rows:
            continue
        trajectory.append(
            {
                "epoch": epoch,
                **{
                    key: float(np.mean([r[key] for r in rows]))
                    for key in ("l_cpg", "l_sup", "l_det", "l_map", "l_occ", "total")
                },
            }
        )

    metrics = evaluate_model(trainer.model, config)
    result = ExperimentResult(
        label=config.label,
        seed=config.seed,
        fingerprint=config.fingerprint(),
        epoch_trajectory=trajectory,
        step_records=log_records,
        metrics=metrics,
        wall_seconds=time.time() - start,
    )
    if out is not None:
        log_path.write_text("".join(json.dumps(r) + "\n" for r in log_records))
        trainer.save_checkpoint(ckpt_path)
        (out / "metrics.json").write_text(json.dumps(metrics.as_dict(), indent=1))
        with (out / "metrics.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["map_miou", "occ_miou", "det_map"])
            writer.writeheader()
            writer.writerow(metrics.csv_row())
        (out / "result.json").write_text(json.dumps(result.summary(), indent=1))
    return result


# ---------------------------------------------------------------------------
# comparison matrices
# ---------------------------------------------------------------------------

def preset_matrix(name: str, base: TrainConfig) -> list[TrainConfig]:
    """Toggle rows for the standard ablation tables."""
    off = ModelToggles(
        use_cpg=False,
        use_tsfg_det=False,
        use_tsfg_map=False,
        use_tsfg_occ=False,
        use_spa=False,
    )
    if name == "main":
        rows = [
            ("baseline", off),
            ("cpg", replace(off, use_cpg=True)),
            ("cpg+tsfg_det", replace(off, use_cpg=True, use_tsfg_det=True)),
            ("cpg+tsfg_map", replace(off, use_cpg=True, use_tsfg_map=True)),
            ("cpg+tsfg_occ", replace(off, use_cpg=True, use_tsfg_occ=True)),
            (
                "cpg+tsfg_all",
                replace(
                    off,
                    use_cpg=True,
                    use_tsfg_det=True,
                    use_tsfg_map=True,
                    use_tsfg_occ=True,
                ),
            ),
            ("full", ModelToggles()),
        ]
    elif name == "tsfg":
        tsfg_on = replace(
            off, use_cpg=True, use_tsfg_det=True, use_tsfg_map=True, use_tsfg_occ=True
        )
        rows = [
            ("cpg_only", replace(off, use_cpg=True)),
            (
                "wise",
                replace(tsfg_on, tsfg_use_wise=True, tsfg_use_aware=False, tsfg_use_suppression=False),
            ),
            (
                "wise+aware",
                replace(tsfg_on, tsfg_use_wise=True, tsfg_use_aware=True, tsfg_use_suppression=False),
            ),
            ("wise+aware+suppression", tsfg_on),
        ]
    elif name == "spa":
        # removals are cumulative: the final row drops both prototype sources
        rows = [
            ("full", ModelToggles()),
            ("no_map_prototypes", ModelToggles(spa_use_map_prototypes=False)),
            (
                "no_det_prototypes",
                ModelToggles(spa_use_map_prototypes=False, spa_use_det_prototypes=False),
            ),
        ]
    else:
        raise ConfigError(f"unknown preset matrix {name!r} (use main, tsfg, or spa)")
    return [replace(base, label=label, toggles=toggles) for label, toggles in rows]


def expand_seeds(configs: list[TrainConfig], seeds: list[int]) -> list[TrainConfig]:
    return [replace(c, seed=s) for c in configs for s in seeds]


def compare(
    configs: list[TrainConfig], outdir: str | Path | None = None
) -> tuple[list[dict], str]:
    """Run a toggle matrix, average over seeds, and emit an aligned CSV.

    Configs must differ only in label, seed, and toggles.
    """
    if not configs:
        raise ConfigError("compare needs at least one config")
    reference = configs[0]
    ref_doc = reference.to_json()
    for cfg in configs[1:]:
        doc = cfg.to_json()
        for key in ("label", "seed", "toggles"):
            doc.pop(key)
        ref = dict(ref_doc)
        for key in ("label", "seed", "toggles"):
            ref.pop(key)
        if doc != ref:
            raise ConfigError(
                f"compare: config {cfg.label!r} differs from {reference.label!r} "
                "beyond label/seed/toggles"
            )

    groups: dict[tuple, dict] = {}
    order: list[tuple] = []
    for cfg in configs:
        key = tuple(sorted(asdict(cfg.toggles).items()))
        if key not in groups:
            groups[key] = {"label": cfg.label, "toggles": cfg.toggles, "results": []}
            order.append(key)
        subdir = None
        if outdir is not None:
            subdir = Path(outdir) / f"run_{cfg.label}_seed{cfg.seed}"
        groups[key]["results"].append(run_experiment(cfg, subdir))

    def _mean(values):
        vals = [v for v in values if v is not None]
        return float(np.mean(vals)) if vals else None

    rows = []
    for key in order:
        g = groups[key]
        results = g["results"]
        row = {
            "label": g["label"],
            "seeds": len(results),
            **{f"toggle_{k}": v for k, v in sorted(asdict(g["toggles"]).items())},
            "map_miou": _mean([r.metrics.map_miou for r in results]),
            "occ_miou": _mean([r.metrics.occ_miou for r in results]),
            "det_map": _mean([r.metrics.det_map for r in results]),
            "final_total_loss": _mean(
                [r.epoch_trajectory[-1]["total"] for r in results if r.epoch_trajectory]
            ),
        }
        rows.append(row)
    base = rows[0]
    for row in rows:
        for key in ("map_miou", "occ_miou", "det_map"):
            if row[key] is None or base[key] is None:
                row[f"delta_{key}"] = None
            else:
                row[f"delta_{key}"] = row[key] - base[key]

    fieldnames = list(rows[0].keys())
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    csv_text = buf.getvalue()
    if outdir is not None:
        Path(outdir).mkdir(parents=True, exist_ok=True)
        (Path(outdir) / "comparison.csv").write_text(csv_text)
    return rows, csv_text
