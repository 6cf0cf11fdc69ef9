"""Synthetic voxel scenes: taxonomy, geometry, ground truth, and features.

A scene couples a labeled voxel grid (boxes above ground, map bands on the
ground layer, free space elsewhere) with shared voxel features built from
per-class signature vectors plus Gaussian noise. Everything is a pure
function of (config, seed).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

FREE_LABEL = 0
SCENE_DUMP_VERSION = 1


@dataclass(frozen=True)
class ClassTaxonomy:
    """Semantic ids 1..K split into foreground and background groups."""

    foreground_ids: tuple[int, ...]
    background_ids: tuple[int, ...]
    names: dict[int, str]
    free_label: int = FREE_LABEL

    def __post_init__(self):
        fg, bg = set(self.foreground_ids), set(self.background_ids)
        if fg & bg:
            raise ConfigError(f"foreground/background overlap: {sorted(fg & bg)}")
        if not fg or not bg:
            raise ConfigError("need at least one foreground and one background class")
        ids = fg | bg
        if ids != set(range(1, len(ids) + 1)):
            raise ConfigError(f"class ids must cover 1..K, got {sorted(ids)}")
        if self.free_label in ids:
            raise ConfigError("free label collides with a semantic class id")

    @property
    def K(self) -> int:
        return len(self.foreground_ids) + len(self.background_ids)

    @property
    def n_fg(self) -> int:
        return len(self.foreground_ids)

    @property
    def n_bg(self) -> int:
        return len(self.background_ids)

    def occupancy_order(self) -> tuple[int, ...]:
        """Class order used everywhere a joint fg+bg axis appears."""
        return self.foreground_ids + self.background_ids


@dataclass(frozen=True)
class GridGeometry:
    X: int
    Y: int
    Z: int
    cell_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if min(self.X, self.Y, self.Z) < 2:
            raise ConfigError("grid extents must be at least 2 cells")
        if self.cell_size <= 0:
            raise ConfigError("cell size must be positive")

    def cell_centers_xy(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.origin[0] + (np.arange(self.X) + 0.5) * self.cell_size
        ys = self.origin[1] + (np.arange(self.Y) + 0.5) * self.cell_size
        return xs, ys


@dataclass(frozen=True)
class Box:
    """BEV box: local x-axis points along ``yaw``; sizes are full extents."""

    class_id: int
    center_xy: tuple[float, float]
    size_wl: tuple[float, float]
    yaw: float


@dataclass
class GroundTruthScene:
    voxel_labels: np.ndarray  # (X, Y, Z) ints in {1..K} | {free}
    map_masks: np.ndarray  # (N_map, X, Y) binary
    boxes: list[Box]
    metadata: dict = field(default_factory=dict)


@dataclass
class Scene:
    features: np.ndarray  # (C, X, Y, Z) float64
    gt: GroundTruthScene
    seed: int


@dataclass
class RoIMask:
    task: str  # "det" | "map" | "occ"
    mask: np.ndarray


def default_taxonomy() -> ClassTaxonomy:
    return ClassTaxonomy(
        foreground_ids=(1, 2, 3, 4),
        background_ids=(5, 6, 7, 8),
        names={
            1: "car",
            2: "truck",
            3: "pedestrian",
            4: "bicycle",
            5: "drivable_surface",
            6: "sidewalk",
            7: "manmade",
            8: "vegetation",
        },
    )


@dataclass(frozen=True)
class MapClassSpec:
    """One BEV map class and the background class it belongs to."""

    name: str
    bg_class_id: int


def default_map_classes() -> tuple[MapClassSpec, ...]:
    # The last background class is fed by two map classes so that the
    # average-then-sum aggregation rule is exercised by default.
    return (
        MapClassSpec("drivable_surface", 5),
        MapClassSpec("sidewalk", 6),
        MapClassSpec("manmade", 7),
        MapClassSpec("vegetation", 8),
        MapClassSpec("terrain", 8),
    )


@dataclass
class SceneConfig:
    taxonomy: ClassTaxonomy = field(default_factory=default_taxonomy)
    geometry: GridGeometry = field(default_factory=lambda: GridGeometry(32, 32, 4))
    channels: int = 16
    map_classes: tuple[MapClassSpec, ...] = field(default_factory=default_map_classes)
    box_count_range: tuple[int, int] = (1, 4)
    box_size_range_cells: tuple[float, float] = (2.0, 6.0)
    box_z_levels: tuple[int, int] = (1, 3)  # half-open cell range above ground
    band_width_range_cells: tuple[int, int] = (3, 8)
    noise_sigma: float = 0.8
    signature_seed: int = 7
    signature_scale: float = 1.0
    signatures: np.ndarray | None = None  # (K+1, C); row 0 is the free signature

    def __post_init__(self):
        if self.channels < 4:
            raise ConfigError("at least 4 feature channels are required")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be non-negative")
        if self.box_count_range[0] < 0 or self.box_count_range[0] > self.box_count_range[1]:
            raise ConfigError(f"bad box count range {self.box_count_range}")
        if self.box_size_range_cells[0] < 2.0:
            raise ConfigError("box sides must span at least 2 cells")
        bg = set(self.taxonomy.background_ids)
        for spec in self.map_classes:
            if spec.bg_class_id not in bg:
                raise ConfigError(f"map class {spec.name} uses non-background id")
        if self.signatures is None:
            rng = np.random.default_rng(self.signature_seed)
            sig = rng.standard_normal((self.taxonomy.K + 1, self.channels))
            self.signatures = sig * self.signature_scale
        self.signatures = np.asarray(self.signatures, dtype=np.float64)
        if self.signatures.shape != (self.taxonomy.K + 1, self.channels):
            raise ConfigError(
                f"signatures shape {self.signatures.shape} != (K+1, C)"
            )
        for a in range(len(self.signatures)):
            for b in range(a + 1, len(self.signatures)):
                if np.array_equal(self.signatures[a], self.signatures[b]):
                    raise ConfigError(f"degenerate signatures: rows {a} and {b} equal")

    @property
    def n_map(self) -> int:
        return len(self.map_classes)


def box_footprint_mask(box: Box, geometry: GridGeometry) -> np.ndarray:
    """Binary BEV mask of cells whose center lies inside the rotated box."""
    xs, ys = geometry.cell_centers_xy()
    dx = xs[:, None] - box.center_xy[0]
    dy = ys[None, :] - box.center_xy[1]
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    local_x = c * dx + s * dy
    local_y = -s * dx + c * dy
    half_w, half_l = box.size_wl[0] / 2.0, box.size_wl[1] / 2.0
    return (np.abs(local_x) <= half_w) & (np.abs(local_y) <= half_l)


def synthesize_scene(config: SceneConfig, seed: int) -> Scene:
    """Build (features, ground truth) deterministically from a seed."""
    rng = np.random.default_rng(seed)
    tax, geom = config.taxonomy, config.geometry
    X, Y, Z = geom.X, geom.Y, geom.Z
    labels = np.full((X, Y, Z), tax.free_label, dtype=np.int64)

    # map bands on the ground layer; later classes overwrite earlier ones
    map_masks = np.zeros((config.n_map, X, Y), dtype=np.int64)
    wlo, whi = config.band_width_range_cells
    for m, spec in enumerate(config.map_classes):
        horizontal = bool(rng.integers(0, 2))
        extent = X if horizontal else Y
        width = int(rng.integers(wlo, whi + 1))
        width = min(width, extent)
        start = int(rng.integers(0, extent - width + 1))
        if horizontal:
            map_masks[m, start : start + width, :] = 1
        else:
            map_masks[m, :, start : start + width] = 1
        labels[:, :, 0][map_masks[m] == 1] = spec.bg_class_id

    # boxes above the ground layer; later boxes win on overlap
    boxes: list[Box] = []
    overlaps = 0
    n_boxes = int(rng.integers(config.box_count_range[0], config.box_count_range[1] + 1))
    z_lo = max(config.box_z_levels[0], 0)
    z_hi = min(config.box_z_levels[1], Z)
    slo, shi = config.box_size_range_cells
    for _ in range(n_boxes):
        fg_idx = int(rng.integers(0, tax.n_fg))
        class_id = tax.foreground_ids[fg_idx]
        w = float(rng.uniform(slo, shi)) * geom.cell_size
        l = float(rng.uniform(slo, shi)) * geom.cell_size
        # keep the whole footprint inside the grid for any yaw
        radius = 0.5 * float(np.hypot(w, l))
        span_x, span_y = X * geom.cell_size, Y * geom.cell_size
        cx = geom.origin[0] + float(rng.uniform(min(radius, span_x / 2), max(span_x - radius, span_x / 2)))
        cy = geom.origin[1] + float(rng.uniform(min(radius, span_y / 2), max(span_y - radius, span_y / 2)))
        yaw = float(np.pi - 2.0 * np.pi * rng.uniform(0.0, 1.0))  # (-pi, pi]
        box = Box(class_id, (cx, cy), (w, l), yaw)
        footprint = box_footprint_mask(box, geom)
        region = labels[:, :, z_lo:z_hi]
        prior = region[footprint]
        overlaps += int(((prior != tax.free_label) & (prior != class_id)).sum() > 0)
        region[footprint] = class_id
        boxes.append(box)

    features = config.signatures[labels]  # (X, Y, Z, C)
    features = np.ascontiguousarray(features.transpose(3, 0, 1, 2))
    if config.noise_sigma > 0:
        features = features + config.noise_sigma * rng.standard_normal(features.shape)

    gt = GroundTruthScene(
        voxel_labels=labels,
        map_masks=map_masks,
        boxes=boxes,
        metadata={"seed": int(seed), "overlapping_boxes": overlaps},
    )
    return Scene(features=features, gt=gt, seed=int(seed))


def derive_roi_mask(gt: GroundTruthScene, task: str, config: SceneConfig) -> RoIMask:
    """Binary region-of-interest supervision for the suppression gates."""
    geom = config.geometry
    if task == "det":
        mask = np.zeros((geom.X, geom.Y), dtype=np.int64)
        for box in gt.boxes:
            mask |= box_footprint_mask(box, geom).astype(np.int64)
        return RoIMask("det", mask)
    if task == "map":
        if gt.map_masks.size == 0:
            return RoIMask("map", np.zeros((geom.X, geom.Y), dtype=np.int64))
        return RoIMask("map", (gt.map_masks.sum(axis=0) > 0).astype(np.int64))
    if task == "occ":
        return RoIMask("occ", (gt.voxel_labels != config.taxonomy.free_label).astype(np.int64))
    raise ValueError(f"unknown task tag: {task!r}")


# ---------------------------------------------------------------------------
# scene dump format (CLI `synth` output, test fixtures)
# ---------------------------------------------------------------------------

def scene_to_json(scene: Scene, config: SceneConfig) -> dict:
    gt = scene.gt
    return {
        "schema_version": SCENE_DUMP_VERSION,
        "seed": scene.seed,
        "geometry": {
            "X": config.geometry.X,
            "Y": config.geometry.Y,
            "Z": config.geometry.Z,
            "cell_size": config.geometry.cell_size,
            "origin": list(config.geometry.origin),
        },
        "taxonomy": {
            "foreground_ids": list(config.taxonomy.foreground_ids),
            "background_ids": list(config.taxonomy.background_ids),
            "names": {str(k): v for k, v in config.taxonomy.names.items()},
            "free_label": config.taxonomy.free_label,
        },
        "map_classes": [
            {"name": s.name, "bg_class_id": s.bg_class_id} for s in config.map_classes
        ],
        "voxel_labels": gt.voxel_labels.ravel().tolist(),
        "map_masks": gt.map_masks.ravel().tolist(),
        "boxes": [
            {
                "class_id": b.class_id,
                "center_xy": list(b.center_xy),
                "size_wl": list(b.size_wl),
                "yaw": b.yaw,
            }
            for b in gt.boxes
        ],
        "metadata": gt.metadata,
    }


def save_scene(scene: Scene, config: SceneConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_json(scene, config), indent=1))


def load_scene_dump(path: str | Path) -> dict:
    """Load a dump as written by ``save_scene``; arrays are restored."""
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCENE_DUMP_VERSION:
        raise ConfigError(
            f"scene dump version {doc.get('schema_version')} != {SCENE_DUMP_VERSION}"
        )
    g = doc["geometry"]
    shape = (g["X"], g["Y"], g["Z"])
    doc["voxel_labels"] = np.asarray(doc["voxel_labels"], dtype=np.int64).reshape(shape)
    n_map = len(doc["map_classes"])
    doc["map_masks"] = np.asarray(doc["map_masks"], dtype=np.int64).reshape(
        (n_map, g["X"], g["Y"])
    )
    doc["boxes"] = [
        Box(b["class_id"], tuple(b["center_xy"]), tuple(b["size_wl"]), b["yaw"])
        for b in doc["boxes"]
    ]
    return doc
