"""Class-wise prototype generation from shared voxel features.

A lightweight voxel classifier produces per-class confidence scores; hard
argmax masks partition the grid; masked average pooling turns each class
region into a C-vector prototype. Prototypes plus learnable embeddings are
grouped and assigned to the three tasks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .scene import ClassTaxonomy


@dataclass
class ClassMask:
    class_id: int
    mask: np.ndarray  # (X, Y, Z) binary


@dataclass
class Prototype:
    class_id: int
    vector: Tensor  # (C,)


@dataclass
class PrototypeGroup:
    class_ids: tuple[int, ...]
    vectors: Tensor  # (N, C), rows in class_ids order

    @property
    def size(self) -> int:
        return len(self.class_ids)


@dataclass
class TaskGroups:
    det: PrototypeGroup
    map: PrototypeGroup
    occ: PrototypeGroup

    def for_task(self, task: str) -> PrototypeGroup:
        return {"det": self.det, "map": self.map, "occ": self.occ}[task]


class VoxelClassifier:
    """1x1x1 convolution over voxel features followed by a class softmax."""

    def __init__(self, store: ParameterStore, channels: int, n_classes: int):
        self.w = store.create("cpg/classifier/w", (n_classes, channels, 1, 1, 1), channels)
        self.b = store.create("cpg/classifier/b", (n_classes,), channels)

    def classify_voxels(self, features: Tensor) -> Tensor:
        """Per-voxel semantic confidence scores, shape (K, X, Y, Z)."""
        return ad.softmax(ad.conv3d(features, self.w, self.b), axis=0)


def build_class_masks(scores: Tensor | np.ndarray) -> list[ClassMask]:
    """Hard argmax masks partitioning the grid; ties go to the lowest id.

    Gradients stop here: masks are plain arrays treated as constants.
    """
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    winner = np.argmax(data, axis=0)  # first max == smallest class id
    masks = []
    for k in range(data.shape[0]):
        masks.append(ClassMask(class_id=k + 1, mask=(winner == k).astype(np.int64)))
    return masks


def pool_prototype(features: Tensor, mask: np.ndarray) -> Tensor:
    """Masked mean of features over selected voxels; zero vector if empty."""
    mask = np.asarray(mask)
    if mask.shape != features.shape[1:]:
        raise ad.ShapeError(f"pool_prototype: mask {mask.shape} vs grid {features.shape}")
    count = int(mask.sum())
    if count == 0:
        return ad.constant(np.zeros(features.shape[0]))
    masked = ad.scale_cells(features, ad.constant(mask.astype(np.float64)))
    return ad.mul(ad.tsum(masked, axes=tuple(range(1, features.ndim))), 1.0 / count)


class PrototypeEmbeddings:
    """One learnable C-vector per semantic class."""

    def __init__(self, store: ParameterStore, taxonomy: ClassTaxonomy, channels: int):
        self.by_class = {
            k: store.create(f"cpg/embed/{k:02d}", (channels,), channels)
            for k in taxonomy.occupancy_order()
        }


def assemble_groups(
    prototypes: list[Prototype],
    taxonomy: ClassTaxonomy,
    embeddings: PrototypeEmbeddings,
) -> tuple[PrototypeGroup, PrototypeGroup]:
    """Foreground and background groups of prototype + embedding rows."""
    by_class = {p.class_id: p for p in prototypes}
    missing = [k for k in taxonomy.occupancy_order() if k not in by_class]
    if missing:
        raise ValueError(f"assemble_groups: missing prototypes for classes {missing}")

    def group(ids: tuple[int, ...]) -> PrototypeGroup:
        rows = []
        for k in ids:
            vec = ad.add(by_class[k].vector, embeddings.by_class[k])
            rows.append(ad.reshape(vec, (1, vec.shape[0])))
        return PrototypeGroup(ids, ad.concat(rows, axis=0))

    return group(taxonomy.foreground_ids), group(taxonomy.background_ids)


def assign_task_groups(fg: PrototypeGroup, bg: PrototypeGroup) -> TaskGroups:
    """Detection gets foreground, map gets background, occupancy gets both."""
    occ = PrototypeGroup(
        fg.class_ids + bg.class_ids,
        ad.concat([fg.vectors, bg.vectors], axis=0),
    )
    return TaskGroups(det=fg, map=bg, occ=occ)


class PrototypeGenerator:
    """End-to-end prototype stage: classify, mask, pool, group, assign."""

    def __init__(self, store: ParameterStore, taxonomy: ClassTaxonomy, channels: int):
        self.taxonomy = taxonomy
        self.classifier = VoxelClassifier(store, channels, taxonomy.K)
        self.embeddings = PrototypeEmbeddings(store, taxonomy, channels)

    def run(self, features: Tensor) -> tuple[Tensor, list[ClassMask], TaskGroups]:
        scores = self.classifier.classify_voxels(features)
        masks = build_class_masks(scores)
        prototypes = [
            Prototype(m.class_id, pool_prototype(features, m.mask)) for m in masks
        ]
        fg, bg = assemble_groups(prototypes, self.taxonomy, self.embeddings)
        return scores, masks, assign_task_groups(fg, bg)
