"""Task-specific feature generation: transform, enhance, suppress.

Each task owns an independent branch. BEV tasks (det, map) collapse the
height axis into channels and work on 2D grids; the occupancy task stays
on the 3D voxel grid. Enhancement fuses prototype-wise similarity maps
with channel-attention-rescaled features; a supervised gate in [0, 1]
then suppresses task-irrelevant cells.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .cpg import PrototypeGroup

TRANSFORM_DEPTH = 2  # convs in the task-dependent transformation
LINEAR_GAIN = np.sqrt(3.0)  # variance-preserving for layers without relu
BEV_TASKS = ("det", "map")


@dataclass
class BranchOutputs:
    transformed: Tensor
    wise: Tensor | None
    aware: Tensor | None
    gamma: Tensor | None
    enhanced: Tensor
    suppression: Tensor | None
    task_specific: Tensor


def apply_suppression(enhanced: Tensor, scores: Tensor) -> Tensor:
    """Gate features cell-wise by suppression scores (broadcast over channels)."""
    return ad.scale_cells(enhanced, scores)


class TaskBranch:
    def __init__(
        self,
        store: ParameterStore,
        task: str,
        channels: int,
        depth_z: int,
        n_prototypes: int,
        enhancement: bool = True,
        use_wise: bool = True,
        use_aware: bool = True,
        use_suppression: bool = True,
    ):
        if task not in ("det", "map", "occ"):
            raise ValueError(f"unknown task tag: {task!r}")
        self.task = task
        self.channels = channels
        self.depth_z = depth_z
        self.n_prototypes = n_prototypes
        self.enhancement = enhancement
        self.use_wise = use_wise and enhancement
        self.use_aware = use_aware and enhancement
        self.use_suppression = use_suppression and enhancement
        self.is_bev = task in BEV_TASKS
        c = channels
        prefix = f"tsfg/{task}"

        self._transform = []
        cin = c * depth_z if self.is_bev else c
        for i in range(TRANSFORM_DEPTH):
            gain = ad.RELU_GAIN if i + 1 < TRANSFORM_DEPTH else LINEAR_GAIN
            self._transform.append(
                self._conv_params(store, f"{prefix}/transform{i}", cin, c, 3, gain=gain)
            )
            cin = c

        if self.use_wise:
            self.wise_w1 = store.create(f"{prefix}/wise/w1", (c, c), c, gain=ad.RELU_GAIN)
            self.wise_b1 = store.create(f"{prefix}/wise/b1", (c,), c)
            self.wise_w2 = store.create(f"{prefix}/wise/w2", (c, c), c, gain=LINEAR_GAIN)
            self.wise_b2 = store.create(f"{prefix}/wise/b2", (c,), c)

        if self.use_aware:
            self.aware_w1 = store.create(
                f"{prefix}/aware/w1", (c, 2 * c), 2 * c, gain=ad.RELU_GAIN
            )
            self.aware_b1 = store.create(f"{prefix}/aware/b1", (c,), 2 * c)
            self.aware_w2 = store.create(f"{prefix}/aware/w2", (c, c), c)
            self.aware_b2 = store.create(f"{prefix}/aware/b2", (c,), c)

        if enhancement:
            fuse_in = (n_prototypes if self.use_wise else 0) + c
            self._fuse = self._conv_params(
                store, f"{prefix}/fuse", fuse_in, c, 3, gain=LINEAR_GAIN
            )

        if self.use_suppression:
            self._score1 = self._conv_params(
                store, f"{prefix}/score0", c, c, 3, gain=ad.RELU_GAIN
            )
            self._score2 = self._conv_params(store, f"{prefix}/score1", c, 1, 1)

    def _conv_params(self, store, name, cin, cout, k, gain=1.0):
        nd = 2 if self.is_bev else 3
        shape = (cout, cin) + (k,) * nd
        w = store.create(f"{name}/w", shape, cin * k**nd, gain=gain)
        b = store.create(f"{name}/b", (cout,), cin * k**nd)
        return (w, b)

    def _conv(self, x: Tensor, params) -> Tensor:
        w, b = params
        return ad.conv2d(x, w, b) if self.is_bev else ad.conv3d(x, w, b)

    # -- stage 1: task-dependent transformation ---------------------------

    def transform_features(self, features: Tensor) -> Tensor:
        """(C, X, Y, Z) -> (C, X, Y) for BEV tasks, (C, X, Y, Z) for occ."""
        x = features
        if self.is_bev:
            c, X, Y, Z = x.shape
            x = ad.transpose(x, (0, 3, 1, 2))
            x = ad.reshape(x, (c * Z, X, Y))
        for i, params in enumerate(self._transform):
            x = self._conv(x, params)
            if i + 1 < len(self._transform):
                x = ad.relu(x)
        return x

    # -- stage 2: adaptive enhancement -------------------------------------

    def prototype_wise(self, transformed: Tensor, group: PrototypeGroup) -> Tensor:
        """Similarity map per prototype: project, then dot with features."""
        if group.vectors.shape[1] != self.channels:
            raise ad.ShapeError(
                f"prototype_wise: prototype width {group.vectors.shape[1]} "
                f"!= channels {self.channels}"
            )
        h = ad.relu(ad.linear(group.vectors, self.wise_w1, self.wise_b1))
        projected = ad.linear(h, self.wise_w2, self.wise_b2)
        return ad.dot_channels(projected, transformed)

    def prototype_aware(self, transformed: Tensor, group: PrototypeGroup) -> tuple[Tensor, Tensor]:
        """Channel attention from pooled prototypes; returns (gated, gamma)."""
        c = self.channels
        gmax = ad.amax(group.vectors, axis=0)
        gmean = ad.tmean(group.vectors, axes=0)
        pooled = ad.concat([ad.reshape(gmax, (1, c)), ad.reshape(gmean, (1, c))], axis=1)
        h = ad.relu(ad.linear(pooled, self.aware_w1, self.aware_b1))
        gamma = ad.reshape(ad.sigmoid(ad.linear(h, self.aware_w2, self.aware_b2)), (c,))
        return ad.scale_channels(transformed, gamma), gamma

    def enhance(self, wise: Tensor | None, aware: Tensor) -> Tensor:
        """Fuse concatenated branches with a single extent-preserving conv."""
        parts = ([wise] if wise is not None else []) + [aware]
        fused = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        return self._conv(fused, self._fuse)

    # -- stage 3: suppression ----------------------------------------------

    def suppression_score(self, aware: Tensor) -> Tensor:
        """Per-cell gate in (0, 1), shaped like the task's spatial domain."""
        h = ad.relu(self._conv(aware, self._score1))
        s = ad.sigmoid(self._conv(h, self._score2))
        return ad.reshape(s, s.shape[1:])

    def forward(self, features: Tensor, group: PrototypeGroup | None) -> BranchOutputs:
        transformed = self.transform_features(features)
        if group is None or not self.enhancement:
            # prototype stage disabled: route the transformed features through
            return BranchOutputs(transformed, None, None, None, transformed, None, transformed)
        wise = self.prototype_wise(transformed, group) if self.use_wise else None
        if self.use_aware:
            aware, gamma = self.prototype_aware(transformed, group)
        else:
            aware, gamma = transformed, None
        enhanced = self.enhance(wise, aware)
        if self.use_suppression:
            scores = self.suppression_score(aware)
            task_specific = apply_suppression(enhanced, scores)
        else:
            scores = None
            task_specific = enhanced
        return BranchOutputs(transformed, wise, aware if self.use_aware else None,
                             gamma, enhanced, scores, task_specific)
