"""Finite-difference suite covering every primitive and composed loss.

Inputs are drawn away from kinks (relu/clamp boundaries, reduction ties)
so central differences are valid; Lovasz checks freeze the sorting
permutations across perturbed evaluations.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Parameter
from .gradcheck import finite_difference_check
from .heads import DetectionRaw
from .scene import Box, GridGeometry

REL_TOL = 1e-4
ABS_FLOOR = 1e-8
EPSILON = 1e-5


@dataclass
class SuiteEntry:
    name: str
    ok: bool
    worst_rel: float
    trials: int
    seconds: float


def _away_from(rng, shape, avoid=0.0, min_gap=1e-3, scale=1.0):
    """Standard normals resampled so no entry sits within min_gap of avoid."""
    x = rng.standard_normal(shape) * scale
    mask = np.abs(x - avoid) < min_gap
    while mask.any():
        x[mask] = rng.standard_normal(int(mask.sum())) * scale
        mask = np.abs(x - avoid) < min_gap
    return x


def _probs(rng, shape, lo=0.05, hi=0.95):
    return rng.uniform(lo, hi, size=shape)


def _spread_axis(rng, shape, axis, min_gap=1e-3):
    """Random values with pairwise gaps along one axis (safe arg-max)."""
    x = rng.standard_normal(shape)
    order = np.argsort(x, axis=axis)
    ranks = np.argsort(order, axis=axis)
    return x + ranks * min_gap * 2.0


def _check(name, builder, trials, results, rel_tol=REL_TOL):
    start = time.time()
    ok = True
    worst = 0.0
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    for trial in range(trials):
        rng = np.random.default_rng([tag, trial])
        loss_fn, params = builder(rng)
        report = finite_difference_check(
            loss_fn, params, epsilon=EPSILON, rel_tol=rel_tol, abs_floor=ABS_FLOOR
        )
        worst = max(worst, max(report.max_rel_err.values(), default=0.0))
        ok = ok and report.ok
    results.append(SuiteEntry(name, ok, worst, trials, time.time() - start))


def _readout(y, rng):
    """Random linear functional making the scalar loss sensitive to y."""
    r = rng.standard_normal(y.shape)
    return ad.tsum(ad.mul(y, ad.constant(r)))


# ---------------------------------------------------------------------------
# primitive builders
# ---------------------------------------------------------------------------

def _primitive_builders() -> dict[str, Callable]:
    def pair(rng, shape=(3, 4)):
        a = Parameter("a", rng.standard_normal(shape))
        b = Parameter("b", rng.standard_normal(shape))
        return a, b

    def b_add(rng):
        a, b = pair(rng)
        return (lambda: _readout(ad.add(a, b), np.random.default_rng(1))), [a, b]

    def b_add_scalar(rng):
        a, _ = pair(rng)
        return (lambda: _readout(ad.add(a, 1.7), np.random.default_rng(1))), [a]

    def b_sub(rng):
        a, b = pair(rng)
        return (lambda: _readout(ad.sub(a, b), np.random.default_rng(1))), [a, b]

    def b_neg(rng):
        a, _ = pair(rng)
        return (lambda: _readout(ad.neg(a), np.random.default_rng(1))), [a]

    def b_mul(rng):
        a, b = pair(rng)
        return (lambda: _readout(ad.mul(a, b), np.random.default_rng(1))), [a, b]

    def b_mul_scalar(rng):
        a, _ = pair(rng)
        return (lambda: _readout(ad.mul(a, -2.3), np.random.default_rng(1))), [a]

    def b_div(rng):
        a = Parameter("a", rng.standard_normal((3, 4)))
        b = Parameter("b", _away_from(rng, (3, 4), avoid=0.0, min_gap=0.3))
        return (lambda: _readout(ad.div(a, b), np.random.default_rng(1))), [a, b]

    def b_log(rng):
        a = Parameter("a", rng.uniform(0.2, 3.0, (3, 4)))
        return (lambda: _readout(ad.log(a), np.random.default_rng(1))), [a]

    def b_power(rng):
        a = Parameter("a", rng.uniform(0.2, 2.0, (3, 4)))
        return (lambda: _readout(ad.power(a, 2.5), np.random.default_rng(1))), [a]

    def b_clamp(rng):
        a = Parameter("a", _away_from(rng, (4, 4), avoid=1.0, min_gap=5e-3))
        a.data = np.where(np.abs(a.data + 1.0) < 5e-3, a.data + 0.1, a.data)
        return (lambda: _readout(ad.clamp(a, -1.0, 1.0), np.random.default_rng(1))), [a]

    def b_sigmoid(rng):
        a, _ = pair(rng)
        return (lambda: _readout(ad.sigmoid(a), np.random.default_rng(1))), [a]

    def b_relu(rng):
        a = Parameter("a", _away_from(rng, (4, 5)))
        return (lambda: _readout(ad.relu(a), np.random.default_rng(1))), [a]

    def b_detach(rng):
        # the detached operand is checked for an exactly-zero gradient in
        # unit tests; central differences only apply to the live operand
        a, b = pair(rng)
        return (
            lambda: _readout(ad.mul(ad.detach(a), b), np.random.default_rng(1))
        ), [b]

    def b_linear(rng):
        x = Parameter("x", rng.standard_normal((4, 3)))
        w = Parameter("w", rng.standard_normal((5, 3)))
        b = Parameter("b", rng.standard_normal(5))
        return (lambda: _readout(ad.linear(x, w, b), np.random.default_rng(1))), [x, w, b]

    def conv_builder(nd, k):
        def build(rng):
            cin, cout = 2, 3
            spatial = tuple(rng.integers(3, 6) for _ in range(nd))
            x = Parameter("x", rng.standard_normal((cin,) + spatial))
            w = Parameter("w", rng.standard_normal((cout, cin) + (k,) * nd) * 0.5)
            b = Parameter("b", rng.standard_normal(cout) * 0.2)
            op = ad.conv2d if nd == 2 else ad.conv3d
            return (lambda: _readout(op(x, w, b), np.random.default_rng(1))), [x, w, b]

        return build

    def b_softmax(rng):
        a = Parameter("a", rng.standard_normal((4, 3, 3)))
        return (lambda: _readout(ad.softmax(a, axis=0), np.random.default_rng(1))), [a]

    def b_tsum(rng):
        a = Parameter("a", rng.standard_normal((3, 4, 2)))
        return (lambda: _readout(ad.tsum(a, axes=(1,)), np.random.default_rng(1))), [a]

    def b_tmean(rng):
        a = Parameter("a", rng.standard_normal((3, 4, 2)))
        return (lambda: _readout(ad.tmean(a, axes=(0, 2)), np.random.default_rng(1))), [a]

    def b_amax(rng):
        a = Parameter("a", _spread_axis(rng, (5, 4), axis=0))
        return (lambda: _readout(ad.amax(a, axis=0), np.random.default_rng(1))), [a]

    def b_concat(rng):
        a = Parameter("a", rng.standard_normal((2, 4)))
        b = Parameter("b", rng.standard_normal((3, 4)))
        return (
            lambda: _readout(ad.concat([a, b], axis=0), np.random.default_rng(1))
        ), [a, b]

    def b_scale_channels(rng):
        x = Parameter("x", rng.standard_normal((3, 4, 4)))
        g = Parameter("g", rng.standard_normal(3))
        return (lambda: _readout(ad.scale_channels(x, g), np.random.default_rng(1))), [x, g]

    def b_scale_cells(rng):
        x = Parameter("x", rng.standard_normal((3, 4, 4)))
        s = Parameter("s", rng.standard_normal((4, 4)))
        return (lambda: _readout(ad.scale_cells(x, s), np.random.default_rng(1))), [x, s]

    def b_transpose(rng):
        a = Parameter("a", rng.standard_normal((2, 3, 4)))
        return (
            lambda: _readout(ad.transpose(a, (2, 0, 1)), np.random.default_rng(1))
        ), [a]

    def b_reshape(rng):
        a = Parameter("a", rng.standard_normal((2, 6)))
        return (lambda: _readout(ad.reshape(a, (3, 4)), np.random.default_rng(1))), [a]

    def b_take(rng):
        a = Parameter("a", rng.standard_normal((3, 4)))
        idx = rng.integers(0, 12, size=7)
        return (lambda: _readout(ad.take(a, idx), np.random.default_rng(1))), [a]

    def b_dot_channels(rng):
        p = Parameter("p", rng.standard_normal((3, 4)))
        f = Parameter("f", rng.standard_normal((4, 3, 2)))
        return (lambda: _readout(ad.dot_channels(p, f), np.random.default_rng(1))), [p, f]

    def b_cross_entropy(rng):
        logits = Parameter("logits", rng.standard_normal((4, 3, 3)))
        labels = rng.integers(0, 4, size=(3, 3))
        return (lambda: ad.cross_entropy(logits, labels)), [logits]

    return {
        "add": b_add,
        "add_scalar": b_add_scalar,
        "sub": b_sub,
        "neg": b_neg,
        "mul": b_mul,
        "mul_scalar": b_mul_scalar,
        "div": b_div,
        "log": b_log,
        "power": b_power,
        "clamp": b_clamp,
        "sigmoid": b_sigmoid,
        "relu": b_relu,
        "detach": b_detach,
        "linear": b_linear,
        "conv2d_k3": conv_builder(2, 3),
        "conv2d_k1": conv_builder(2, 1),
        "conv3d_k3": conv_builder(3, 3),
        "conv3d_k1": conv_builder(3, 1),
        "softmax": b_softmax,
        "sum": b_tsum,
        "mean": b_tmean,
        "max": b_amax,
        "concat": b_concat,
        "scale_channels": b_scale_channels,
        "scale_cells": b_scale_cells,
        "transpose": b_transpose,
        "reshape": b_reshape,
        "take": b_take,
        "dot_channels": b_dot_channels,
        "cross_entropy": b_cross_entropy,
    }


# ---------------------------------------------------------------------------
# composed loss builders
# ---------------------------------------------------------------------------

def _loss_builders() -> dict[str, Callable]:
    geometry = GridGeometry(8, 8, 2)

    def b_focal(rng):
        p = Parameter("p", _probs(rng, (3, 5, 5)))
        t = (rng.uniform(size=(3, 5, 5)) < 0.3).astype(np.float64)
        return (lambda: L.focal_loss(p, t)), [p]

    def b_dice(rng):
        p = Parameter("p", _probs(rng, (3, 4, 4)))
        t = (rng.uniform(size=(3, 4, 4)) < 0.4).astype(np.float64)
        valid = rng.uniform(size=(4, 4)) < 0.8
        return (lambda: L.dice_loss(p, t, valid)), [p]

    def b_lovasz(rng):
        raw = ad.softmax(ad.constant(rng.standard_normal((3, 4, 4))), axis=0)
        p = Parameter("p", raw.data)
        labels = rng.integers(0, 3, size=(4, 4))
        base = L.lovasz_softmax(p, labels)  # discover permutations at theta
        perms = {}
        spatial = 16
        for c in np.unique(labels):
            pc = p.data.reshape(3, spatial)[int(c)]
            is_c = (labels.ravel() == c).astype(np.float64)
            m = is_c + (1.0 - 2.0 * is_c) * pc
            perms[int(c)] = np.argsort(-m, kind="stable")
        del base
        return (lambda: L.lovasz_softmax(p, labels, frozen_perms=perms)), [p]

    def b_cpg(rng):
        p = Parameter("p", _probs(rng, (3, 4, 4, 2), lo=0.1, hi=0.9))
        labels = rng.integers(0, 4, size=(4, 4, 2))  # 0 is free
        valid = labels != 0
        class_idx = np.where(valid, labels - 1, 0)
        perms = _lovasz_perms(p.data, class_idx, valid)
        return (
            lambda: ad.add(
                L.dice_loss(p, _onehot(labels, 3), valid),
                L.lovasz_softmax(p, class_idx, valid, frozen_perms=perms),
            )
        ), [p]

    def b_suppression(rng):
        scores = {
            "det": Parameter("s_det", _probs(rng, (6, 6))),
            "map": Parameter("s_map", _probs(rng, (6, 6))),
            "occ": Parameter("s_occ", _probs(rng, (6, 6, 2))),
        }
        masks = {
            "det": (rng.uniform(size=(6, 6)) < 0.3).astype(np.int64),
            "map": (rng.uniform(size=(6, 6)) < 0.4).astype(np.int64),
            "occ": (rng.uniform(size=(6, 6, 2)) < 0.3).astype(np.int64),
        }
        return (lambda: L.suppression_loss(scores, masks)), list(scores.values())

    def b_det(rng):
        boxes = [
            Box(1, (float(rng.uniform(2, 6)), float(rng.uniform(2, 6))),
                (2.5, 3.0), float(rng.uniform(-3, 3)))
        ]
        heat = Parameter("heat", _probs(rng, (2, 8, 8)))
        # keep regression predictions away from the L1 kink at the targets
        from .losses import regression_targets

        cells, tvals = regression_targets(boxes, geometry)
        reg_data = rng.standard_normal((6, 8, 8))
        for n, (ci, cj) in enumerate(cells):
            for ch in range(6):
                if abs(reg_data[ch, ci, cj] - tvals[ch, n]) < 1e-2:
                    reg_data[ch, ci, cj] += 0.5
        reg = Parameter("reg", reg_data)
        raw = DetectionRaw(heatmaps=heat, regression=reg)
        return (lambda: L.det_loss(raw, boxes, geometry, (1, 2))), [heat, reg]

    def b_map(rng):
        p = Parameter("p", _probs(rng, (3, 6, 6)))
        t = (rng.uniform(size=(3, 6, 6)) < 0.4).astype(np.int64)
        return (lambda: L.map_loss(p, t)), [p]

    def b_occ(rng):
        from .scene import default_taxonomy

        tax = default_taxonomy()
        logits = Parameter("logits", rng.standard_normal((tax.K + 1, 3, 3, 2)))
        labels = rng.integers(0, tax.K + 1, size=(3, 3, 2))
        order = tax.occupancy_order()
        lut = np.zeros(tax.K + 1, dtype=np.int64)
        lut[tax.free_label] = tax.K
        for pos, cid in enumerate(order):
            lut[cid] = pos
        idx = lut[labels]
        probs = ad.softmax(ad.constant(logits.data), axis=0)
        perms = _lovasz_perms(probs.data, idx, np.ones(idx.shape, dtype=bool))
        return (
            lambda: ad.add(
                ad.cross_entropy(logits, idx),
                L.lovasz_softmax(ad.softmax(logits, axis=0), idx, frozen_perms=perms),
            )
        ), [logits]

    return {
        "focal_loss": b_focal,
        "dice_loss": b_dice,
        "lovasz_softmax": b_lovasz,
        "cpg_loss": b_cpg,
        "suppression_loss": b_suppression,
        "det_loss": b_det,
        "map_loss": b_map,
        "occ_loss": b_occ,
    }


def _onehot(labels: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros((K,) + labels.shape)
    for k in range(K):
        out[k] = labels == k + 1
    return out


def _lovasz_perms(probs_data: np.ndarray, class_idx: np.ndarray, valid: np.ndarray):
    spatial = int(np.prod(class_idx.shape))
    flat_cells = np.flatnonzero(valid.ravel())
    labels = class_idx.ravel()[flat_cells]
    perms = {}
    for c in np.unique(labels):
        pc = probs_data.reshape(probs_data.shape[0], spatial)[int(c)][flat_cells]
        is_c = (labels == c).astype(np.float64)
        m = is_c + (1.0 - 2.0 * is_c) * pc
        perms[int(c)] = np.argsort(-m, kind="stable")
    return perms


def run_suite(trials: int = 100) -> list[SuiteEntry]:
    """Check every primitive and composed loss; returns one entry per check."""
    results: list[SuiteEntry] = []
    for name, builder in _primitive_builders().items():
        _check(f"primitive/{name}", builder, trials, results)
    for name, builder in _loss_builders().items():
        _check(f"loss/{name}", builder, trials, results)
    return results
