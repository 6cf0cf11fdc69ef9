"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Parameter, ShapeError, Tape, Tensor


@dataclass
class GradCheckReport:
    """Per-parameter worst-case errors of analytic vs central differences."""

    max_rel_err: dict[str, float] = field(default_factory=dict)
    max_abs_err: dict[str, float] = field(default_factory=dict)
    ok: bool = True
    rel_tol: float = 1e-4
    abs_floor: float = 1e-8

    def worst(self) -> tuple[str, float]:
        if not self.max_rel_err:
            return ("", 0.0)
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return (name, self.max_rel_err[name])


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    epsilon: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare tape gradients of a scalar loss against (L(t+e)-L(t-e))/2e.

    ``loss_fn`` must be a pure function of the current parameter values.
    An entry passes when its relative error is within ``rel_tol`` or its
    absolute error is within ``abs_floor``; the report passes when every
    entry of every parameter does.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    with Tape() as tape:
        out = loss_fn()
    if out.shape != ():
        raise ShapeError(f"finite_difference_check: loss shape {out.shape} is not scalar")
    for p in params:
        p.zero_grad()
    tape.backward(out, np.float64(1.0))
    analytic = {p.name: p.grad.copy() for p in params}

    report = GradCheckReport(rel_tol=rel_tol, abs_floor=abs_floor)
    for p in params:
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lo_hi = float(loss_fn().data)
            flat[i] = orig - epsilon
            lo_lo = float(loss_fn().data)
            flat[i] = orig
            numeric[i] = (lo_hi - lo_lo) / (2.0 * epsilon)
        ana = analytic[p.name].reshape(-1)
        abs_err = np.abs(ana - numeric)
        denom = np.maximum(np.abs(ana), np.abs(numeric))
        with np.errstate(divide="ignore", invalid="ignore"):
            rel_err = np.where(denom > 0, abs_err / denom, 0.0)
        entry_ok = (rel_err <= rel_tol) | (abs_err <= abs_floor)
        report.max_rel_err[p.name] = float(rel_err.max()) if rel_err.size else 0.0
        report.max_abs_err[p.name] = float(abs_err.max()) if abs_err.size else 0.0
        if not bool(entry_ok.all()):
            report.ok = False
    return report
