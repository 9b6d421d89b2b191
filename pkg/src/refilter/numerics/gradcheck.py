"""Central-difference verification of analytic gradients.

The loss closure must be deterministic (dropout off, fixed seeds): the
check perturbs parameter values in place and re-evaluates, so any hidden
randomness would poison the comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericsError
from .optim import Parameter, zero_grads

# Coordinates whose analytic and numeric gradients are both below this
# are compared absolutely rather than relatively.
REL_FLOOR = 1e-6


@dataclass
class GradCheckEntry:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def worst(self) -> GradCheckEntry:
        return max(self.entries, key=lambda e: e.rel_error)

    def summary(self) -> str:
        w = self.worst()
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] grad check: {len(self.entries)} coordinates, "
            f"max rel error {self.max_rel_error:.3e} (tol {self.tol:.1e}) "
            f"at {w.param}{list(w.index)}"
        )


def _loss_value(loss_fn) -> float:
    value = float(loss_fn().data)
    if not np.isfinite(value):
        raise NumericsError(f"loss is not finite: {value}")
    return value


def finite_diff_check(
    loss_fn,
    params: dict[str, Parameter],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_param: int = 8,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    Samples up to ``max_coords_per_param`` coordinates per trainable
    parameter (all coordinates when the parameter is small enough).
    """
    trainable = {k: p for k, p in params.items() if p.trainable}
    zero_grads(params)
    loss = loss_fn()
    if not np.isfinite(float(loss.data)):
        raise NumericsError(f"loss is not finite: {float(loss.data)}")
    loss.backward()
    analytic = {
        k: (p.tensor.grad.copy() if p.tensor.grad is not None else np.zeros_like(p.data))
        for k, p in trainable.items()
    }

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    for name, p in trainable.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for c in coords:
            original = flat[c]
            flat[c] = original + eps
            up = _loss_value(loss_fn)
            flat[c] = original - eps
            down = _loss_value(loss_fn)
            flat[c] = original
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[c])
            denom = max(abs(a), abs(numeric), REL_FLOOR)
            rel = abs(a - numeric) / denom
            idx = np.unravel_index(int(c), p.data.shape)
            report.entries.append(GradCheckEntry(name, idx, a, numeric, rel))
            report.max_rel_error = max(report.max_rel_error, rel)
    return report
