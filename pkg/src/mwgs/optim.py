"""Adam with per-group exponential learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDivergence

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass(frozen=True)
class Schedule:
    start: float
    end: float

    def __call__(self, step, total):
        return lr_schedule(self.start, self.end, step, total)


def lr_schedule(start, end, step, total):
    """Log-linear interpolation from ``start`` (step 0) to ``end`` (step ``total``)."""
    if total <= 0 or step >= total:
        return float(end)
    step = max(step, 0)
    if start == end:
        return float(start)
    if start <= 0 or end <= 0:
        return float(start + (end - start) * step / total)
    return float(start * (end / start) ** (step / total))


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state: OptimState, lrs):
    """In-place bias-corrected Adam update.

    ``lrs`` maps parameter name to its learning rate for this step; names
    without a learning rate, or with rate zero, are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for name in sorted(grads):
        lr = lrs.get(name, 0.0)
        if lr == 0.0:
            continue
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * g * g
        state.m[name], state.v[name] = m, v
        params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return params
