"""SGD with momentum and weight decay, plus piecewise-constant step schedules."""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

# 30k and 48k of a nominal 60k-iteration run
DEFAULT_STEP_FRACTIONS = (0.5, 0.8)


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    iteration: int = 0


def sgd_step(params, grads, state, lr, momentum=0.9, weight_decay=1e-5):
    """``v <- m*v + g + wd*w``; ``w <- w - lr*v``.

    ``grads`` maps parameter name to gradient array; a missing or ``None``
    entry counts as a zero gradient.
    """
    for p in params:
        g = grads.get(p.name)
        w = p.tensor.data
        if g is None:
            g = np.zeros_like(w)
        elif g.shape != w.shape:
            raise UsageError(f"{p.name}: gradient shape {g.shape} != parameter shape {w.shape}")
        v = state.velocity.get(p.name)
        if v is None:
            v = np.zeros_like(w)
        elif v.shape != w.shape:
            raise UsageError(f"{p.name}: velocity shape {v.shape} != parameter shape {w.shape}")
        v = momentum * v + g + weight_decay * w
        state.velocity[p.name] = v
        p.tensor.data = w - lr * v
    state.iteration += 1


def collect_grads(params):
    """Copy each parameter's ``.grad`` into a fresh dict (``None`` kept as is)."""
    return {p.name: (None if p.grad is None else p.grad.copy()) for p in params}


def lr_schedule(iteration, base, steps):
    """Rate in force at ``iteration``: ``base`` until the first breakpoint, then
    the rate of the last breakpoint reached. ``steps`` is ``[(iter, rate), ...]``."""
    starts = [s for s, _ in steps]
    if starts != sorted(starts):
        raise UsageError(f"schedule breakpoints must be sorted, got {starts}")
    i = bisect.bisect_right(starts, iteration)
    return base if i == 0 else steps[i - 1][1]


def proportional_steps(base, max_iter, fractions=DEFAULT_STEP_FRACTIONS, divisor=10):
    """Breakpoints at fixed fractions of ``max_iter``, each dividing the rate by ``divisor``.

    Dividing by an integer power keeps 0.1 -> 0.01 -> 0.001 exact in floating point.
    """
    return [(int(round(f * max_iter)), base / divisor ** (k + 1)) for k, f in enumerate(fractions)]
