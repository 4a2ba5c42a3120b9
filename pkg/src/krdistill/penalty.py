"""Sparse gradient recoding and the L1/L2 baselines it is compared against.

The recoding operator works on raw student gradients after backprop: entries
whose magnitude is below a per-layer threshold are zeroed, the rest are
replaced by ``sign(g) * lam * (|g| + g**2) / eps``. Thresholds track an
exponential moving average of each layer's mean absolute gradient.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

EPS_FLOOR = 1e-12


class PenaltyKind(str, enum.Enum):
    SPARSE_RECODING = "sparse_recoding"
    L1 = "l1"
    L2 = "l2"
    NONE = "none"


def parse_kind(kind):
    try:
        return PenaltyKind(kind)
    except ValueError:
        choices = ", ".join(k.value for k in PenaltyKind)
        raise UsageError(f"unknown penalty kind {kind!r}; expected one of {choices}") from None


def layer_key(name):
    """Layer a parameter belongs to: a weight and its bias share one threshold."""
    head, _, tail = name.rpartition(".")
    return head if head and tail in ("weight", "bias") else name


def phi0(g, epsilon):
    """``(|g| + g^2) / eps`` when ``|g| >= eps``, otherwise 0."""
    if epsilon <= 0:
        raise UsageError(f"epsilon must be positive, got {epsilon}")
    a = abs(g)
    return (a + g * g) / epsilon if a >= epsilon else 0.0


def phi0_array(g, epsilon):
    if epsilon <= 0:
        raise UsageError(f"epsilon must be positive, got {epsilon}")
    a = np.abs(g)
    return np.where(a >= epsilon, (a + g * g) / epsilon, 0.0)


@dataclass
class ThresholdState:
    """Per-layer thresholds plus the penalty weight."""

    epsilon: dict = field(default_factory=dict)
    ema_beta: float = 0.9
    lam: float = 1.0
    additive: bool = False

    def __post_init__(self):
        if not 0.0 <= self.ema_beta < 1.0:
            raise UsageError(f"ema_beta must lie in [0, 1), got {self.ema_beta}")
        if self.lam < 0:
            raise UsageError(f"lambda must be non-negative, got {self.lam}")
        for name, eps in self.epsilon.items():
            if not eps > 0:
                raise UsageError(f"epsilon for {name} must be positive, got {eps}")

    @classmethod
    def from_parameters(cls, params, ema_beta=0.9, lam=1.0, additive=False):
        """Start each layer's threshold at the mean magnitude of its parameters."""
        eps = {k: max(_mean_abs(v), EPS_FLOOR)
               for k, v in _by_layer({p.name: p.data for p in params}).items()}
        return cls(epsilon=eps, ema_beta=ema_beta, lam=lam, additive=additive)

    def threshold(self, name):
        return self.epsilon[layer_key(name)]

    def mean_epsilon(self):
        return float(np.mean(list(self.epsilon.values()))) if self.epsilon else 0.0


def _by_layer(arrays):
    layers = {}
    for name, a in arrays.items():
        layers.setdefault(layer_key(name), []).append(np.asarray(a))
    return layers


def _mean_abs(arrays):
    return float(np.mean(np.abs(np.concatenate([a.ravel() for a in arrays]))))


def _checked(grads):
    if not grads:
        raise UsageError("no gradients supplied")
    for name, g in grads.items():
        if g is None:
            raise UsageError(f"gradient for {name} is missing")
    return grads


def phi_sum(grads, state):
    """Total penalty over every gradient entry, each layer at its own threshold."""
    total = 0.0
    for name, g in _checked(grads).items():
        total += float(phi0_array(np.asarray(g), state.threshold(name)).sum())
    return total


def recode_gradients(grads, state):
    """Replace ``grads`` entries in place by their recoded values.

    Default form: ``sign(g) * lam * phi0(g)``. With ``state.additive`` the
    derivative of the penalty is added instead: ``g + lam * dphi0/dg``, where
    ``dphi0/dg = sign(g) * (1 + 2|g|) / eps`` on the active region.
    """
    for name, g in _checked(grads).items():
        eps = state.threshold(name)
        a = np.abs(g)
        active = a >= eps
        if state.additive:
            g += np.where(active, np.sign(g) * state.lam * (1.0 + 2.0 * a) / eps, 0.0)
        else:
            g[...] = np.where(active, np.sign(g) * state.lam * (a + g * g) / eps, 0.0)
    return grads


def update_epsilon(state, grads):
    """EMA of per-layer mean |g|, floored so thresholds stay positive."""
    beta = state.ema_beta
    for key, gs in _by_layer(_checked(grads)).items():
        new = beta * state.epsilon[key] + (1.0 - beta) * _mean_abs(gs)
        state.epsilon[key] = max(new, EPS_FLOOR)


def baseline_recode(grads, kind, weight, params):
    """Add an L1 (``weight*sign(w)``) or L2 (``weight*w``) penalty gradient in place."""
    kind = parse_kind(kind)
    if kind is PenaltyKind.NONE:
        return grads
    if kind is PenaltyKind.SPARSE_RECODING:
        raise UsageError("baseline_recode handles l1, l2 and none only")
    by_name = {p.name: p for p in params}
    for name, g in _checked(grads).items():
        w = by_name[name].data
        g += weight * (np.sign(w) if kind is PenaltyKind.L1 else w)
    return grads
