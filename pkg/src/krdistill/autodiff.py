"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the residual networks and distillation losses need are
provided. Every op checks its output for NaN/Inf and raises
:class:`NonFiniteError` instead of propagating garbage.

Gradients are only tracked when at least one input has ``requires_grad``.
``backward`` replays the recorded ops in exact reverse creation order, so
accumulation order (and therefore every bit of every gradient) is fixed for a
fixed program.
"""
from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NonFiniteError, UsageError, ValidationError

_sequence = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = next(_sequence)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Same values, no gradient tracking."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(array, what):
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values produced by {what}")


def _result(data, parents, backward_fn, name):
    """Wrap an op output, recording it on the tape when any parent needs grad."""
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_sequence)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Ops reachable from a loss, ordered by execution."""

    def __init__(self, records):
        self.records = records

    @classmethod
    def from_loss(cls, loss):
        seen = set()
        records = []
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._backward is not None:
                records.append(node)
                stack.extend(node._parents)
        records.sort(key=lambda t: t._seq)
        return cls(records)

    def __len__(self):
        return len(self.records)


def backward(loss):
    """Populate ``.grad`` on everything upstream of a scalar ``loss``.

    Gradients accumulate: call ``zero_grad`` between steps to reset.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(Tape.from_loss(loss).records):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, "backward")
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------- elementwise


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scale(a, factor):
    """Multiply by a constant scalar."""
    a = as_tensor(a)
    factor = float(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tensor_sum(a):
    a = as_tensor(a)
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape {old} -> {shape}: {exc}") from None
    return _result(data, (a,), lambda g: (g.reshape(old),), "reshape")


def flatten(a):
    """Collapse every axis after the first."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def add_bias(x, b):
    """Row-wise bias: ``x`` is N×K, ``b`` is K."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} + {b.shape}")
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), grad_fn, "matmul")


def _out_extent(size, k, stride, pad, what):
    span = size + 2 * pad - k
    if span < 0:
        raise DimensionError(f"{what}: kernel {k} larger than padded input {size + 2 * pad}")
    if span % stride:
        raise DimensionError(
            f"{what}: ({size} + 2*{pad} - {k}) is not divisible by stride {stride}")
    return span // stride + 1


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation of N×C×H×W input with F×C×k×k weights (no bias)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, wc, k, k2 = w.shape
    if wc != c or k != k2:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: stride={stride}, pad={pad}")
    ho = _out_extent(h, k, stride, pad, "conv2d")
    wo = _out_extent(wd, k, stride, pad, "conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # N, C, Ho, Wo, k, k
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    wdata = w.data
    padded_shape = xp.shape

    def grad_fn(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            # N, Ho, Wo, C, k, k
            dcols = np.tensordot(g, wdata, axes=([1], [0]))
            gxp = np.zeros(padded_shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), grad_fn, "conv2d")


def avgpool2d(x, k):
    """Non-overlapping k×k mean pooling; spatial extents must divide by k."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"avgpool2d expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise DimensionError(f"avgpool2d: {h}×{w} not divisible by window {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    inv = 1.0 / (k * k)

    def grad_fn(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) * inv,)

    return _result(out, (x,), grad_fn, "avgpool2d")


# ---------------------------------------------------------------- losses


def softmax(logits, temperature=1.0):
    """Row softmax of a plain array at the given temperature."""
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(student_logits, teacher_probs, temperature=1.0):
    """Mean over the batch of ``-sum p_t * log softmax(logits / T)``.

    ``teacher_probs`` is treated as a constant target.
    """
    s = as_tensor(student_logits)
    p = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs, float)
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    if s.data.ndim != 2 or p.shape != s.shape:
        raise DimensionError(f"softmax_cross_entropy: logits {s.shape} vs targets {p.shape}")
    if s.shape[1] < 2:
        raise ValidationError("softmax_cross_entropy needs at least 2 classes")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise ValidationError("teacher probability rows must be non-negative and sum to 1")
    n = s.shape[0]
    logq = _log_softmax(s.data / temperature)
    loss = -(p * logq).sum() / n

    def grad_fn(g):
        return ((np.exp(logq) - p) * (float(g) / (temperature * n)),)

    return _result(np.array(loss), (s,), grad_fn, "softmax_cross_entropy")


def one_hot(labels, class_count):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, class_count))
    out[np.arange(labels.size), labels] = 1.0
    return out


def l2_distance(a, b):
    """Euclidean norm of ``a - b`` over all elements.

    The gradient at ``a == b`` is taken as zero.
    """
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "l2_distance")
    diff = a.data - b.data
    dist = float(np.sqrt(np.sum(diff * diff)))

    def grad_fn(g):
        if dist == 0.0:
            z = np.zeros_like(diff)
            return z, z
        ga = diff * (float(g) / dist)
        return ga, -ga

    return _result(np.array(dist), (a, b), grad_fn, "l2_distance")
