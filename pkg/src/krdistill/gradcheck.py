"""Central finite-difference checks for every differentiable op and composite loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .aggregation import MeasureWeight, aggregation_loss, build_aggregated_blocks, plan_groups
from .models import BlockSpec, NetworkConfig, build_network

STEP = 1e-5


def numerical_grad(f, x, step=STEP):
    """d f / d x.data by central differences; ``f`` returns a float."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if den == 0 else float(num / den)


def check(build_loss, inputs, step=STEP):
    """Worst relative error over ``inputs`` between backprop and finite differences.

    ``build_loss`` must construct a fresh scalar loss Tensor from ``inputs``.
    """
    for t in inputs:
        t.grad = None
    build_loss().backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(lambda: build_loss().item(), t, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _param(rng, *shape):
    return ad.Tensor(rng.standard_normal(shape), requires_grad=True)


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return x + np.where(x >= 0, margin, -margin)


def _weights(rng, shape):
    return ad.Tensor(rng.standard_normal(shape), requires_grad=False)


def case_matmul(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    w = _weights(rng, (3, 2))
    return lambda: ad.tensor_sum(ad.sub(ad.matmul(a, b), w)), [a, b]


def case_conv2d(rng):
    stride, pad = [(1, 1), (2, 0), (1, 0)][rng.integers(3)]
    size = 5 if stride == 2 else 4
    x, w = _param(rng, 1, 2, size, size), _param(rng, 3, 2, 3, 3)
    out_shape = ad.conv2d(x.detach(), w.detach(), stride, pad).shape
    proj = _weights(rng, out_shape)
    return lambda: ad.l2_distance(ad.conv2d(x, w, stride, pad), proj), [x, w]


def case_relu(rng):
    x = ad.Tensor(_away_from_zero(rng, (3, 4)), requires_grad=True)
    proj = _weights(rng, (3, 4))
    return lambda: ad.l2_distance(ad.relu(x), proj), [x]


def case_add_sub_scale(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 3)
    c = float(rng.uniform(-2, 2))
    proj = _weights(rng, (2, 3))
    return lambda: ad.l2_distance(ad.scale(ad.add(a, ad.sub(a, b)), c), proj), [a, b]


def case_avgpool_flatten(rng):
    x = _param(rng, 2, 2, 4, 4)
    proj = _weights(rng, (2, 8))
    return lambda: ad.l2_distance(ad.flatten(ad.avgpool2d(x, 2)), proj), [x]


def case_add_bias(rng):
    x, b = _param(rng, 3, 4), _param(rng, 4)
    proj = _weights(rng, (3, 4))
    return lambda: ad.l2_distance(ad.add_bias(x, b), proj), [x, b]


def case_softmax_cross_entropy(rng):
    z = _param(rng, 4, 5)
    targets = ad.softmax(rng.standard_normal((4, 5)))
    temperature = float(rng.uniform(0.5, 4.0))
    return lambda: ad.softmax_cross_entropy(z, targets, temperature), [z]


def case_l2_distance(rng):
    a, b = _param(rng, 3, 3), _param(rng, 3, 3)
    return lambda: ad.l2_distance(a, b), [a, b]


def case_aggregation_loss(rng):
    f_t = ad.Tensor(rng.standard_normal((2, 3, 4, 4)))
    f_a = _param(rng, 2, 3, 4, 4)
    mu = MeasureWeight(float(rng.uniform(0.1, 2.0)))
    gamma = float(rng.uniform(0.1, 3.0))
    return lambda: aggregation_loss(f_t, f_a, mu, gamma), [f_a]


def _tiny_pair(seed):
    teacher = build_network(NetworkConfig(
        blocks=(BlockSpec(3, 2, 1), BlockSpec(4, 2, 2)), input_shape=(1, 4, 4), class_count=3),
        init_seed=seed)
    student = build_network(NetworkConfig(
        blocks=(BlockSpec(2, 1, 1), BlockSpec(3, 1, 2)), input_shape=(1, 4, 4), class_count=3),
        init_seed=seed + 1)
    teacher.set_requires_grad(False)
    return teacher, student


def case_prior_match_loss(rng):
    from .distill import prior_match_loss

    seed = int(rng.integers(1 << 30))
    teacher, student = _tiny_pair(seed)
    blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
    # move the student off the aggregated copy so the weight distances are differentiable
    for p in student.parameters():
        p.tensor.data = p.data + 0.1 * rng.standard_normal(p.data.shape)
    x = ad.Tensor(rng.random((2, 1, 4, 4)))
    params = [p.tensor for b in student.blocks for p in b.parameters()]
    return lambda: prior_match_loss(student, blocks, x), params


def case_two_layer(rng):
    x = ad.Tensor(rng.standard_normal((4, 3)))
    w1, w2 = _param(rng, 3, 5), _param(rng, 5, 2)
    targets = ad.softmax(rng.standard_normal((4, 2)))
    return (lambda: ad.softmax_cross_entropy(ad.matmul(ad.relu(ad.matmul(x, w1)), w2), targets),
            [w1, w2])


def case_network(rng):
    _, student = _tiny_pair(int(rng.integers(1 << 30)))
    x = ad.Tensor(rng.random((2, 1, 4, 4)))
    targets = ad.softmax(rng.standard_normal((2, 3)))
    params = [p.tensor for p in student.parameters()]
    return lambda: ad.softmax_cross_entropy(student(x), targets, 2.0), params


CASES = {
    "matmul": case_matmul,
    "conv2d": case_conv2d,
    "relu": case_relu,
    "add/sub/scale": case_add_sub_scale,
    "avgpool2d/flatten": case_avgpool_flatten,
    "add_bias": case_add_bias,
    "softmax_cross_entropy": case_softmax_cross_entropy,
    "l2_distance": case_l2_distance,
    "aggregation_loss": case_aggregation_loss,
    "prior_match_loss": case_prior_match_loss,
    "two_layer_composite": case_two_layer,
    "residual_network": case_network,
}


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float


def run_suite(seed=0, instances=20, names=None):
    results = []
    for name in names or CASES:
        rng = np.random.default_rng([seed, sorted(CASES).index(name)])
        worst = 0.0
        for _ in range(instances):
            build, inputs = CASES[name](rng)
            worst = max(worst, check(build, inputs))
        results.append(CheckResult(name, instances, worst))
    return results
