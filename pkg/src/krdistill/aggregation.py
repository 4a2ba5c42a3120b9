"""Deep knowledge aggregation: fit student-shaped blocks to groups of teacher layers.

Each group of ``c`` contiguous teacher conv layers is paired with one block
that has the student's topology. Stage 1 trains those blocks (chained, input
to output) so that their adapted feature maps match the teacher's feature
maps at each group boundary. Each group's distance is weighted by ``gamma``
times the standard deviation of the group's teacher weights.

``transport_cost_oracle`` solves tiny uniform-measure transport problems
exactly by enumerating permutations. Tests use it as a reference.
"""
from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, PlanningError, UsageError
from .models import IdentityMapping, ResidualBlock, param_stats
from .optim import sgd_step


@dataclass(frozen=True)
class GroupingPlan:
    c: int
    groups: tuple
    target_block: tuple

    def __len__(self):
        return len(self.groups)


def plan_groups(teacher_conv_layers, student_blocks, c):
    """Split teacher conv layers into contiguous runs of ``c``, one per student block."""
    if c < 1 or student_blocks < 1:
        raise PlanningError(f"c and student_blocks must be positive (c={c}, blocks={student_blocks})")
    if teacher_conv_layers != student_blocks * c:
        raise PlanningError(
            f"teacher has {teacher_conv_layers} conv layers but {student_blocks} student blocks "
            f"x c={c} needs {student_blocks * c}")
    groups = tuple(tuple(range(i * c, (i + 1) * c)) for i in range(student_blocks))
    return GroupingPlan(c=c, groups=groups, target_block=tuple(range(student_blocks)))


def group_taps(plan, teacher):
    """Teacher tap closing each group; groups must end on teacher block boundaries."""
    ends = {}
    last = -1
    for name, block in zip(teacher.tap_names, teacher.blocks):
        last += block.spec.convs
        ends[last] = name
    taps = []
    for i, group in enumerate(plan.groups):
        if group[-1] not in ends:
            raise PlanningError(
                f"group {i} ends at teacher conv layer {group[-1]}, which is not a block boundary")
        taps.append(ends[group[-1]])
    return taps


def group_parameters(teacher, group):
    layers = set(group)
    return [p for p in teacher.parameters() if p.layer_index in layers and p.name.startswith("block")]


@dataclass(frozen=True)
class MeasureWeight:
    value: float


def measure_weight(group_params):
    """Population standard deviation of every scalar in the group."""
    if not group_params:
        raise UsageError("measure_weight needs a non-empty parameter group")
    return MeasureWeight(param_stats(group_params)[1])


def aggregation_loss(f_teacher_group, f_agg, mu, gamma):
    """``gamma * mu * ||F_teacher - F_agg||_2`` with the teacher side detached."""
    f_t = ad.as_tensor(f_teacher_group).detach()
    f_agg = ad.as_tensor(f_agg)
    if f_t.shape != f_agg.shape:
        raise DimensionError(f"aggregation_loss: teacher {f_t.shape} vs aggregated {f_agg.shape}")
    value = mu.value if isinstance(mu, MeasureWeight) else float(mu)
    return ad.scale(ad.l2_distance(f_t, f_agg), gamma * value)


def optimal_coupling(points_a, points_b, cost):
    """Exact minimum-cost bijection between two uniform point sets.

    Returns ``(mean cost, permutation)`` where ``a[i]`` is sent to ``b[perm[i]]``.
    """
    n = len(points_a)
    if n != len(points_b):
        raise UsageError(f"cardinality mismatch: {n} vs {len(points_b)}")
    if n == 0:
        raise UsageError("empty point sets")
    if n > 8:
        raise UsageError(f"enumeration limited to 8 points, got {n}")
    table = [[cost(a, b) for b in points_b] for a in points_a]
    best, best_perm = None, None
    for perm in itertools.permutations(range(n)):
        total = sum(table[i][perm[i]] for i in range(n))
        if best is None or total < best:
            best, best_perm = total, perm
    # uniform masses: a bijection moves every unit of mass exactly once
    assert sorted(best_perm) == list(range(n))
    return best / n, best_perm


def transport_cost_oracle(points_a, points_b, cost):
    return optimal_coupling(points_a, points_b, cost)[0]


class AggregatedBlock:
    """Student-shaped block standing in for one teacher group, plus its adapter.

    The adapter maps the block output onto the teacher group's feature shape.
    """

    def __init__(self, block, adapter, group_index, mu, teacher_tap):
        self.block = block
        self.adapter = adapter
        self.group_index = group_index
        self.mu = mu
        self.teacher_tap = teacher_tap

    def parameters(self):
        return self.block.parameters() + self.adapter.parameters()

    def features(self, x):
        return self.block(x)

    def adapted(self, x):
        return self.adapter(self.block(x))


def build_aggregated_blocks(teacher, student, plan, init_seed=None):
    """One aggregated block per group.

    By default the block weights start as copies of the student's current
    block weights; pass ``init_seed`` to draw them fresh instead.
    """
    if len(plan) != len(student.blocks):
        raise UsageError(f"plan has {len(plan)} groups but student has {len(student.blocks)} blocks")
    taps = group_taps(plan, teacher)
    teacher_shapes = dict(zip(teacher.tap_names, teacher.config.block_shapes()))
    student_shapes = student.config.block_shapes()
    rng = np.random.default_rng(0 if init_seed is None else init_seed)
    blocks = []
    for i, (group, target) in enumerate(zip(plan.groups, plan.target_block)):
        sblock = student.blocks[target]
        if init_seed is None:
            block = copy.deepcopy(sblock)
        else:
            first = sblock.convs[0].layer_index
            block = ResidualBlock(sblock.prefix, sblock.spec, sblock.in_channels, first, rng)
        for p in block.parameters():
            p.name = "agg." + p.name
            p.tensor.requires_grad = True
            p.tensor.grad = None
        tc, th, tw = teacher_shapes[taps[i]]
        sc, sh, sw = student_shapes[target]
        if sh % th or sw % tw or sh // th != sw // tw:
            raise DimensionError(
                f"group {i}: student block map {sh}×{sw} cannot be pooled onto teacher map {th}×{tw}")
        adapter = IdentityMapping(f"agg.block{target}.adapter.weight", sc, tc, sh // th, rng)
        mu = measure_weight(group_parameters(teacher, group))
        blocks.append(AggregatedBlock(block, adapter, i, mu, taps[i]))
    return blocks


def aggregated_parameters(blocks):
    return [p for b in blocks for p in b.parameters()]


def aggregated_features(blocks, x):
    """Chain the aggregated blocks over ``x``; returns each block's raw output."""
    feats = []
    h = ad.as_tensor(x)
    for b in blocks:
        h = b.features(h)
        feats.append(h)
    return feats


def stage1_loss(blocks, teacher_taps, x, gamma):
    total = None
    h = ad.as_tensor(x)
    for b in blocks:
        h = b.features(h)
        term = aggregation_loss(teacher_taps[b.teacher_tap], b.adapter(h), b.mu, gamma)
        total = term if total is None else ad.add(total, term)
    return total


def _check_frozen(teacher):
    if any(p.tensor.requires_grad for p in teacher.parameters()):
        raise UsageError("teacher must be frozen (requires_grad=False) for aggregation")


def stage1_step(blocks, teacher, batch, gamma, optimizer_state, lr=0.1, momentum=0.9,
                weight_decay=1e-5, teacher_taps=None):
    """One SGD step on the aggregated blocks and their adapters.

    ``teacher_taps`` may be supplied precomputed for ``batch``; otherwise the
    frozen teacher is run. With ``gamma == 0`` the term is disabled and
    nothing is updated.
    """
    if not blocks:
        raise UsageError("no aggregated blocks: build them from a grouping plan first")
    _check_frozen(teacher)
    if gamma == 0:
        return 0.0
    if teacher_taps is None:
        teacher_taps = teacher.forward_with_taps(batch)[1]
    params = aggregated_parameters(blocks)
    for p in params:
        p.tensor.grad = None
    loss = stage1_loss(blocks, teacher_taps, batch, gamma)
    loss.backward()
    sgd_step(params, {p.name: p.grad for p in params}, optimizer_state, lr, momentum, weight_decay)
    for p in params:
        p.tensor.grad = None
    return loss.item()
