import itertools

import numpy as np
import pytest

from krdistill import autodiff as ad
from krdistill.aggregation import (MeasureWeight, aggregated_parameters, aggregation_loss,
                                   build_aggregated_blocks, group_parameters, group_taps,
                                   measure_weight, optimal_coupling, plan_groups, stage1_loss,
                                   stage1_step, transport_cost_oracle)
from krdistill.errors import DimensionError, PlanningError, UsageError
from krdistill.models import Parameter, build_network, preset
from krdistill.optim import OptimizerState

sq = lambda a, b: float(np.sum((np.asarray(a, float) - np.asarray(b, float)) ** 2))


def test_plan_examples():
    assert plan_groups(6, 2, 3).groups == ((0, 1, 2), (3, 4, 5))
    assert plan_groups(8, 2, 4).groups == ((0, 1, 2, 3), (4, 5, 6, 7))
    with pytest.raises(PlanningError, match="7"):
        plan_groups(7, 2, 3)
    with pytest.raises(PlanningError):
        plan_groups(6, 0, 3)


def test_group_taps_need_block_boundaries():
    teacher = build_network(preset("T6"), 0)
    assert group_taps(plan_groups(6, 2, 3), teacher) == ["block0", "block1"]
    with pytest.raises(PlanningError, match="boundary"):
        group_taps(plan_groups(6, 3, 2), teacher)


def test_group_parameters_cover_group_layers():
    teacher = build_network(preset("T6"), 0)
    names = [p.name for p in group_parameters(teacher, (3, 4, 5))]
    assert names == ["block1.conv0.weight", "block1.conv1.weight", "block1.conv2.weight",
                     "block1.shortcut.weight"]


def _param(values):
    return [Parameter(ad.Tensor(np.asarray(values, float)), "p", 0)]


def test_measure_weight_examples():
    assert measure_weight(_param([3.0, 3.0])).value == 0.0
    assert measure_weight(_param([0.0, 2.0])).value == 1.0
    base = np.random.default_rng(0).standard_normal(50)
    assert measure_weight(_param(-4 * base)).value == pytest.approx(
        4 * measure_weight(_param(base)).value, rel=1e-12)
    with pytest.raises(UsageError):
        measure_weight([])


def test_aggregation_loss_examples():
    f = ad.Tensor(np.ones((2, 2)))
    assert aggregation_loss(f, ad.Tensor(np.ones((2, 2))), MeasureWeight(3.0), 2.0).item() == 0
    assert aggregation_loss([3.0, 4.0], ad.Tensor([0.0, 0.0]), MeasureWeight(0.5), 2.0).item() == 5.0
    assert aggregation_loss([3.0, 4.0], ad.Tensor([0.0, 0.0]), 0.5, 0.0).item() == 0.0
    with pytest.raises(DimensionError):
        aggregation_loss([1.0], ad.Tensor([1.0, 2.0]), 1.0, 1.0)


def test_aggregation_loss_detaches_teacher():
    f_t = ad.Tensor([1.0, 2.0], requires_grad=True)
    f_a = ad.Tensor([0.0, 0.0], requires_grad=True)
    aggregation_loss(f_t, f_a, 1.0, 1.0).backward()
    assert f_t.grad is None and f_a.grad is not None


def test_aggregation_loss_zero_iff_identical(rng):
    a = rng.standard_normal(5)
    b = a.copy()
    b[2] += 1e-9
    assert aggregation_loss(a, ad.Tensor(a.copy()), 1.0, 1.0).item() == 0.0
    assert aggregation_loss(a, ad.Tensor(b), 1.0, 1.0).item() > 0.0


def test_transport_oracle_examples():
    assert transport_cost_oracle([1.0, 5.0, 2.0], [5.0, 2.0, 1.0], sq) == 0.0
    assert transport_cost_oracle([0.0], [3.0], sq) == 9.0
    assert transport_cost_oracle([0.0, 2.0], [1.0, 3.0], sq) == 1.0
    with pytest.raises(UsageError):
        transport_cost_oracle([0.0], [1.0, 2.0], sq)


def test_coupling_is_a_bijection_and_optimal(rng):
    for n in range(1, 7):
        a, b = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
        cost, perm = optimal_coupling(list(a), list(b), sq)
        assert sorted(perm) == list(range(n))
        brute = min(sum(sq(a[i], b[p[i]]) for i in range(n)) for p in itertools.permutations(range(n)))
        assert cost == pytest.approx(brute / n)


def test_aggregated_blocks_copy_student_and_are_isolated(tiny_pair):
    teacher, student = tiny_pair
    blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
    assert len(blocks) == 2
    for b, sblock in zip(blocks, student.blocks):
        for ap, sp in zip(b.block.parameters(), sblock.parameters()):
            assert ap.name == "agg." + sp.name
            assert ap.data.tobytes() == sp.data.tobytes()
            assert ap.tensor is not sp.tensor
    fresh = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2), init_seed=5)
    assert fresh[0].block.parameters()[0].data.tobytes() != \
        student.blocks[0].parameters()[0].data.tobytes()


def test_mu_is_group_std(tiny_pair):
    teacher, student = tiny_pair
    blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
    expected = measure_weight(group_parameters(teacher, (0, 1))).value
    assert blocks[0].mu.value == expected


def test_adapted_shapes_match_teacher_taps(tiny_pair, rng):
    teacher, student = tiny_pair
    blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
    x = rng.random((2, 1, 8, 8))
    _, taps = teacher.forward_with_taps(x)
    h = ad.Tensor(x)
    for b in blocks:
        h = b.features(h)
        assert b.adapter(h).shape == taps[b.teacher_tap].shape


def test_stage1_gamma_zero_changes_nothing(tiny_pair, rng):
    teacher, student = tiny_pair
    blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
    before = [p.data.copy() for p in aggregated_parameters(blocks)]
    assert stage1_step(blocks, teacher, rng.random((4, 1, 8, 8)), 0.0, OptimizerState()) == 0.0
    for b, p in zip(before, aggregated_parameters(blocks)):
        assert b.tobytes() == p.data.tobytes()


def test_stage1_requires_frozen_teacher_and_blocks(tiny_pair, rng):
    teacher, student = tiny_pair
    blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
    with pytest.raises(UsageError):
        stage1_step([], teacher, rng.random((2, 1, 8, 8)), 1.0, OptimizerState())
    teacher.set_requires_grad(True)
    with pytest.raises(UsageError, match="frozen"):
        stage1_step(blocks, teacher, rng.random((2, 1, 8, 8)), 1.0, OptimizerState())


def test_stage1_touches_only_aggregated_parameters(tiny_pair, rng):
    teacher, student = tiny_pair
    blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
    t_before = {p.name: p.data.tobytes() for p in teacher.parameters()}
    s_before = {p.name: p.data.tobytes() for p in student.parameters()}
    a_before = [p.data.copy() for p in aggregated_parameters(blocks)]
    stage1_step(blocks, teacher, rng.random((4, 1, 8, 8)), 1.0, OptimizerState())
    assert t_before == {p.name: p.data.tobytes() for p in teacher.parameters()}
    assert s_before == {p.name: p.data.tobytes() for p in student.parameters()}
    assert any(b.tobytes() != p.data.tobytes() for b, p in zip(a_before, aggregated_parameters(blocks)))
    assert all(p.grad is None for p in student.parameters() + teacher.parameters())
    assert all(p.grad is None for p in aggregated_parameters(blocks))


def _window_means(values, width):
    return [float(np.mean(values[i:i + width])) for i in range(0, len(values), width)]


def test_stage1_loss_trends_down_on_toy_net(tiny_pair, blobs):
    teacher, student = tiny_pair
    blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
    opt = OptimizerState()
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(200):
        idx = rng.choice(len(blobs.train), 16, replace=False)
        losses.append(stage1_step(blocks, teacher, blobs.train.x[idx], 1.0, opt, lr=0.01))
    means = _window_means(losses, 50)
    assert means[-1] <= means[0]


def test_stage1_deterministic(tiny_pair, rng):
    teacher, student = tiny_pair
    x = rng.random((4, 1, 8, 8))
    runs = []
    for _ in range(2):
        blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
        opt = OptimizerState()
        for _ in range(5):
            stage1_step(blocks, teacher, x, 1.0, opt, lr=0.01)
        runs.append([p.data.tobytes() for p in aggregated_parameters(blocks)])
    assert runs[0] == runs[1]


def test_stage1_loss_sums_groups(tiny_pair, rng):
    teacher, student = tiny_pair
    blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
    x = rng.random((2, 1, 8, 8))
    _, taps = teacher.forward_with_taps(x)
    total = stage1_loss(blocks, taps, x, 2.0).item()
    h, parts = ad.Tensor(x), 0.0
    for b in blocks:
        h = b.features(h)
        parts += 2.0 * b.mu.value * np.linalg.norm(taps[b.teacher_tap].data - b.adapter(h).data)
    assert total == pytest.approx(parts, rel=1e-12)
