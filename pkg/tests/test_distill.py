import numpy as np
import pytest

from krdistill import autodiff as ad
from krdistill.aggregation import aggregated_parameters, build_aggregated_blocks, plan_groups
from krdistill.distill import (BatchStream, DistillConfig, GradientIsolationError, TeacherCache,
                               joint_train, kd_targets, prior_match_loss, stage2_step,
                               stage_seeds, train_supervised, weight_sparsity)
from krdistill.errors import ConfigError, DivergenceError, UsageError
from krdistill.models import Parameter, build_network
from krdistill.optim import OptimizerState, lr_schedule, proportional_steps, sgd_step
from krdistill.penalty import ThresholdState

from conftest import tiny_student_config, tiny_teacher_config


def P(values, name="w"):
    return Parameter(ad.Tensor(np.asarray(values, float), requires_grad=True), name, 0)


# ---------------------------------------------------------------- optimiser


def test_sgd_zero_gradient_keeps_weights():
    p = P([1.0, -2.0])
    sgd_step([p], {"w": np.zeros(2)}, OptimizerState(), 0.1, 0.9, 0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_sgd_single_step():
    p = P([1.0])
    state = OptimizerState()
    sgd_step([p], {"w": np.array([1.0])}, state, 0.1, 0.9, 0.0)
    assert state.velocity["w"][0] == 1.0
    assert p.data[0] == pytest.approx(0.9)


def test_sgd_momentum_recurrence():
    p = P([0.0])
    state = OptimizerState()
    sgd_step([p], {"w": np.array([1.0])}, state, 0.1, 0.9, 0.0)
    before = p.data[0]
    sgd_step([p], {"w": np.array([1.0])}, state, 0.1, 0.9, 0.0)
    assert p.data[0] - before == pytest.approx(-0.1 * 1.9)


def test_sgd_weight_decay_and_errors():
    p = P([2.0])
    sgd_step([p], {}, OptimizerState(), 1.0, 0.0, 0.5)
    assert p.data[0] == 1.0
    with pytest.raises(UsageError):
        sgd_step([p], {"w": np.zeros(3)}, OptimizerState(), 0.1)


def test_lr_schedule_examples():
    steps = [(30000, 0.01), (48000, 0.001)]
    assert lr_schedule(0, 0.1, steps) == 0.1
    assert lr_schedule(29999, 0.1, steps) == 0.1
    assert lr_schedule(30000, 0.1, steps) == 0.01
    assert lr_schedule(60000, 0.1, steps) == 0.001
    with pytest.raises(UsageError):
        lr_schedule(0, 0.1, [(5, 0.01), (2, 0.001)])


def test_proportional_steps_scale_the_nominal_breakpoints():
    steps = proportional_steps(0.1, 60000)
    assert [s for s, _ in steps] == [30000, 48000]
    assert [r for _, r in steps] == [0.01, 0.001]


# ---------------------------------------------------------------- config


def test_config_validation():
    for bad in ({"lr1": 0.0}, {"temperature": 0.0}, {"max_iter": -1}, {"interleave": (1, 0)},
                {"gamma": -1.0}, {"momentum": 1.0}, {"kd_target": "soft"},
                {"lr2_steps": [(10, 0.1)], "lr2": 0.01}, {"lr1_steps": [(10, 0.01), (5, 0.001)]}):
        with pytest.raises((ConfigError, UsageError)):
            DistillConfig(**bad)
    with pytest.raises(UsageError):
        DistillConfig(penalty="dropout")


def test_config_default_schedule_is_proportional():
    cfg = DistillConfig(max_iter=1000, lr2=0.01)
    base, steps = cfg.schedule(2)
    assert base == 0.01 and [s for s, _ in steps] == [500, 800]


def test_batch_stream_covers_each_epoch():
    s = BatchStream(10, 5, seed=0)
    first = np.concatenate([s.next(), s.next()])
    assert sorted(first) == list(range(10))
    again = BatchStream(10, 5, seed=0)
    assert np.array_equal(again.next(), first[:5])
    with pytest.raises(UsageError):
        BatchStream(0, 5, 0)


def test_stage_seeds_are_distinct():
    s2, s1 = stage_seeds(3)
    assert s2 == 3 and s1 != 3 and stage_seeds(3) == (s2, s1)


# ---------------------------------------------------------------- losses


def test_prior_zero_when_student_equals_blocks(tiny_pair, rng):
    teacher, student = tiny_pair
    blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
    assert prior_match_loss(student, blocks, rng.random((3, 1, 8, 8))).item() == 0.0


def test_prior_feature_term_zero_on_zero_batch_with_zero_blocks(tiny_pair):
    teacher, student = tiny_pair
    blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
    for p in aggregated_parameters(blocks) + student.parameters():
        p.tensor.data = np.zeros_like(p.data)
    assert prior_match_loss(student, blocks, np.zeros((2, 1, 8, 8))).item() == 0.0


def test_prior_gradients_reach_only_the_student(tiny_pair, rng):
    teacher, student = tiny_pair
    blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
    for p in student.parameters():
        p.tensor.data = p.data + 0.05
    prior_match_loss(student, blocks, rng.random((2, 1, 8, 8))).backward()
    assert all(p.grad is None for p in aggregated_parameters(blocks))
    assert student.blocks[0].parameters()[0].grad is not None


def test_prior_rejects_misaligned_blocks(tiny_pair, rng):
    teacher, student = tiny_pair
    blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
    with pytest.raises(UsageError):
        prior_match_loss(student, blocks[:1], rng.random((2, 1, 8, 8)))
    with pytest.raises(UsageError):
        prior_match_loss(student, [], rng.random((2, 1, 8, 8)))


def test_kd_targets(rng):
    logits = rng.standard_normal((2, 3))
    cfg = DistillConfig(temperature=2.0)
    np.testing.assert_allclose(kd_targets(cfg, logits, None, 3), ad.softmax(logits, 2.0))
    hard = cfg.replace(kd_target="labels")
    np.testing.assert_array_equal(kd_targets(hard, None, np.array([1, 0]), 3), ad.one_hot([1, 0], 3))
    with pytest.raises(UsageError):
        kd_targets(hard, logits, None, 3)
    with pytest.raises(UsageError):
        kd_targets(cfg, None, None, 3)


def test_weight_sparsity_ignores_biases():
    params = [P([0.0, 1.0, 0.0005, 2.0], "a.weight"), P([0.0, 0.0], "a.bias")]
    assert weight_sparsity(params) == 0.5


# ---------------------------------------------------------------- stage 2


def _stage2_setup(tiny_pair, **cfg):
    teacher, student = tiny_pair
    blocks = build_aggregated_blocks(teacher, student, plan_groups(4, 2, 2))
    config = DistillConfig(c=2, **cfg)
    thresholds = ThresholdState.from_parameters(student.parameters())
    return teacher, student, blocks, config, thresholds


def test_stage2_dead_zone_leaves_student_unchanged(tiny_pair, rng):
    teacher, student, blocks, config, th = _stage2_setup(tiny_pair, weight_decay=0.0)
    th.epsilon = {k: 1e6 for k in th.epsilon}
    before = {p.name: p.data.tobytes() for p in student.parameters()}
    x = rng.random((4, 1, 8, 8))
    stage2_step(student, blocks, x, teacher(x).data, config, th, OptimizerState(), lr=0.1)
    assert before == {p.name: p.data.tobytes() for p in student.parameters()}


def test_stage2_none_is_plain_sgd(tiny_pair, rng):
    teacher, student, blocks, config, th = _stage2_setup(tiny_pair, penalty="none", lam=0.0)
    x = rng.random((4, 1, 8, 8))
    t_logits = teacher(x).data
    twin = build_network(tiny_student_config(), init_seed=12)
    logits = twin(x)
    loss = ad.add(ad.softmax_cross_entropy(logits, ad.softmax(t_logits, 4.0), 4.0),
                  prior_match_loss(twin, build_aggregated_blocks(teacher, twin, plan_groups(4, 2, 2)), x))
    loss.backward()
    sgd_step(twin.parameters(), {p.name: p.grad for p in twin.parameters()}, OptimizerState(), 0.05)
    stage2_step(student, blocks, x, t_logits, config, th, OptimizerState(), lr=0.05)
    for a, b in zip(student.parameters(), twin.parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_stage2_updates_thresholds_and_leaves_blocks(tiny_pair, rng):
    teacher, student, blocks, config, th = _stage2_setup(tiny_pair)
    before_eps = dict(th.epsilon)
    agg_before = [p.data.tobytes() for p in aggregated_parameters(blocks)]
    x = rng.random((4, 1, 8, 8))
    prior, kd, logits = stage2_step(student, blocks, x, teacher(x).data, config, th,
                                    OptimizerState(), lr=0.001)
    assert th.epsilon != before_eps
    assert agg_before == [p.data.tobytes() for p in aggregated_parameters(blocks)]
    assert logits.shape == (4, 3) and kd > 0 and prior == 0.0


def test_stage2_catches_leaked_block_gradients(tiny_pair, rng):
    teacher, student, blocks, config, th = _stage2_setup(tiny_pair)
    aggregated_parameters(blocks)[0].tensor.grad = np.zeros_like(aggregated_parameters(blocks)[0].data)
    x = rng.random((2, 1, 8, 8))
    with pytest.raises(GradientIsolationError):
        stage2_step(student, blocks, x, teacher(x).data, config, th, OptimizerState(), lr=0.001)


# ---------------------------------------------------------------- joint training


def _cfg(**kw):
    base = dict(c=2, max_iter=30, batch_size=8, log_every=10, seed=4)
    base.update(kw)
    return DistillConfig(**base)


def test_max_iter_zero_is_a_no_op(tiny_pair, blobs):
    teacher, student = tiny_pair
    before = {p.name: p.data.tobytes() for p in student.parameters()}
    report = joint_train(teacher, student, blobs, _cfg(max_iter=0))
    assert report.records == [] and report.final["iterations"] == 0
    assert before == {p.name: p.data.tobytes() for p in student.parameters()}


def test_joint_train_records_and_balance(tiny_pair, blobs):
    teacher, student = tiny_pair
    seen = []
    report = joint_train(teacher, student, blobs, _cfg(interleave=(2, 1)), on_record=seen.append)
    assert [r.iter for r in report.records] == [10, 20, 30] and seen == report.records
    assert all(r.stage1_steps == 20 and r.stage2_steps == 10 for r in report.records)
    assert report.records[-1].test_acc is not None
    assert report.records[0].test_acc is None


def test_joint_train_is_deterministic(blobs):
    outs = []
    for _ in range(2):
        teacher = build_network(tiny_teacher_config(), 11)
        student = build_network(tiny_student_config(), 12)
        report = joint_train(teacher, student, blobs, _cfg())
        outs.append(([p.data.tobytes() for p in student.parameters()], report.records))
    assert outs[0] == outs[1]


def test_joint_train_leaves_teacher_bitwise_unchanged(tiny_pair, blobs):
    teacher, student = tiny_pair
    before = [p.data.tobytes() for p in teacher.parameters()]
    joint_train(teacher, student, blobs, _cfg())
    assert before == [p.data.tobytes() for p in teacher.parameters()]


def test_divergence_names_the_iteration(tiny_pair, blobs):
    teacher, student = tiny_pair
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergenceError) as info:
            joint_train(teacher, student, blobs, _cfg(penalty="none", lam=0.0, lr2=1e12))
    assert info.value.iteration >= 0 and str(info.value.iteration) in str(info.value)


def test_degenerate_config_matches_plain_trainer(tiny_pair, blobs):
    teacher, student = tiny_pair
    cfg = _cfg(gamma=0.0, lam=0.0, penalty="none", temperature=1.0, kd_target="labels", lr2=0.05)
    joint_train(teacher, student, blobs, cfg)
    ref = build_network(tiny_student_config(), 12)
    train_supervised(ref, blobs, cfg.max_iter, cfg.lr2, batch_size=cfg.batch_size, seed=cfg.seed)
    for a, b in zip(student.parameters(), ref.parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_windowed_loss_decreases_over_500_steps(tiny_pair, blobs):
    teacher, student = tiny_pair
    report = joint_train(teacher, student, blobs, _cfg(max_iter=500, log_every=100))
    totals = [r.prior_loss + r.kd_loss for r in report.records]
    assert totals[-1] < totals[0]


def test_teacher_cache_matches_forward(tiny_pair, blobs):
    teacher, _ = tiny_pair
    cache = TeacherCache(teacher, blobs.train.x, chunk=7)
    idx = np.array([5, 0, 40])
    logits, taps = cache.batch(idx)
    ref_logits, ref_taps = teacher.forward_with_taps(blobs.train.x[idx])
    np.testing.assert_array_equal(logits, ref_logits.data)
    for k in ref_taps:
        np.testing.assert_array_equal(taps[k].data, ref_taps[k].data)
    teacher.set_requires_grad(True)
    with pytest.raises(UsageError):
        TeacherCache(teacher, blobs.train.x)
