"""Alternating two-stage distillation.

Each iteration runs ``interleave[0]`` stage-1 steps (aggregated blocks chase
the frozen teacher's group features) followed by ``interleave[1]`` stage-2
steps. A stage-2 step trains the student on the KD soft loss plus its
distance to the aggregated blocks. The student's gradients are recoded
before the SGD update. The two stages keep separate optimizer states, batch
streams and learning-rate schedules.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .aggregation import (aggregated_features, aggregated_parameters, build_aggregated_blocks,
                          plan_groups, stage1_step)
from .errors import ConfigError, DivergenceError, KRError, NonFiniteError, UsageError
from .metrics import MetricsRow
from .optim import OptimizerState, collect_grads, lr_schedule, proportional_steps, sgd_step
from .penalty import (PenaltyKind, ThresholdState, baseline_recode, parse_kind, recode_gradients,
                      update_epsilon)

SPARSITY_TOL = 1e-3


class GradientIsolationError(KRError, AssertionError):
    """A stage produced gradients on parameters it must not touch."""


@dataclass
class DistillConfig:
    gamma: float = 1.0
    lam: float = 1.0
    temperature: float = 4.0
    max_iter: int = 5000
    interleave: tuple = (1, 1)
    lr1: float = 0.01
    lr2: float = 0.001
    lr1_steps: list | None = None  # None: breakpoints at 50% / 80% of max_iter
    lr2_steps: list | None = None
    momentum: float = 0.9
    weight_decay: float = 1e-5
    seed: int = 0
    penalty: str = "sparse_recoding"
    ema_beta: float = 0.9
    additive: bool = False
    baseline_weight: float = 5e-4  # strength of the l1/l2 baselines
    c: int = 3
    batch_size: int = 32
    kd_target: str = "teacher"  # "teacher" soft targets or "labels"
    log_every: int = 100

    def __post_init__(self):
        self.interleave = tuple(self.interleave)
        self.validate()

    def validate(self):
        self.penalty = parse_kind(self.penalty).value
        if self.lr1 <= 0 or self.lr2 <= 0:
            raise ConfigError("learning rates must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.max_iter < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("max_iter >= 0, batch_size >= 1 and log_every >= 1 required")
        if len(self.interleave) != 2 or min(self.interleave) < 0 or self.interleave[1] < 1:
            raise ConfigError(f"interleave must be (stage1_steps >= 0, stage2_steps >= 1), "
                              f"got {self.interleave}")
        if self.gamma < 0 or self.lam < 0 or self.baseline_weight < 0:
            raise ConfigError("gamma, lambda and baseline_weight must be non-negative")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum must lie in [0, 1) and weight_decay be non-negative")
        if self.kd_target not in ("teacher", "labels"):
            raise ConfigError(f"kd_target must be 'teacher' or 'labels', got {self.kd_target!r}")
        for base, steps in ((self.lr1, self.lr1_steps), (self.lr2, self.lr2_steps)):
            if steps is None:
                continue
            rates = [base] + [r for _, r in steps]
            if any(r <= 0 for r in rates) or any(b > a for a, b in zip(rates, rates[1:])):
                raise ConfigError(f"schedule must be positive and non-increasing: {rates}")
            starts = [s for s, _ in steps]
            if starts != sorted(starts):
                raise ConfigError(f"schedule breakpoints must be sorted: {starts}")

    def schedule(self, stage):
        base, steps = (self.lr1, self.lr1_steps) if stage == 1 else (self.lr2, self.lr2_steps)
        if steps is None:
            steps = proportional_steps(base, self.max_iter)
        return base, [tuple(s) for s in steps]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


class BatchStream:
    """Seeded epoch-wise shuffling; batch ``i`` depends only on ``(n, batch_size, seed)``."""

    def __init__(self, n, batch_size, seed):
        if n < 1:
            raise UsageError("cannot draw batches from an empty set")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self):
        if self._pos + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def stage_seeds(seed):
    """Seeds for the stage-2 and stage-1 batch streams."""
    return int(seed), int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])


class TeacherCache:
    """Logits and taps of a frozen teacher over a fixed image array."""

    def __init__(self, teacher, images, tap_names=None, chunk=500):
        if any(p.tensor.requires_grad for p in teacher.parameters()):
            raise UsageError("teacher must be frozen before caching its outputs")
        tap_names = teacher.tap_names if tap_names is None else list(tap_names)
        logits, taps = [], {t: [] for t in tap_names}
        for start in range(0, len(images), chunk):
            out, tp = teacher.forward_with_taps(images[start:start + chunk])
            logits.append(out.data)
            for t in tap_names:
                taps[t].append(tp[t].data)
        self.logits = np.concatenate(logits)
        self.taps = {t: np.concatenate(v) for t, v in taps.items()}

    def batch(self, idx):
        return self.logits[idx], {t: ad.Tensor(v[idx]) for t, v in self.taps.items()}


def weight_sparsity(params, tol=SPARSITY_TOL):
    """Fraction of weight entries (biases excluded) with magnitude below ``tol``."""
    ws = [p.data.ravel() for p in params if p.name.endswith(".weight")]
    flat = np.concatenate(ws)
    return float(np.mean(np.abs(flat) < tol))


def accuracy(logits, labels):
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(net, images, labels, chunk=500):
    correct = 0
    for start in range(0, len(images), chunk):
        out = net(images[start:start + chunk]).data
        correct += int(np.sum(np.argmax(out, axis=1) == labels[start:start + chunk]))
    return correct / len(images)


def prior_match_loss(student, blocks, batch, student_taps=None):
    """Distance from the student to the aggregated blocks.

    Sums, over aligned blocks, the feature distance on ``batch`` and the
    weight distance of same-shaped tensors. Aggregated values are detached.
    """
    if not blocks:
        raise UsageError("prior_match_loss needs aggregated blocks")
    if len(blocks) != len(student.blocks):
        raise UsageError(f"{len(blocks)} aggregated blocks vs {len(student.blocks)} student blocks")
    for b in blocks:
        sblock = student.blocks[b.group_index]
        if b.block.spec != sblock.spec or b.block.in_channels != sblock.in_channels:
            raise UsageError(f"aggregated block {b.group_index} is not aligned with student block")
    if student_taps is None:
        student_taps = student.forward_with_taps(batch)[1]
    agg = aggregated_features(blocks, batch)
    total = None
    for name, f_agg in zip(student.tap_names, agg):
        term = ad.l2_distance(student_taps[name], f_agg.detach())
        total = term if total is None else ad.add(total, term)
    for b in blocks:
        sblock = student.blocks[b.group_index]
        for sp, ap in zip(sblock.parameters(), b.block.parameters()):
            if sp.data.shape == ap.data.shape:
                total = ad.add(total, ad.l2_distance(sp.tensor, ap.tensor.detach()))
    return total


def _assert_no_grads(params, stage, owner):
    touched = [p.name for p in params if p.grad is not None]
    if touched:
        raise GradientIsolationError(f"stage {stage} wrote gradients into {owner}: {touched[:3]}")


def kd_targets(config, teacher_logits, labels, class_count):
    if config.kd_target == "labels":
        if labels is None:
            raise UsageError("kd_target='labels' needs labels")
        return ad.one_hot(labels, class_count)
    if teacher_logits is None:
        raise UsageError("stage 2 needs teacher logits for the KD soft loss")
    return ad.softmax(teacher_logits, config.temperature)


def stage2_step(student, blocks, batch, teacher_logits, config, threshold_state, optimizer_state,
                lr=None, labels=None):
    """One student update; returns ``(prior_loss, kd_loss, logits)``.

    The prior term is dropped when ``config.gamma == 0`` since aggregation
    is then disabled and the blocks carry no teacher knowledge.
    """
    params = student.parameters()
    for p in params:
        p.tensor.grad = None
    targets = kd_targets(config, teacher_logits, labels, student.config.class_count)
    logits, taps = student.forward_with_taps(batch)
    kd = ad.softmax_cross_entropy(logits, targets, config.temperature)
    total = kd
    prior = None
    if config.gamma > 0:
        prior = prior_match_loss(student, blocks, batch, student_taps=taps)
        total = ad.add(kd, prior)
    total.backward()
    _assert_no_grads(aggregated_parameters(blocks), 2, "aggregated blocks")

    grads = {name: (np.zeros_like(p.data) if g is None else g)
             for (name, g), p in zip(collect_grads(params).items(), params)}
    kind = PenaltyKind(config.penalty)
    if kind is PenaltyKind.SPARSE_RECODING:
        raw = {k: v.copy() for k, v in grads.items()}
        recode_gradients(grads, threshold_state)
        update_epsilon(threshold_state, raw)
    elif kind is not PenaltyKind.NONE:
        baseline_recode(grads, kind, config.baseline_weight, params)
    if lr is None:
        lr = lr_schedule(optimizer_state.iteration, *config.schedule(2))
    sgd_step(params, grads, optimizer_state, lr, config.momentum, config.weight_decay)
    for p in params:
        p.tensor.grad = None
    return (0.0 if prior is None else prior.item()), kd.item(), logits.data


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    blocks: list = field(default_factory=list)
    thresholds: ThresholdState | None = None


class _Window:
    def __init__(self):
        self.s1, self.prior, self.kd, self.correct, self.seen = [], [], [], 0, 0
        self.n1 = self.n2 = 0

    def row(self, it, eps, sparsity, test_acc=None):
        mean = lambda v: float(np.mean(v)) if v else 0.0
        return MetricsRow(iter=it, stage1_loss=mean(self.s1), prior_loss=mean(self.prior),
                          kd_loss=mean(self.kd), train_acc=self.correct / max(self.seen, 1),
                          test_acc=test_acc, mean_epsilon=eps, weight_sparsity_fraction=sparsity,
                          stage1_steps=self.n1, stage2_steps=self.n2)


def joint_train(teacher, student, data, config, on_record=None, teacher_cache=None):
    """Run the alternating optimisation for ``config.max_iter`` iterations.

    ``data`` needs ``train.x``, ``train.y`` and optionally ``test.x``/``test.y``.
    ``on_record`` is called with every :class:`MetricsRow` as it is produced.
    """
    config.validate()
    teacher.set_requires_grad(False)
    teacher_before = {p.name: p.data.tobytes() for p in teacher.parameters()}
    plan = plan_groups(teacher.config.conv_layer_count, len(student.blocks), config.c)
    blocks = build_aggregated_blocks(teacher, student, plan)
    s_params = student.parameters()
    t_params = teacher.parameters()

    train_x, train_y = data.train.x, data.train.y
    cache = teacher_cache if teacher_cache is not None else TeacherCache(teacher, train_x)
    thresholds = ThresholdState.from_parameters(s_params, config.ema_beta, config.lam,
                                                config.additive)
    opt1, opt2 = OptimizerState(), OptimizerState()
    seed2, seed1 = stage_seeds(config.seed)
    stream2 = BatchStream(len(train_x), config.batch_size, seed2)
    stream1 = BatchStream(len(train_x), config.batch_size, seed1)
    sched1, sched2 = config.schedule(1), config.schedule(2)
    n1, n2 = config.interleave

    report = TrainReport(blocks=blocks, thresholds=thresholds)
    window = _Window()
    for it in range(config.max_iter):
        lr1 = lr_schedule(it, *sched1)
        lr2 = lr_schedule(it, *sched2)
        try:
            for _ in range(n1):
                idx = stream1.next()
                _, taps = cache.batch(idx)
                loss1 = stage1_step(blocks, teacher, train_x[idx], config.gamma, opt1, lr1,
                                    config.momentum, config.weight_decay, teacher_taps=taps)
                _assert_no_grads(s_params, 1, "student")
                _assert_no_grads(t_params, 1, "teacher")
                window.s1.append(loss1)
                window.n1 += 1
            for _ in range(n2):
                idx = stream2.next()
                t_logits, _ = cache.batch(idx)
                prior, kd, logits = stage2_step(student, blocks, train_x[idx], t_logits, config,
                                                thresholds, opt2, lr2, labels=train_y[idx])
                _assert_no_grads(t_params, 2, "teacher")
                window.prior.append(prior)
                window.kd.append(kd)
                window.correct += int(np.sum(np.argmax(logits, axis=1) == train_y[idx]))
                window.seen += len(idx)
                window.n2 += 1
        except NonFiniteError as exc:
            raise DivergenceError(it, f"non-finite value during training ({exc})") from exc
        total = (window.s1[-1] if window.s1 else 0.0) + window.prior[-1] + window.kd[-1]
        if not np.isfinite(total):
            raise DivergenceError(it, f"total loss is {total}")
        done = it + 1
        if done % config.log_every == 0 or done == config.max_iter:
            test_acc = None
            if done == config.max_iter and getattr(data, "test", None) is not None:
                test_acc = evaluate(student, data.test.x, data.test.y)
            row = window.row(done, thresholds.mean_epsilon(), weight_sparsity(s_params), test_acc)
            report.records.append(row)
            if on_record is not None:
                on_record(row)
            window = _Window()

    if any(p.data.tobytes() != teacher_before[p.name] for p in t_params):
        raise GradientIsolationError("teacher parameters changed during joint_train")
    report.final = {
        "iterations": config.max_iter,
        "mean_epsilon": thresholds.mean_epsilon(),
        "weight_sparsity_fraction": weight_sparsity(s_params),
    }
    if report.records and report.records[-1].test_acc is not None:
        report.final["test_acc"] = report.records[-1].test_acc
    return report


def train_supervised(net, data, max_iter, lr, steps=None, momentum=0.9, weight_decay=1e-5,
                     batch_size=32, seed=0, log_every=100, on_record=None):
    """Plain hard-label SGD; the reference trainer for a student trained alone.

    Batches come from the same stream ``joint_train`` uses for stage 2.
    """
    train_x, train_y = data.train.x, data.train.y
    if steps is None:
        steps = proportional_steps(lr, max_iter)
    params = net.parameters()
    state = OptimizerState()
    stream = BatchStream(len(train_x), batch_size, stage_seeds(seed)[0])
    k = net.config.class_count
    report = TrainReport()
    losses, correct, seen = [], 0, 0
    for it in range(max_iter):
        idx = stream.next()
        for p in params:
            p.tensor.grad = None
        try:
            logits = net(train_x[idx])
            loss = ad.softmax_cross_entropy(logits, ad.one_hot(train_y[idx], k), 1.0)
            loss.backward()
        except NonFiniteError as exc:
            raise DivergenceError(it, str(exc)) from exc
        grads = {p.name: p.grad for p in params}
        sgd_step(params, grads, state, lr_schedule(it, lr, steps), momentum, weight_decay)
        losses.append(loss.item())
        correct += int(np.sum(np.argmax(logits.data, axis=1) == train_y[idx]))
        seen += len(idx)
        done = it + 1
        if done % log_every == 0 or done == max_iter:
            test_acc = None
            if done == max_iter and getattr(data, "test", None) is not None:
                test_acc = evaluate(net, data.test.x, data.test.y)
            row = MetricsRow(iter=done, stage1_loss=0.0, prior_loss=0.0,
                             kd_loss=float(np.mean(losses)), train_acc=correct / seen,
                             test_acc=test_acc, mean_epsilon=0.0,
                             weight_sparsity_fraction=weight_sparsity(params),
                             stage1_steps=0, stage2_steps=len(losses))
            report.records.append(row)
            if on_record is not None:
                on_record(row)
            losses, correct, seen = [], 0, 0
    for p in params:
        p.tensor.grad = None
    if report.records and report.records[-1].test_acc is not None:
        report.final["test_acc"] = report.records[-1].test_acc
    return report
