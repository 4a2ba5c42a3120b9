import numpy as np
import pytest

from krdistill.data import synthetic_blobs
from krdistill.models import BlockSpec, NetworkConfig, build_network


def tiny_teacher_config(input_shape=(1, 8, 8), classes=3):
    return NetworkConfig(blocks=(BlockSpec(6, 2, 2), BlockSpec(8, 2, 2)),
                         input_shape=input_shape, class_count=classes)


def tiny_student_config(input_shape=(1, 8, 8), classes=3):
    return NetworkConfig(blocks=(BlockSpec(3, 1, 2), BlockSpec(4, 1, 2)),
                         input_shape=input_shape, class_count=classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blobs():
    return synthetic_blobs(class_count=3, n_train=96, n_test=48, shape=(1, 8, 8), seed=3)


@pytest.fixture
def tiny_pair():
    teacher = build_network(tiny_teacher_config(), init_seed=11)
    teacher.set_requires_grad(False)
    student = build_network(tiny_student_config(), init_seed=12)
    return teacher, student


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(criterion, ok, detail):
        line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
