import numpy as np
import pytest

from esrt.gradcheck import fd_check
from esrt.tensor import Tensor, mul, sum_


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, shape, name, low=None, high=None):
    if low is None:
        data = rng.standard_normal(shape)
    else:
        data = rng.uniform(low, high, shape)
    return Tensor(data, requires_grad=True, name=name)


def op_grad_error(fn, leaves, seed):
    """Max relative FD error of ``sum(fn(*leaves) * R)`` over every entry."""
    rng = np.random.default_rng(seed + 99)
    weights = Tensor(rng.standard_normal(fn(*leaves).shape))
    errs = fd_check(lambda: sum_(mul(fn(*leaves), weights)), {t.name: t for t in leaves}, seed=seed)
    return max(errs.values())


ACCEPTANCE_LINES: list[str] = []


def record(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
