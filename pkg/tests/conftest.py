import sys

import numpy as np
import pytest

from sceneflow.numerics import Tensor, no_grad


def numeric_grad(fn, arr, h=1e-5):
    """Central differences of scalar ``fn()`` with respect to every entry of ``arr`` (in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check_op_grad(build, shapes, rng, tol=1e-6, h=1e-5, positive=False):
    """Compare autodiff and finite differences for ``sum(build(*inputs) * w)`` with random ``w``."""
    arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    weights = rng.normal(size=out.shape)
    (out * weights).sum().backward()

    def value():
        with no_grad():
            return float(((build(*[Tensor(a) for a in arrays]).data) * weights).sum())

    for t, a in zip(tensors, arrays):
        num = numeric_grad(value, a, h)
        denom = np.maximum(np.abs(num), np.abs(t.grad)).max() + 1e-12
        assert np.abs(num - t.grad).max() / denom < tol


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[number])
