import numpy as np
import pytest

from cfprompt.numerics import central_difference_grad, forward_and_grad, relative_error

GRAD_SEEDS = range(20)


def fd_relative_error(fn, params, step=1e-5):
    """Worst relative error between autodiff and central differences over all parameters."""
    _, grads = forward_and_grad(fn, params)
    worst = 0.0
    for name, value in params.items():
        def scalar(arr, name=name):
            p = dict(params)
            p[name] = arr
            return float(fn(p).data)

        fd = central_difference_grad(scalar, value, step)
        worst = max(worst, relative_error(grads[name], fd))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: criterion number -> (passed, detail)
ACCEPTANCE = {}


def record(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
