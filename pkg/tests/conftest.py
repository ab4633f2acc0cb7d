import numpy as np
import pytest

from intrinsic_decomp import autodiff as ad


def _numeric_grad(f, x, eps=1e-6):
    """Central differences of a scalar function of one float64 array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def _analytic_and_numeric(build, x, seed=0):
    """Gradient of <build(x), p> for a fixed random projection p, both ways."""
    x = np.asarray(x, dtype=np.float64)
    tape = ad.Tape(np.float64)
    out = build(tape.leaf(x))
    p = np.random.default_rng(seed).standard_normal(out.shape)

    def scalar(arr):
        t = ad.Tape(np.float64)
        return float((build(t.leaf(arr)).value * p).sum())

    xn = tape.nodes[0]
    loss = ad.total(ad.mul(out, p))
    tape.backward(loss)
    return xn.grad.copy(), _numeric_grad(scalar, x)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def numeric_grad():
    return _numeric_grad


@pytest.fixture
def grad_pair():
    return _analytic_and_numeric


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


@pytest.fixture
def relerr():
    return rel_err


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record an acceptance verdict line; all lines are repeated in the
    terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])

    def emit(number, title, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {title} -- {detail}"
        lines.append(line)
        print(line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
