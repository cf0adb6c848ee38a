import numpy as np
import pytest

from desksgg import numerics as nx


def numeric_grad(f, arr, eps=1e-6):
    """Central differences of scalar f() w.r.t. every entry of ``arr`` (modified in place)."""
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def tape_grads(build, params):
    """Run ``build()`` under a tape, backprop the scalar it returns, return grads."""
    for p in params:
        p.grad = None
    with nx.Tape() as tape:
        out = build()
    tape.backward(out)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def assert_grads_match(build, params, rtol=1e-5):
    analytic = tape_grads(build, params)

    def value():
        with nx.no_tape():
            return float(build().data)

    for p, a in zip(params, analytic):
        n = numeric_grad(value, p.data)
        err = np.max(np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n))))
        assert err < rtol, f"{p.name}: rel err {err}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
