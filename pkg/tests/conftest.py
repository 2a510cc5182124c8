import numpy as np
import pytest

from dfscad.autograd import Tensor, grad


def numeric_grad(f, arrays, step=1e-4):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. every array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + step
            fp = f(*arrays)
            a[idx] = old - step
            fm = f(*arrays)
            a[idx] = old
            g[idx] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), np.linalg.norm(a), 1e-8)


def check_gradients(build, arrays, tol=1e-4):
    """Compare analytic and finite-difference gradients of ``build(*tensors)``.

    Returns the worst relative error across inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def f(*arrs):
        return float(build(*[Tensor(x) for x in arrs]).data)

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    analytic = grad(build(*tensors), tensors)
    numeric = numeric_grad(f, arrays)
    worst = max(rel_error(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch, relative error {worst:.3g}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance reporting -------------------------------------------------------------
# Tests marked ``@pytest.mark.criterion("name")`` get one PASS/FAIL line in the
# terminal summary; ``record_property("detail", ...)`` adds measured values.

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _CRITERIA.append((marker.args[0], rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        line = f"{'PASS' if passed else 'FAIL'}  {name}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
