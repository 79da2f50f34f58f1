import numpy as np
import pytest


def central_diff(f, x, eps=1e-6, idx=None):
    """Central finite differences of scalar f at x (float64), optionally only at flat indices ``idx``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = np.zeros_like(flat)
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(x.shape)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, printed at the end of the run
_criteria: dict[str, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.failed or (report.when == "call" and name not in _criteria):
        _criteria[name] = "FAIL" if report.failed else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(n.split("_")[2])):
        n, title = name.split("_", 3)[2:]
        terminalreporter.write_line(f"CRITERION {n} {_criteria[name]}: {title.replace('_', ' ')}")
