import os
import tempfile

import numpy as np
import pytest

# keep reference-sample and dataset caches out of the user's home directory
os.environ.setdefault("FMPE_CACHE_DIR", tempfile.mkdtemp(prefix="fmpe-test-cache-"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at flat array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f(x)
        x.flat[i] = old - h
        fm = f(x)
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record ``(ok, detail)`` for the acceptance criterion named by the test."""
    name = request.node.get_closest_marker("criterion").args[0]

    def record(ok, detail):
        ACCEPTANCE[name] = (bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok
    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
