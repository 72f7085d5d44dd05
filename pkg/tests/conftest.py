import numpy as np
import pytest

from advforecast.data import ReturnsTransform, ar1_model
from advforecast.model import init_model


@pytest.fixture
def toy_model():
    return init_model(hidden=4, layers=1, seed=3)


@pytest.fixture
def price_model():
    return init_model(hidden=4, layers=1, seed=1, transform=ReturnsTransform(0.0, 0.02))


@pytest.fixture
def ar1():
    return ar1_model(0.7, 0.1, 0.1)


@pytest.fixture
def prices():
    rng = np.random.default_rng(0)
    return 10.0 * np.exp(np.cumsum(rng.normal(0.0, 0.02, 12)))


# --------------------------------------------------------- acceptance ledger
# Tests marked ``criterion(k)`` report one PASS/FAIL line per criterion at the
# end of the session; a criterion passes only if every test carrying it did.

_verdicts: dict[int, list] = {}
_notes: dict[int, list] = {}


@pytest.fixture
def notes(request):
    """Append short result strings that are echoed next to the verdict."""
    marker = request.node.get_closest_marker("criterion")
    return _notes.setdefault(marker.args[0], []) if marker else []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    k = marker.args[0]
    if report.failed:
        _verdicts.setdefault(k, []).append(False)
    elif report.when == "call" and report.passed:
        _verdicts.setdefault(k, []).append(True)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_verdicts):
        ok = all(_verdicts[k])
        extra = "; ".join(_notes.get(k, []))
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}" + (f"  ({extra})" if extra else ""))
