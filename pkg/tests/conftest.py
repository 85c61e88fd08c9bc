import numpy as np
import pytest

from vir.tensor import Rng, fill_uniform


@pytest.fixture
def rand():
    """Seeded uniform(-1, 1) arrays: ``rand(shape, seed=0)``."""
    def make(shape, seed=0):
        return fill_uniform(Rng(seed), shape, -1.0, 1.0)
    return make


def qkv(seed, n, dk, dv=None):
    rng = Rng(seed)
    dv = dk if dv is None else dv
    return (fill_uniform(rng, (n, dk), -1.0, 1.0), fill_uniform(rng, (n, dk), -1.0, 1.0),
            fill_uniform(rng, (n, dv), -1.0, 1.0))


def max_diff(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


_criteria = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    ok, names = _criteria.get(number, (True, title))
    _criteria[number] = (ok and report.outcome == "passed", names)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        ok, title = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")
