import numpy as np
import pytest

from pbe_moments.experiments.config import ExperimentConfig
from pbe_moments.kernels import KernelSet, VolumeDomain


@pytest.fixture
def unit_domain():
    return VolumeDomain(0.1, 1.0)


@pytest.fixture(scope="session")
def desk_breakage():
    return ExperimentConfig(kind="breakage")


@pytest.fixture(scope="session")
def desk_aggregation():
    return ExperimentConfig(kind="aggregation")


def custom_kernels(domain, frequency=None, rate=None, p=2, m=2):
    """Kernel set with the given callables and every physical process off."""
    return KernelSet(domain, breakage=None, aggregation=None, frequency=frequency,
                     aggregation_rate=rate, p=p, m=m)


def constant(c):
    return lambda *args: np.full(np.broadcast(*args).shape, float(c))


# --- acceptance report --------------------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    entry = _CRITERIA.setdefault(mark.args[0], {"title": mark.args[1], "ok": True, "notes": []})
    entry["ok"] &= not rep.failed
    if rep.when == "call":
        entry["notes"] += [str(v) for k, v in item.user_properties if k == "detail"]
        if rep.failed:
            entry["notes"].append(f"failed: {item.name}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {entry['title']}")
        for note in entry["notes"]:
            terminalreporter.write_line(f"    {note}")
