import numpy as np
import pytest

from mlvfuse.volume import LabelVolume, VolumeGeometry

_criteria = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    crit = report.user_properties and dict(report.user_properties).get("criterion")
    if crit:
        _criteria[crit] = report.outcome


@pytest.fixture(autouse=True)
def _record_criterion(request):
    marker = request.node.get_closest_marker("criterion")
    if marker:
        number, title = marker.args
        request.node.user_properties.append(("criterion", f"{number:>2}. {title}"))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda s: int(s.split(".")[0])):
        outcome = "PASS" if _criteria[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{outcome}  {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_labels(rng, dims, n_labels):
    geom = VolumeGeometry(dims)
    return LabelVolume(geom, rng.integers(0, n_labels, size=dims))
