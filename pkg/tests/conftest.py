import pytest

from monodense._accel import ENV_FLAG
from monodense.geometry import Intrinsics

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion(request):
    """Log ``criterion N: PASS|FAIL|SKIP detail`` for the end-of-run summary; ``ok=None`` is a skip."""

    def record(number, ok, detail):
        verdict = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {number}: {verdict}  {detail}"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        print(line)
        return ok

    return record


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    if request.param == "numpy":
        monkeypatch.setenv(ENV_FLAG, "1")
    else:
        monkeypatch.delenv(ENV_FLAG, raising=False)
    return request.param


@pytest.fixture
def intr_vga():
    return Intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
