import numpy as np
import pytest

from finch_kv import ModelConfig, build_model


@pytest.fixture(scope="session")
def tiny():
    """Two layers, two heads, d_head 4; cheap enough for exhaustive loops."""
    return build_model(ModelConfig(n_layers=2, n_heads=2, d_model=8, vocab=32, n_max=64), seed=3)


@pytest.fixture(scope="session")
def desk():
    """The default desk-scale model (L=4, H=4, d=64, vocab=256, n_max=512)."""
    return build_model(ModelConfig(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, printed after the run
_LABELS: dict[str, str] = {}
_VERDICTS: dict[str, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        if item.get_closest_marker("acceptance"):
            _LABELS[item.nodeid] = (item.function.__doc__ or item.name).strip().splitlines()[0]


def pytest_runtest_logreport(report):
    if report.nodeid not in _LABELS:
        return
    if report.when == "call" or not report.passed:
        if _VERDICTS.get(report.nodeid) != "FAIL":
            _VERDICTS[report.nodeid] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, label in _LABELS.items():
        if nodeid in _VERDICTS:
            terminalreporter.write_line(f"{_VERDICTS[nodeid]}  {label}")
