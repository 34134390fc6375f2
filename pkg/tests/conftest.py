"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""

import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "KL oracle equivalence",
    3: "loss-value fixtures",
    4: "end-to-end descent",
    5: "trend reproduction",
    6: "ablation harness parity",
    7: "structural invariants",
    8: "determinism",
}

_outcomes: dict[int, bool] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call" or report.failed:
        _outcomes[n] = _outcomes.get(n, True) and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in _outcomes:
            status = "PASS" if _outcomes[n] else "FAIL"
            terminalreporter.write_line(f"criterion {n} ({name}): {status}")
