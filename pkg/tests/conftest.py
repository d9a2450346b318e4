import pytest

CRITERIA = {
    1: "codec exhaustiveness",
    2: "gradient correctness",
    3: "metric oracles",
    4: "end-to-end learnability",
    5: "baseline harness",
    6: "likelihood consistency",
    7: "determinism",
    8: "report pipeline",
    9: "attention contracts",
}

_outcomes: dict[int, list[bool]] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    failed = report.failed
    passed = report.passed and report.when == "call"
    if failed or passed:
        _outcomes.setdefault(marker, []).append(passed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        results = _outcomes.get(n)
        if results is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n} ({name}): {status}")
