import pytest

CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, budget): acceptance criterion with a runtime budget in seconds")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call":
        return
    number, budget = mark.args
    CRITERIA[number] = {"name": item.name, "passed": report.passed, "seconds": report.duration,
                        "budget": budget, "note": getattr(item, "criterion_note", "")}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        c = CRITERIA[number]
        status = "PASS" if c["passed"] else "FAIL"
        line = f"criterion {number:2d}: {status}  {c['name']}  {c['seconds']:.1f}s (budget {c['budget']}s)"
        if c["note"]:
            line += f"  {c['note']}"
        terminalreporter.write_line(line)
