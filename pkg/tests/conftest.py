"""Per-criterion PASS/FAIL summary for the acceptance suite."""

import pytest

_results: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or report.failed or report.skipped:
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        verdict = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        if number not in _results or _results[number][0] == "PASS":
            _results[number] = (verdict, title, detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result().acceptance = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        verdict, title, detail = _results[number]
        line = f"criterion {number} [{verdict}] {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
