from __future__ import annotations

import pytest

_results: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    detail = getattr(item, "criterion_detail", "")
    _results[number] = (title, "PASS" if rep.passed else "FAIL", detail)


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the criterion's summary line."""
    def record(text: str) -> None:
        request.node.criterion_detail = text
    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, status, text = _results[number]
        line = f"{number:2d}. {status}  {title}"
        terminalreporter.write_line(line + (f"  [{text}]" if text else ""))
