import pytest

_RESULTS: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    crit = marker.kwargs["criterion"]
    detail = dict(item.user_properties).get("detail", "")
    if report.failed and not detail:
        detail = str(report.longrepr).strip().splitlines()[-1][:160]
    _RESULTS.setdefault(crit, []).append((marker.kwargs.get("title", item.name), report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_RESULTS):
        entries = _RESULTS[crit]
        ok = all(passed for _, passed, _ in entries)
        title = entries[0][0]
        details = "; ".join(d for _, _, d in entries if d)
        terminalreporter.write_line(f"criterion {crit} {'PASS' if ok else 'FAIL'}: {title}" + (f" | {details}" if details else ""))
