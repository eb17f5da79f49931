from __future__ import annotations

import pytest

_CRITERIA: list[tuple[str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when != "call" and not (rep.when == "setup" and rep.outcome != "passed"):
        return
    crit = item.get_closest_marker("criterion")
    if crit is None:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
    if rep.outcome != "passed" and rep.when == "setup":
        detail = f"setup {rep.outcome}"
    _CRITERIA.append((str(crit.args[0]), rep.outcome.upper(), detail))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance test for one numbered criterion")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n, outcome, detail in sorted(_CRITERIA, key=lambda r: int(r[0])):
        status = "PASS" if outcome == "PASSED" else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")
