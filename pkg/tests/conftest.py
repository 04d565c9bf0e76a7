import numpy as np
import pytest

_acceptance: dict[int, list] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marks = dict(report.user_properties).get("criterion")
    if marks is None:
        return
    _acceptance.setdefault(marks, []).append(report)


@pytest.fixture(autouse=True)
def _tag_criterion(request, record_property):
    mark = request.node.get_closest_marker("criterion")
    if mark is not None:
        record_property("criterion", mark.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    tr = terminalreporter
    tr.section("acceptance summary")
    for n in sorted(_acceptance):
        reports = _acceptance[n]
        ok = all(r.passed for r in reports)
        notes = "; ".join(
            str(v) for r in reports for k, v in r.user_properties if k == "detail"
        )
        names = ", ".join(r.nodeid.split("::")[-1] for r in reports if not r.passed)
        line = f"acceptance {n:2d}: {'PASS' if ok else 'FAIL'}"
        if names:
            line += f" [failed: {names}]"
        if notes:
            line += f" | {notes}"
        tr.write_line(line)
