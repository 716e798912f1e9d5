import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

_outcomes: dict[int, dict] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            num, title = mark.args
            _outcomes.setdefault(num, {"title": title, "failed": [], "ran": 0, "skipped": 0})
            item.user_properties.append(("criterion", num))


def pytest_runtest_logreport(report):
    num = dict(report.user_properties).get("criterion")
    if num is None:
        return
    entry = _outcomes[num]
    if report.when == "call" or report.outcome != "passed":
        if report.skipped:
            entry["skipped"] += 1
        elif report.failed:
            entry["failed"].append(report.nodeid.split("::")[-1])
        elif report.when == "call":
            entry["ran"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_outcomes):
        e = _outcomes[num]
        if e["failed"]:
            status = "FAIL (" + ", ".join(e["failed"]) + ")"
        elif e["ran"] == 0:
            status = "NOT RUN"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {num}: {e['title']}: {status}")
