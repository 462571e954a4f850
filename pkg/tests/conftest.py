import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running checks")


# acceptance reporting: one visible line per criterion -----------------------

_LABELS = {}
_OUTCOMES = {}


def pytest_collection_modifyitems(items):
    for item in items:
        if item.module.__name__ != "test_acceptance":
            continue
        doc = (item.function.__doc__ or "").strip().splitlines()
        if doc and doc[0].startswith("criterion"):
            _LABELS[item.nodeid] = doc[0]


def pytest_runtest_logreport(report):
    if report.when == "call" and report.nodeid in _LABELS:
        _OUTCOMES[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, label in _LABELS.items():
        if nodeid in _OUTCOMES:
            outcome = _OUTCOMES[nodeid].upper()
            terminalreporter.write_line(f"[acceptance] {label}: {outcome}")
