import os

import pytest

# acceptance verdicts, echoed again in the terminal summary
VERDICTS = []


def pytest_collection_modifyitems(config, items):
    if os.environ.get("R3TX_DIRECTIONAL") == "1":
        return
    skip = pytest.mark.skip(reason="set R3TX_DIRECTIONAL=1 to run the full seed sweep")
    for item in items:
        if "directional" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
