from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from wavesep.audio import TrackDataset, synth_corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Two 8 s mono tracks at 8 kHz on disk."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    synth_corpus(11, 2, 8.0, 8000, None, root, channels=1)
    return root


@pytest.fixture
def tiny_dataset(tiny_corpus):
    return TrackDataset.open(tiny_corpus, 8000, segment_s=1.0, stride_s=1.0, mono=True)


# ---- acceptance summary: one PASS/FAIL line per criterion ---------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.failed or report.skipped):
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"ok": True, "notes": [], "failed": []})
    if report.failed or report.skipped:
        entry["ok"] = False
        entry["failed"].append(item.name)
    entry["notes"].extend(value for key, value in item.user_properties if key == "measured"
                          and value not in entry["notes"])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["notes"])
        if entry["failed"]:
            detail = (detail + "; " if detail else "") + "failed: " + ", ".join(entry["failed"])
        terminalreporter.write_line(f"CRITERION {number}: {status}" + (f" ({detail})" if detail else ""))
