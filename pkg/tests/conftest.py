import json
from pathlib import Path

import pytest


def write_jsonl(path: Path, rows) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


@pytest.fixture
def jsonl(tmp_path):
    def _write(name, rows):
        return write_jsonl(tmp_path / name, rows)

    return _write


_ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion; printed in the summary."""

    class Recorder:
        def __init__(self):
            self.number = None

        def __call__(self, number: int, title: str):
            self.number = number
            _ACCEPTANCE[number] = ("FAIL", title)

    rec = Recorder()
    yield rec
    if rec.number is not None:
        failed = getattr(request.node, "rep_call", None)
        if failed is not None and failed.passed:
            _ACCEPTANCE[rec.number] = ("PASS", _ACCEPTANCE[rec.number][1])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, "rep_" + rep.when, rep)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
