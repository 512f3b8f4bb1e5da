from __future__ import annotations

import hashlib
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


def tree_digests(root: Path) -> dict[str, str]:
    """Digest of every file (and the name of every directory) under root."""
    out = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        out[rel] = hashlib.sha256(p.read_bytes()).hexdigest() if p.is_file() else "<dir>"
    return out


@pytest.fixture
def corpus_path() -> Path:
    return FIXTURES / "corpus.json"


_CRITERIA: dict[str, bool] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    name = marker.args[0]
    if rep.failed:
        _CRITERIA[name] = False
    elif rep.when == "call" and rep.passed:
        _CRITERIA.setdefault(name, True)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split(".", 1)[0])):
        terminalreporter.write_line(f"{'PASS' if _CRITERIA[name] else 'FAIL'}  {name}")
