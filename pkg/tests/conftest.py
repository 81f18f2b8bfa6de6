import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("varcast", max_examples=60, deadline=None)
settings.load_profile("varcast")

ROOT = Path(__file__).resolve().parents[1]

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.fixture
def record(request):
    """Attach a measured value to the current criterion's summary line."""
    notes = []
    request.node._criterion_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        notes = "; ".join(getattr(item, "_criterion_notes", []))
        _results[marker.args[0]] = ("PASS" if rep.passed else "FAIL", notes)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, notes) in _results.items():
        terminalreporter.write_line(f"{status}  {name}" + (f"  ({notes})" if notes else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def run_cli(args, env=None, cwd=None):
    """Run the installed entry point in a subprocess; returns CompletedProcess."""
    import subprocess

    full_env = dict(os.environ)
    full_env.update(env or {})
    return subprocess.run([sys.executable, "-m", "varcast.cli", *args], capture_output=True, text=True,
                          env=full_env, cwd=cwd)
