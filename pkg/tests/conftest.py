import os
import sys

import pytest

from plantocc.cli import main

# keep worker pools predictable regardless of the caller's environment
os.environ.pop("PLANTOCC_WORKERS", None)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Three generated and labelled default scenes (scene files, labels and graphs in one directory)."""
    root = tmp_path_factory.mktemp("corpus")
    assert main(["generate", "--count", "3", "--seed", "100", "--out", str(root)]) == 0
    assert main(["label", "--scenes", str(root), "--workers", "1"]) == 0
    return root


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance lines collected by tests/test_acceptance.py, if it ran."""
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in results.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
