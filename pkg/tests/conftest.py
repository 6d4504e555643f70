import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dypcl import ctc  # noqa: E402


@pytest.fixture(params=["python", "cython"])
def backend(request):
    """Run a test once per CTC kernel implementation."""
    prev = ctc.BACKEND
    try:
        ctc.use_backend(request.param)
    except ImportError:
        pytest.skip("compiled kernels not built")
    yield request.param
    ctc.use_backend(prev)


def pytest_terminal_summary(terminalreporter):
    """Print the per-criterion PASS/FAIL lines gathered by the acceptance suite."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
