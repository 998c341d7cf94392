import pytest

from stageroute.gradcheck import run_standard_suite


@pytest.fixture(scope="session")
def suite_reports():
    """The full finite-difference suite, run once per session."""
    return run_standard_suite(tolerance=1e-4)
