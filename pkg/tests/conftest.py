import numpy as np
import pytest

from echobp.phantom import PhantomConfig, synth_rf

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def phantom20():
    """Default phantom: carotid template, DBP 63, PP 40, PWV 8.03, 20 dB, 10 s."""
    return synth_rf(PhantomConfig())


@pytest.fixture(scope="session")
def short_noiseless():
    return synth_rf(PhantomConfig(snr_db=float("inf"), duration_s=4.0, pwv_true_mps=8.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
