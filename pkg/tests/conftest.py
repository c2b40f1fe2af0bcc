import numpy as np
import pytest

from snnbd.events import SynthConfig, synth_dataset

# filled by test_acceptance.py; printed once at the end of the run
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def tiny_synth():
    cfg = SynthConfig(height=16, width=16, frames=4, side=4, step=1, noise=0.0, n_train=24, n_test=8)
    return synth_dataset(cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
