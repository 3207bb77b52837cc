import numpy as np
import pytest

from deleaker.toy import ToyModelConfig


@pytest.fixture
def small_config():
    """A fast toy configuration (6 steps x 2 blocks, 6x6 grid)."""
    return ToyModelConfig(text_tokens=8, grid=(6, 6), heads=2, head_dim=8, steps=6,
                          blocks_per_step=2, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[n])
