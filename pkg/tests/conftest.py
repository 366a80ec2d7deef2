import numpy as np
import pytest

from oclttt.data import SceneSpec, generate
from oclttt.experiments import SourceSetup, source_checkpoint
from oclttt.model import SegNetToy, pretrain

SMALL = SceneSpec(height=16, width=16)


@pytest.fixture(scope="session")
def source_ckpt(request):
    """The standard 64x64 source model, trained once and cached across sessions."""
    cache = request.config.cache.mkdir("oclttt")
    return source_checkpoint(SourceSetup(), cache_dir=str(cache))


@pytest.fixture(scope="session")
def small_ckpt():
    """A quickly trained 16x16 model for engine plumbing tests."""
    data = generate(SMALL, None, 24, 3)
    return pretrain(SegNetToy(seed=1), data, 3, 0.05, batch_size=8, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(REPORT, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
