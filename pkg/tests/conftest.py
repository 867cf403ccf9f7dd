import numpy as np
import pytest

from objqa import dataio, extractor


@pytest.fixture(scope="session")
def digits():
    """300 procedural digits, 30 per class."""
    clean = dataio.procedural_digits(300, seed=11)
    return np.stack([c[0] for c in clean]), np.array([c[1] for c in clean])


@pytest.fixture(scope="session")
def small_extractor(digits):
    images, labels = digits
    return extractor.pretrain(images, labels, epochs=15, seed=0, feature_dim=32, hidden=128)


def pytest_terminal_summary(terminalreporter):
    import sys

    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.RESULTS[n])
