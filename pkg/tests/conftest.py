import numpy as np
import pytest
from hypothesis import settings
from scipy import ndimage

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def texture():
    """Smooth random texture on the 8-bit scale, like the simulator background."""
    rng = np.random.default_rng(0)
    tex = ndimage.gaussian_filter(rng.standard_normal((96, 128)), 2.0)
    return np.clip(128 + 40 * tex / tex.std(), 0, 255).astype(np.uint8)


# acceptance criteria record their verdicts here; printed after the run
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}")
