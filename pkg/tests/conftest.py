import numpy as np
import pytest

from provfilter.evalharness.synth import synth_image
from provfilter.features import detect_and_describe
from provfilter.imagecore import RasterImage


# one PASS/FAIL line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def textured():
    """A 320x320 procedural image with plenty of structure."""
    return synth_image(11, 320, 320)


@pytest.fixture(scope="session")
def textured_features(textured):
    return detect_and_describe(textured, 500, image_id="textured")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=40, w=50, c=3) -> RasterImage:
    return RasterImage(rng.integers(0, 256, (h, w, c)).astype(np.uint8))


def gaussian_mixture(rng, n, centres=100, spread=0.5, dim=64):
    c = rng.normal(size=(centres, dim))
    lab = rng.integers(0, centres, n)
    return (c[lab] + spread * rng.normal(size=(n, dim))).astype(np.float32)
