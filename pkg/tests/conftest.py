import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fidelitykit.synthetic import smooth_scene, textured_image

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def textured():
    return textured_image(512, seed=0)


@pytest.fixture(scope="session")
def small_textured():
    return textured_image(160, seed=3)


@pytest.fixture(scope="session")
def fixture_corpus():
    """Three textured images of different sizes, used for degradation checks."""
    return [textured_image(192, seed=s) for s in (11, 12, 13)]


@pytest.fixture(scope="session")
def scene():
    return smooth_scene(320, 320, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



ACCEPTANCE_LINES: list[str] = []


class Criterion:
    """Records one PASS/FAIL verdict line for an acceptance criterion."""

    def __init__(self, name):
        self.name = name
        self.line = None

    def verdict(self, ok: bool, detail: str) -> bool:
        self.line = f"{'PASS' if ok else 'FAIL'}  {self.name}: {detail}"
        ACCEPTANCE_LINES.append(self.line)
        print(self.line)
        return ok


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    c = Criterion(marker.args[0] if marker else request.node.name)
    yield c
    if c.line is None:
        ACCEPTANCE_LINES.append(f"FAIL  {c.name}: raised before reaching a verdict")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion label")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
