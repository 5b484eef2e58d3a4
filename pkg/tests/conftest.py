import numpy as np
import pytest

from rwnet.geometry import SHAPE_KINDS, project_six_views, synth_shape
from rwnet.model import ModelConfig
from rwnet.training import SyntheticSpec, make_synthetic_dataset

TINY = dict(resolution=16, channels=(1, 2, 2, 2), embedding_dim=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture(scope="session")
def small_dataset():
    """Eight classes, twelve samples each, at resolution 16."""
    return make_synthetic_dataset(SyntheticSpec(per_class=12, resolution=16, n_points=512))


@pytest.fixture(scope="session")
def shape_views():
    return [project_six_views(synth_shape(k, 512, seed=i), 16) for i, k in enumerate(SHAPE_KINDS)]


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per criterion, then assert."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
