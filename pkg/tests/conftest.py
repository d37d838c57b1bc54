import numpy as np
import pytest

from dlsm.datasets import LabeledDataset, MoonConfig, generate_moons

from helpers import ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title} ({detail})")


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


@pytest.fixture(scope="session")
def moons():
    return generate_moons(MoonConfig(samples_per_class=200, seed=3))


@pytest.fixture
def tiny_dataset():
    pts = np.array([[0.0, 0.0], [1.0, 0.5], [-0.5, 1.0], [2.0, -1.0], [0.3, 0.3]])
    return LabeledDataset(pts, np.array([0, 0, 1, 1, 1]), 2)
