import numpy as np
import pytest
import torch

from regad.dataio import generate_synthetic, load_dataset
from regad.regtrain import RegADModel, TrainConfig

_ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail=""):
    """Log one acceptance line; ``passed=None`` marks a skipped criterion."""
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    _ACCEPTANCE_LINES.append(f"[{status}] criterion {number}: {name}"
                             + (f" ({detail})" if detail else ""))


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(root, categories=3, train_per_cat=6, test_per_cat=4, seed=3, size=64)
    return root


@pytest.fixture(scope="session")
def synth_samples(synth_root):
    return load_dataset(synth_root, "synthetic")


@pytest.fixture(scope="session")
def small_model():
    """Random-init model at 64 px; cheap enough for unit tests."""
    torch.manual_seed(0)
    model = RegADModel(TrainConfig(backbone="random", side=64, epochs=1))
    model.eval()
    return model
