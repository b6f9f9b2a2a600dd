import numpy as np
import pytest
import torch

from logit_invert.classifier import LogitClassifier
from logit_invert.trainer import LogitInverter

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def report_line():
    def emit(line):
        print(line)
        ACCEPTANCE_LINES.append(line)

    return emit


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def toy_images(n=64, size=16, channels=1, seed=0):
    """Class-dependent blobs so tiny classifiers learn something quickly."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n)
    X = rng.uniform(-1, -0.6, (n, size, size, channels))
    third = size // 3
    for i, label in enumerate(y):
        X[i, :, label * third : (label + 1) * third] = rng.uniform(0.5, 1.0)
    return X.astype(np.float32), y


@pytest.fixture(scope="session")
def toy_data():
    return toy_images(96, 16, 1, seed=0)


@pytest.fixture(scope="session")
def tiny_classifier(toy_data):
    X, y = toy_data
    return LogitClassifier(widths=(4, 4, 8, 8), epochs=10, batch_size=32, flip_prob=0.0,
                           crop_pad=0, learning_rate=0.05, seed=0).fit(X, y, n_classes=3)


TINY_INVERTER = dict(n_z=12, g_channels=(8, 8, 8), d_channels=(8, 8, 8), embed_dim=8,
                     cond_hidden=8, batch_size=4, ema_start=2, calibration_batches=2)


@pytest.fixture(scope="session")
def tiny_inverter(toy_data, tiny_classifier):
    X, _ = toy_data
    return LogitInverter(classifier=tiny_classifier, total_steps=6, **TINY_INVERTER).fit(X)
