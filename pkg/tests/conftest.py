import numpy as np
import pytest

from advgrid import data, models

# one pass/fail line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

DESK = dict(n_classes=3, height=8, width=8, noise=0.2, contrast=0.15)


@pytest.fixture(scope="session")
def tiny_train():
    return data.generate_dataset(7, n_per_class=12, split="train", **DESK)


@pytest.fixture(scope="session")
def tiny_test():
    return data.generate_dataset(8, n_per_class=6, split="test", **DESK)


@pytest.fixture(scope="session")
def tiny_model(tiny_train):
    spec = models.ModelSpec(8, 8, hidden=(32,), n_classes=3, init_seed=0)
    return models.train_standard(spec, tiny_train, epochs=25, lr=0.5, seed=0).model()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
