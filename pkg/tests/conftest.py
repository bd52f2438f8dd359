import numpy as np
import pytest

from splitpriv.data import generate_synthetic, split_train_val
from splitpriv.modelgraph import TensorSpec, build_model
from splitpriv.trainer import TrainConfig, train

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def small_data():
    user, attacker = generate_synthetic(seed=3, n=1200)
    return {"user": split_train_val(user, 0.2, 0), "attacker": split_train_val(attacker, 0.2, 1)}


@pytest.fixture(scope="session")
def trained_mini5(small_data):
    """A mini5 user model trained for a few epochs on a small synthetic set."""
    train_set, val_set = small_data["user"]
    graph, params = build_model("mini5", TensorSpec((1, 28, 28)), 10, seed=0)
    train(graph, params, train_set, TrainConfig(lr=0.02, epochs=4, seed=0), val_set=val_set)
    return graph, params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
