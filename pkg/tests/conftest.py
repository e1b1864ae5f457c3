import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from netcond.fixtures import make_blobs, train_mlp  # noqa: E402
from netcond.network import (AvgPool, Conv2D, Dense, Flatten, MaxPool, Network,  # noqa: E402
                             dense_mlp, make_activation)
from netcond.tensor import make_rng  # noqa: E402

ACTIVATIONS = ["relu", "leaky_relu", "elu", "sigmoid", "tanh"]


def random_mlp(rng, widths, activation="relu", bias=True, scale=1.0):
    weights = [scale * rng.uniform(-1, 1, (o, i)) / np.sqrt(i) * 2
               for i, o in zip(widths[:-1], widths[1:])]
    biases = [rng.uniform(-0.5, 0.5, o) if bias else None for o in widths[1:]]
    return dense_mlp(weights, biases, activation)


def conv_fixture(seed=3, activation="relu", pool="max", bias=True):
    rng = make_rng(seed)
    pool_layer = MaxPool(2) if pool == "max" else AvgPool(2)
    layers = (
        Conv2D(rng.normal(0, 0.4, (3, 2, 3, 3)), rng.normal(0, 0.1, 3) if bias else None,
               stride=1, padding=(1, 1)),
        make_activation(activation),
        pool_layer,
        Conv2D(rng.normal(0, 0.4, (4, 3, 2, 2)), rng.normal(0, 0.1, 4) if bias else None, stride=2),
        make_activation(activation),
        Flatten(),
        Dense(rng.normal(0, 0.4, (3, 4 * 2 * 2)), rng.normal(0, 0.1, 3) if bias else None),
    )
    return Network(layers, (2, 8, 8))


def fixture_networks():
    """Every hand-built fixture network, keyed by name."""
    rng = make_rng(11)
    nets = {f"mlp_{a}": random_mlp(rng, [6, 8, 8, 4], a) for a in ACTIVATIONS}
    nets["mlp_deep_tanh"] = random_mlp(rng, [5, 7, 7, 7, 7, 7, 3], "tanh")
    nets["conv_max_relu"] = conv_fixture(3, "relu", "max")
    nets["conv_avg_tanh"] = conv_fixture(4, "tanh", "avg")
    nets["conv_max_elu"] = conv_fixture(5, "elu", "max")
    return nets


@pytest.fixture(scope="session")
def fixture_nets():
    return fixture_networks()


@pytest.fixture(scope="session")
def blob_problem():
    """3-class, 32-dimensional blob fixture and a network trained on it."""
    ds = make_blobs(200, 3, 32, 1.0, seed=1, test_fraction=0.5)
    net = train_mlp([32, 32, 32, 3], "relu", ds, epochs=100, lr=0.05, seed=0)
    return ds, net


@pytest.fixture(scope="session")
def small_blob_problem():
    ds = make_blobs(60, 3, 2, 0.5, seed=5, test_fraction=0.5)
    net = train_mlp([2, 16, 16, 3], "relu", ds, epochs=200, lr=0.1, seed=0)
    return ds, net


# -- acceptance summary ------------------------------------------------------

_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _ACCEPTANCE.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
