"""
Shared pytest fixtures for the nlgp test suite.
"""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from Scripts.core.logging_config import reset_logging
from Scripts.core.models import ModelSpec, TrainConfig
from Scripts.data import Dataset


# ── Slow acceptance runs ──────────────────────────────────────────────────────

def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance test (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ── Logging isolation ─────────────────────────────────────────────────────────

@pytest.fixture(autouse=True)
def _reset_logging():
    """Tear down nlgp logging handlers between tests.

    Prevents handler accumulation when several CLI invocations call
    setup_run_logging().
    """
    yield
    reset_logging()


# ── Toy data ──────────────────────────────────────────────────────────────────

@pytest.fixture
def toy_arrays():
    """N=8, D_X=2, D_Y=3 arrays with a smooth signal."""
    rng = np.random.default_rng(0)
    X = rng.uniform(-1.0, 1.0, size=(8, 2))
    Y = np.column_stack([np.sin(2 * X[:, 0]), np.cos(X[:, 1]), X[:, 0] * X[:, 1]])
    return X, Y + 0.05 * rng.standard_normal(Y.shape)


@pytest.fixture
def toy_dataset(toy_arrays):
    X, Y = toy_arrays
    return Dataset.from_arrays(X, Y)


@pytest.fixture
def small_dataset():
    """N=40 points on the unit square with 3 correlated outputs."""
    rng = np.random.default_rng(1)
    X = rng.uniform(-1.0, 1.0, size=(40, 2))
    base = np.sin(3 * X[:, 0]) + 0.5 * X[:, 1]
    Y = np.column_stack([base, -base, 0.5 * base + X[:, 1]])
    return Dataset.from_arrays(X, Y + 0.05 * rng.standard_normal(Y.shape))


@pytest.fixture
def toy_sizes():
    """Sizes used by the gradient checks."""
    return {"L": 2, "L_prime": 2, "D_H": 3, "N_ind": 4, "N_ind_layer2": 4}


@pytest.fixture
def toy_spec(toy_sizes):
    """Factory: resolved toy ModelSpec for a variant."""
    def make(variant: str, **overrides) -> ModelSpec:
        fields = {"variant": variant, **toy_sizes, "quad_order": 40, "n_samples": 3, **overrides}
        return ModelSpec.model_validate(fields).resolve(2, 3)
    return make


@pytest.fixture
def fast_train_cfg():
    return TrainConfig(epochs=3, minibatch_size=16, restarts=1, screening_epochs=0, seed=0, show_progress=False)


# ── CSV files ─────────────────────────────────────────────────────────────────

@pytest.fixture
def data_csv(tmp_path):
    """A headed CSV with 2 inputs and 3 outputs, one output missing."""
    rng = np.random.default_rng(2)
    X = rng.uniform(-1.0, 1.0, size=(60, 2))
    Y = np.column_stack([np.sin(2 * X[:, 0]), np.cos(X[:, 1]), X.sum(axis=1)])
    df = pd.DataFrame({"x1": X[:, 0], "x2": X[:, 1], "y1": Y[:, 0], "y2": Y[:, 1], "y3": Y[:, 2]})
    df["y2"] = df["y2"].astype(object)
    df.loc[3, "y2"] = ""
    path = tmp_path / "toy.csv"
    df.to_csv(path, index=False)
    return path
