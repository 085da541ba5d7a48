from __future__ import annotations

import numpy as np
import pytest

from dmtl.config import ExperimentConfig, load_config
from dmtl.data import generate_dataset

MICRO_N = 12
MICRO_SEED = 3


@pytest.fixture(scope="session")
def micro_root(tmp_path_factory):
    """The 12-patient micro corpus at desk dimensions."""
    root = tmp_path_factory.mktemp("micro")
    generate_dataset(root, MICRO_N, seed=MICRO_SEED)
    return root


def micro_config(root, **over) -> ExperimentConfig:
    base = {
        "data.root": str(root),
        "model.init_filters": "4",
        "model.stages": "3",
        "train.epochs": "1",
        "train.batch_size": "4",
        "train.lr": "1e-3",
    }
    base.update(over)
    return load_config(None, [f"{k}={v}" for k, v in base.items()])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
