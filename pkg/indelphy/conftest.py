import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config_loader import ExperimentConfig  # noqa: E402
from phylo.tree_model import EdgeParams, balanced  # noqa: E402


slow = pytest.mark.skipif(os.environ.get("INDELPHY_SLOW") != "1", reason="set INDELPHY_SLOW=1 for acceptance-scale runs")


@pytest.fixture
def sub_params():
    return EdgeParams(p_sub=0.05)


@pytest.fixture
def depth3_tree(sub_params):
    return balanced(3, sub_params)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(12345)))


@pytest.fixture
def small_config(tmp_path):
    return ExperimentConfig(depth=3, p_sub=0.05, k=1024, trials=8, seed=3, out_dir=str(tmp_path / "out"))


@pytest.fixture(autouse=True)
def few_threads(monkeypatch):
    monkeypatch.setenv("INDELPHY_THREADS", "2")
