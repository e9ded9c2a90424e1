"""Shared fixtures for the test suite."""
import numpy as np
import pytest

from data import SynthSpec, generate_synthetic, split
from metrics import CostModel, ScoreSet


@pytest.fixture
def default_cm():
    """Costs (1, 10, 20) with priors (0.9, 0.05, 0.05)."""
    return CostModel()


@pytest.fixture
def worked_scores():
    return ScoreSet(tar=[0.9, 0.4], non=[0.3], spf=[0.6])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("ADCF_LOG_LEVEL", "ADCF_OUT_DIR", "ADCF_SEED"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture(scope="session")
def small_splits():
    """Small overlapping three-class task split 60/20/20."""
    dataset = generate_synthetic(SynthSpec(d_asv=4, d_cm=2, n_target=100, n_nontarget=50, n_spoof=50, seed=3))
    return split(dataset, (0.6, 0.2, 0.2), seed=3)


@pytest.fixture(scope="session")
def separable_splits():
    """Near-noiseless clusters: a zero-cost threshold exists."""
    dataset = generate_synthetic(SynthSpec(n_target=200, n_nontarget=100, n_spoof=100,
                                           noise_scale=0.01, separation=5.0, seed=11))
    return split(dataset, (0.8, 0.1, 0.1), seed=11)
