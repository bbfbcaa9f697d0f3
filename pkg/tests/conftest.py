import numpy as np
import pytest

from fairvae import synth


@pytest.fixture(scope="session")
def tiny_synth():
    """Small planted-factor dataset shared by integration-style tests."""
    cfg = synth.SynthConfig(n_users=240, n_items=40, n_factors=4, mean_items=8.0, seed=3)
    return synth.generate(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
