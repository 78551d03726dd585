"""Shared fixtures: seeded random models and the planted-sink synthetic model."""

import numpy as np
import pytest

from attention import AttentionParams
from synthetic_model import SyntheticSpec, make_synthetic_input, make_synthetic_model
from vit_runtime import ModelWeights


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture
def small_params():
    """Two heads of width 4 (D = 8)."""
    return AttentionParams.random(heads=2, head_dim=4, seed=7)


@pytest.fixture
def small_tokens(rng):
    """(N+1, D) = (13, 8) float32 token matrix."""
    return rng.standard_normal((13, 8)).astype(np.float32)


@pytest.fixture
def small_model():
    return ModelWeights.random(num_layers=3, heads=2, head_dim=4, mlp_dim=16, seed=3)


@pytest.fixture(scope="session")
def synth_spec():
    return SyntheticSpec()


@pytest.fixture(scope="session")
def synth_model(synth_spec):
    return make_synthetic_model(synth_spec)


@pytest.fixture(scope="session")
def synth_input(synth_spec):
    return make_synthetic_input(synth_spec)
