# tests/conftest.py
import pytest

from adaptrack.config import Config, ModelConfig, RunConfig, ScenarioConfig
from adaptrack.simkit import generate_scenario


@pytest.fixture
def tiny_config() -> Config:
    """小模型、短场景，单轮训练"""
    return Config(
        model=ModelConfig(dim=8, heads=2, ta_layers=1, depth_encoder_layers=1, depth_bins=4,
                          n_pe=8, token_pool=4, encoder_hidden=8, phi_hidden=8),
        run=RunConfig(T=4, epochs=1, learning_rate=1e-3),
        scenario=ScenarioConfig(n_objects=3, n_frames=12, depth_grid=8, appearance_dim=4, noise_dim=2,
                                seed=5),
    )


@pytest.fixture
def tiny_scenario(tiny_config):
    return generate_scenario(tiny_config.scenario)
