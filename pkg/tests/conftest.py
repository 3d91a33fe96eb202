"""Shared fixtures: a tiny training configuration and dataset that run in milliseconds per step"""
import numpy as np
import pytest

from app.data import generate_synthetic
from app.trainer import TrainConfig

TINY = dict(
    steps=6,
    batch_size=4,
    v_local=1,
    K=4,
    k=2,
    K_dot=4,
    k_dot=0,
    N_C=16,
    N_p=16,
    d=8,
    image_size=8,
    patch_size=4,
    local_size=4,
    embed_dim=8,
    depth=1,
    heads=2,
    mlp_ratio=2,
    proj_hidden=16,
    num_prototypes=6,
    checkpoint_every=0,
    log_every=0,
    prefetch=1,
)


@pytest.fixture
def tiny_config():
    return TrainConfig.from_dict(TINY)


@pytest.fixture
def tiny_dataset():
    return generate_synthetic(3, 4, size=8, noise_std=4.0, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def isolated_registry(tmp_path, monkeypatch):
    """Keep the run registry out of the working directory"""
    monkeypatch.setenv('SOP_DATABASE_URL', f"sqlite:///{tmp_path / 'registry.db'}")
