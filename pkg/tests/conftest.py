import pytest
import torch

from src.models.pydantic_models import FloatMode, HAPTIC_DIM, PROPRIO_DIM, ModelConfig, SimConfig, Variant
from src.services.dataset_service import load_dataset
from src.services.fusion_model import build_model
from src.services.simulation_service import generate_dataset

TINY_IMAGE = 16
TINY_SUBSTEPS = 4
TINY_SEQ_LEN = 6

@pytest.fixture(scope='session')
def tiny_sim_config():
    return SimConfig(image_size=TINY_IMAGE, seq_len=TINY_SEQ_LEN, substeps=TINY_SUBSTEPS,
                     num_trajectories=12, eval_fraction=0.25, seed=3)

@pytest.fixture(scope='session')
def tiny_dataset_path(tmp_path_factory, tiny_sim_config):
    path = tmp_path_factory.mktemp('data') / 'tiny'
    generate_dataset(tiny_sim_config, path, workers=1)
    return path

@pytest.fixture
def tiny_dataset(tiny_dataset_path):
    return load_dataset(tiny_dataset_path)

def make_model_config(variant: Variant = Variant.VHP, seed: int = 0, **overrides) -> ModelConfig:
    """Small 64-bit model matching the tiny dataset's shapes"""
    values = dict(
        variant=variant,
        latent_dim=4,
        image_shape=(TINY_IMAGE, TINY_IMAGE),
        proprio_window=(TINY_SUBSTEPS, PROPRIO_DIM),
        haptic_window=(TINY_SUBSTEPS, HAPTIC_DIM),
        image_channels=(4, 4, 8, 8),
        lowdim_channels=(4, 8),
        transition_hidden=16,
        batch_size=4,
        epochs=1,
        float_mode=FloatMode.F64,
        seed=seed,
    )
    values.update(overrides)
    return ModelConfig(**values)

@pytest.fixture
def model_config():
    return make_model_config()

@pytest.fixture
def tiny_model(model_config):
    return build_model(model_config)

@pytest.fixture
def tiny_batch(tiny_dataset):
    return tiny_dataset.batch([0, 1, 2], dtype=torch.float64)

@pytest.fixture
def make_config():
    return make_model_config
