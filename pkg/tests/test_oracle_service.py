import pytest
import torch

from src.services.fusion_model import build_model
from src.services.oracle_service import (
    GRADCHECK_TOLERANCE,
    OracleService,
    random_batch,
    tiny_model_config,
)

@pytest.fixture
def oracles():
    return OracleService()

def test_gradcheck_passes(oracles):
    result = oracles.gradcheck(seed=0)
    assert result.passed, result.details
    assert result.statistic <= GRADCHECK_TOLERANCE
    assert result.details['parameters'] > 0

def test_gradcheck_sampled_entries(oracles):
    result = oracles.gradcheck(seed=1, max_entries_per_param=3)
    assert result.passed

def test_poecheck_passes(oracles):
    result = oracles.poecheck(num_sets=20, seed=0)
    assert result.passed
    assert result.statistic <= 1e-6

def test_klcheck_passes(oracles):
    result = oracles.klcheck(num_pairs=5, samples=200_000, seed=0)
    assert result.passed
    assert result.details['failures'] <= 2

def test_elbocheck_passes(oracles):
    result = oracles.elbocheck(num_trajectories=20, samples=200, seed=0)
    assert result.passed, result.details
    assert result.statistic >= 18

def test_log_weights_average_to_the_elbo(oracles):
    config = tiny_model_config(seed=2)
    model = build_model(config)
    single = random_batch(config, batch_size=1, seq_len=4, generator=torch.Generator().manual_seed(0))
    repeated = single.repeat(2000)
    with torch.no_grad():
        weights = oracles.log_weights(model, repeated, torch.Generator().manual_seed(1))
        bounds = model.elbo(repeated, generator=torch.Generator().manual_seed(2)).elbo
    assert weights.shape == (2000,)
    # both are unbiased estimates of the same bound
    stderr = float(torch.sqrt(weights.var() / 2000 + bounds.var() / 2000))
    assert abs(float(weights.mean() - bounds.mean())) <= 4 * stderr

@pytest.mark.slow
def test_acceptance_scale_oracles(oracles):
    assert oracles.poecheck(num_sets=1000, seed=0).passed
    assert oracles.klcheck(num_pairs=50, samples=1_000_000, seed=0).passed
