"""
Self-checks that validate the numerical core against independent oracles:
central differences for ELBO gradients, grid integration for products of
Gaussians, Monte-Carlo estimates for KL divergences and importance
sampling for the evidence bound.
"""

from typing import Optional
import math
import numpy as np
import torch

from src.core.logging_config import get_logger
from src.models.pydantic_models import FloatMode, HAPTIC_DIM, PROPRIO_DIM, ModelConfig, Variant
from src.models.schemas import OracleResult
from src.services.dataset_service import TrajectoryBatch
from src.services.diffcore import grad_check
from src.services.fusion_model import MultimodalLatentModel, build_model
from src.services.gaussian import DiagGaussian, kl_divergence, log_prob, product_of_experts

logger = get_logger(__name__)

GRADCHECK_TOLERANCE = 1e-4
POE_TOLERANCE = 1e-6
KL_SLACK_SE = 3.0
BOUND_SLACK_SE = 3.0

def tiny_model_config(seed: int = 0, latent_dim: int = 3, window: int = 4) -> ModelConfig:
    """Low-dimensional-only VHP instance, 64-bit, small enough for exhaustive checks"""
    return ModelConfig(
        variant=Variant.VHP,
        latent_dim=latent_dim,
        include_image=False,
        proprio_window=(window, PROPRIO_DIM),
        haptic_window=(window, HAPTIC_DIM),
        lowdim_channels=(4, 4),
        transition_hidden=8,
        float_mode=FloatMode.F64,
        seed=seed,
    )

def random_batch(config: ModelConfig, batch_size: int, seq_len: int, generator: torch.Generator) -> TrajectoryBatch:
    """Gaussian low-dimensional observations and controls"""
    def draw(*shape):
        return torch.randn(*shape, generator=generator, dtype=torch.float64)
    return TrajectoryBatch(
        proprio=draw(batch_size, seq_len, *config.proprio_window),
        haptic=draw(batch_size, seq_len, *config.haptic_window),
        controls=draw(batch_size, seq_len - 1, config.control_dim),
    )

def _grid_moments(means: np.ndarray, variances: np.ndarray, resolution: float = 4.0):
    """Mean and variance of the normalized product density, by quadrature on a dense 1-D grid"""
    stds = np.sqrt(variances)
    product_std = 1.0 / math.sqrt(np.sum(1.0 / variances))
    low, high = np.min(means - 10 * stds), np.max(means + 10 * stds)
    count = int(min(400_000, math.ceil((high - low) / (product_std / resolution)) + 1))
    grid = np.linspace(low, high, count)
    log_density = -0.5 * np.sum((grid[:, None] - means[None, :]) ** 2 / variances[None, :], axis=1)
    weights = np.exp(log_density - log_density.max())
    weights /= weights.sum()
    mean = float(np.sum(grid * weights))
    return mean, float(np.sum((grid - mean) ** 2 * weights))

def _logged(result: OracleResult) -> OracleResult:
    logger.info("oracle_finished", oracle=result.name, statistic=result.statistic,
                threshold=result.threshold, passed=result.passed)
    return result

class OracleService:
    """Service for running the numerical self-checks"""

    def gradcheck(self, seed: int = 0, epsilon: float = 1e-6, batch_size: int = 2, seq_len: int = 4,
                  max_entries_per_param: Optional[int] = None) -> OracleResult:
        """ELBO gradients of a tiny model vs central differences, frozen noise, 64-bit"""
        config = tiny_model_config(seed)
        model = build_model(config)
        generator = torch.Generator().manual_seed(seed)
        batch = random_batch(config, batch_size, seq_len, generator)
        noise = torch.randn(batch_size, seq_len, config.latent_dim, generator=generator, dtype=torch.float64)

        def objective():
            return -model.elbo(batch, noise=noise).mean()

        params = [p for p in model.parameters()]
        error = grad_check(objective, params, epsilon=epsilon, max_entries_per_param=max_entries_per_param,
                           retry_above=GRADCHECK_TOLERANCE,
                           generator=np.random.default_rng(seed))
        result = OracleResult(
            name='gradcheck',
            statistic=error,
            threshold=GRADCHECK_TOLERANCE,
            passed=error <= GRADCHECK_TOLERANCE,
            details={'parameters': sum(p.numel() for p in params), 'latent_dim': config.latent_dim,
                     'seq_len': seq_len, 'epsilon': epsilon},
        )
        return _logged(result)

    def poecheck(self, num_sets: int = 100, seed: int = 0) -> OracleResult:
        """Closed-form product of experts vs a grid-normalized product, per dimension"""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(num_sets):
            count, dim = int(rng.integers(1, 6)), int(rng.integers(1, 17))
            means = rng.uniform(-3.0, 3.0, size=(count, dim))
            variances = np.exp(rng.uniform(math.log(1e-3), math.log(10.0), size=(count, dim)))
            experts = [DiagGaussian(torch.from_numpy(means[i]), torch.from_numpy(variances[i])) for i in range(count)]
            fused = product_of_experts(experts)
            for d in range(dim):
                grid_mean, grid_var = _grid_moments(means[:, d], variances[:, d])
                worst = max(worst,
                            abs(float(fused.mean[d]) - grid_mean),
                            abs(float(fused.var[d]) - grid_var))
        result = OracleResult(name='poecheck', statistic=worst, threshold=POE_TOLERANCE,
                              passed=worst <= POE_TOLERANCE, details={'expert_sets': num_sets})
        return _logged(result)

    def klcheck(self, num_pairs: int = 50, samples: int = 1_000_000, seed: int = 0,
                max_failures: int = 2, chunk: int = 250_000) -> OracleResult:
        """Analytic KL vs a Monte-Carlo estimate; a pair fails outside 3 standard errors"""
        rng = np.random.default_rng(seed)
        failures, worst_z = 0, 0.0
        for _ in range(num_pairs):
            dim = int(rng.integers(1, 9))
            q_mean, p_mean = rng.normal(0.0, 1.0, size=dim), rng.normal(0.0, 1.0, size=dim)
            q_var = np.exp(rng.uniform(math.log(1e-1), math.log(10.0), size=dim))
            p_var = np.exp(rng.uniform(math.log(1e-1), math.log(10.0), size=dim))
            q = DiagGaussian(torch.from_numpy(q_mean), torch.from_numpy(q_var))
            p = DiagGaussian(torch.from_numpy(p_mean), torch.from_numpy(p_var))
            analytic = float(kl_divergence(q, p))

            total, total_sq, drawn = 0.0, 0.0, 0
            while drawn < samples:
                size = min(chunk, samples - drawn)
                x = torch.from_numpy(q_mean + np.sqrt(q_var) * rng.standard_normal((size, dim)))
                ratio = self._log_ratio(q, p, x)
                total += float(ratio.sum())
                total_sq += float((ratio ** 2).sum())
                drawn += size
            estimate = total / samples
            stderr = math.sqrt(max(total_sq / samples - estimate ** 2, 0.0) / samples)
            z = abs(analytic - estimate) / stderr if stderr > 0 else 0.0
            worst_z = max(worst_z, z)
            failures += int(z > KL_SLACK_SE)
        result = OracleResult(
            name='klcheck',
            statistic=worst_z,
            threshold=KL_SLACK_SE,
            passed=failures <= max_failures,
            details={'pairs': num_pairs, 'samples': samples, 'failures': failures},
        )
        return _logged(result)

    def _log_ratio(self, q: DiagGaussian, p: DiagGaussian, x: torch.Tensor) -> np.ndarray:
        size = x.shape[0]
        q_batch = DiagGaussian(q.mean.expand(size, -1), q.var.expand(size, -1))
        p_batch = DiagGaussian(p.mean.expand(size, -1), p.var.expand(size, -1))
        return (log_prob(q_batch, x) - log_prob(p_batch, x)).numpy()

    @torch.no_grad()
    def log_weights(self, model: MultimodalLatentModel, batch: TrajectoryBatch,
                    generator: torch.Generator) -> torch.Tensor:
        """ln p(X, Z | u) - ln q(Z | X, u) for one posterior-proposal draw per sequence"""
        trace = model.filter_posterior(batch, generator=generator)
        reconstruction = model.reconstruction_log_likelihood(batch, trace.samples)
        per_step = (sum(reconstruction.values())
                    + log_prob(trace.priors, trace.samples)
                    - log_prob(trace.posteriors, trace.samples))
        return per_step.sum(dim=1)

    @torch.no_grad()
    def elbocheck(self, num_trajectories: int = 20, samples: int = 200, seed: int = 0,
                  seq_len: int = 4, min_passing: int = 18) -> OracleResult:
        """
        Importance-sampling estimate of ln p(X | u) with the filtering
        posterior as proposal, against the ELBO averaged over independent
        draws. A trajectory passes when the estimate is at least the ELBO
        minus 3 standard errors.
        """
        config = tiny_model_config(seed)
        model = build_model(config)
        generator = torch.Generator().manual_seed(seed)
        data = random_batch(config, num_trajectories, seq_len, generator)
        repeated = data.repeat(samples)

        weights = self.log_weights(model, repeated, generator).view(num_trajectories, samples)
        evidence = torch.logsumexp(weights, dim=1) - math.log(samples)
        bounds = model.elbo(repeated, generator=generator).elbo.view(num_trajectories, samples)
        elbo_mean = bounds.mean(dim=1)
        elbo_se = bounds.std(dim=1) / math.sqrt(samples)
        passing = evidence >= elbo_mean - BOUND_SLACK_SE * elbo_se

        result = OracleResult(
            name='elbocheck',
            statistic=float(passing.sum()),
            threshold=float(min_passing),
            passed=int(passing.sum()) >= min_passing,
            details={
                'trajectories': num_trajectories,
                'samples': samples,
                'mean_gap': float((evidence - elbo_mean).mean()),
            },
        )
        return _logged(result)

oracle_service = OracleService()
