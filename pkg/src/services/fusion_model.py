"""
Sequential multimodal latent model.

Filtering fuses, at every step, the transition prior with one Gaussian
expert per active modality through a closed-form product of experts. The
concatenation baseline (VHP-C) instead maps the concatenated encoder
features to a single joint expert before the product with the prior.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional
import torch
from torch import nn
import torch.nn.functional as F

from src.core.exceptions import EvaluationException, ModalityMismatchException, NumericException
from src.core.logging_config import get_logger
from src.models.pydantic_models import Modality, ModelConfig
from src.services.dataset_service import TrajectoryBatch
from src.services.diffcore import ParameterStore, check_shape, dtype_for
from src.services.gaussian import (
    LOG_2PI,
    DiagGaussian,
    kl_divergence,
    product_of_experts,
    rsample,
)
from src.services.networks import (
    GaussianHead,
    ImageDecoder,
    ImageEncoder,
    LowDimDecoder,
    LowDimEncoder,
    TransitionGRU,
    check_expert,
    decode_modality,
    encode_modality,
    locate_non_finite,
    transition_prior,
)

logger = get_logger(__name__)

TRANSITION_GRU_GROUP = 'transition_gru'
JOINT_EXPERT = 'joint'

def parameter_group(name: str) -> str:
    """Optimizer group of a parameter name; only the GRU group is clipped"""
    if name.startswith('transition.gru.'):
        return TRANSITION_GRU_GROUP
    return name.split('.', 1)[0]

def _stack(gaussians: List[DiagGaussian]) -> DiagGaussian:
    return DiagGaussian(torch.stack([g.mean for g in gaussians], dim=1),
                        torch.stack([g.var for g in gaussians], dim=1))

@dataclass
class PosteriorTrace:
    """Per-step filtering results, all with shape (batch, T, ...)"""
    posteriors: DiagGaussian
    samples: torch.Tensor
    priors: DiagGaussian
    hiddens: torch.Tensor
    experts: Dict[str, DiagGaussian]

    @property
    def seq_len(self) -> int:
        return self.samples.shape[1]

@dataclass
class ElboBreakdown:
    elbo: torch.Tensor
    reconstruction: Dict[Modality, torch.Tensor]
    kl: torch.Tensor
    trace: PosteriorTrace

    def mean(self) -> torch.Tensor:
        """Batch-mean ELBO, the quantity training maximizes"""
        return self.elbo.mean()

@dataclass
class Prediction:
    latents: torch.Tensor
    prior_vars: torch.Tensor
    decoded: Dict[Modality, torch.Tensor]
    filtered: PosteriorTrace

class MultimodalLatentModel(nn.Module):
    """Encoders (inference), decoders and transition (generative) for one variant"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.modalities = config.modalities
        latent_dim = config.latent_dim
        heads = not config.concat_fusion

        self.encoders = nn.ModuleDict()
        self.decoders = nn.ModuleDict()
        for modality in self.modalities:
            if modality == Modality.IMAGE:
                self.encoders[modality.value] = ImageEncoder(config.image_shape, latent_dim,
                                                             config.image_channels, heads=heads)
                self.decoders[modality.value] = ImageDecoder(config.image_shape, latent_dim, config.image_channels)
            else:
                window = config.window_for(modality)
                self.encoders[modality.value] = LowDimEncoder(window, latent_dim, config.lowdim_channels,
                                                              heads=heads, name=modality.value)
                self.decoders[modality.value] = LowDimDecoder(window, latent_dim, config.lowdim_channels,
                                                              name=modality.value)
        self.joint_head = None
        if config.concat_fusion:
            feature_dim = sum(encoder.feature_dim for encoder in self.encoders.values())
            self.joint_head = GaussianHead(feature_dim, latent_dim)
        self.transition = TransitionGRU(latent_dim, config.control_dim, config.transition_hidden)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def parameter_store(self) -> ParameterStore:
        return ParameterStore(self, group_of=parameter_group)

    def initial_prior(self, batch: int) -> DiagGaussian:
        return DiagGaussian.standard((batch,), self.config.latent_dim, var=self.config.initial_prior_var,
                                     dtype=self.dtype)

    def _observation(self, batch: TrajectoryBatch, modality: Modality) -> torch.Tensor:
        observation = batch.observation(modality)
        if observation is None:
            raise ModalityMismatchException(
                f"variant {self.config.variant.value} needs '{modality.value}' observations but the batch has none",
                error_code="MISSING_MODALITY",
                details={"variant": self.config.variant.value, "modality": modality.value},
            )
        return observation

    def encode_step(self, batch: TrajectoryBatch, t: int) -> Dict[str, DiagGaussian]:
        """Experts for step t (0-based) from that step's observations only"""
        observations = {m: self._observation(batch, m)[:, t] for m in self.modalities}
        if self.joint_head is None:
            return {m.value: encode_modality(self.encoders[m.value], observations[m], step=t + 1)
                    for m in self.modalities}
        features = torch.cat([self.encoders[m.value].features(observations[m]) for m in self.modalities], dim=-1)
        try:
            joint = self.joint_head(features)
        except NumericException as e:
            raise locate_non_finite(e, modality=JOINT_EXPERT, term=f'expert[{JOINT_EXPERT}]', step=t + 1) from e
        return {JOINT_EXPERT: check_expert(joint, JOINT_EXPERT, step=t + 1)}

    def _noise(self, size: int, steps: int, generator: Optional[torch.Generator]) -> torch.Tensor:
        return torch.randn(size, steps, self.config.latent_dim, generator=generator, dtype=self.dtype)

    def filter_posterior(self, batch: TrajectoryBatch, noise: Optional[torch.Tensor] = None,
                         generator: Optional[torch.Generator] = None) -> PosteriorTrace:
        """
        Causal filtering pass. Step 1 fuses the initial prior with the step-1
        experts; later steps fuse the transition prior, conditioned on the
        previous sample, with that step's experts. One reparameterized sample
        per step.
        """
        batch = batch.to(self.dtype)
        size, steps = batch.batch_size, batch.seq_len
        check_shape(batch.controls, (size, steps - 1, self.config.control_dim), 'filter_posterior.controls')
        if noise is None:
            noise = self._noise(size, steps, generator)
        check_shape(noise, (size, steps, self.config.latent_dim), 'filter_posterior.noise')

        hidden = self.transition.initial_hidden(size, dtype=self.dtype)
        posteriors, priors, samples, hiddens = [], [], [], []
        experts: Dict[str, List[DiagGaussian]] = {}
        z = None
        for t in range(steps):
            if t == 0:
                prior = self.initial_prior(size)
            else:
                prior, hidden, _, _ = transition_prior(self.transition, z, batch.controls[:, t - 1], hidden,
                                                       step=t + 1)
            step_experts = self.encode_step(batch, t)
            for name, expert in step_experts.items():
                experts.setdefault(name, []).append(expert)
            posterior = product_of_experts([prior] + list(step_experts.values()))
            z = rsample(posterior, noise[:, t])
            posteriors.append(posterior)
            priors.append(prior)
            samples.append(z)
            hiddens.append(hidden)

        return PosteriorTrace(
            posteriors=_stack(posteriors),
            samples=torch.stack(samples, dim=1),
            priors=_stack(priors),
            hiddens=torch.stack(hiddens, dim=1),
            experts={name: _stack(series) for name, series in experts.items()},
        )

    def reconstruction_log_likelihood(self, batch: TrajectoryBatch, z: torch.Tensor) -> Dict[Modality, torch.Tensor]:
        """ln p(x_t^n | z_t) per modality, shape (batch, T)"""
        size, steps = z.shape[:2]
        flat_z = z.reshape(size * steps, -1)
        terms = {}
        for modality in self.modalities:
            target = self._observation(batch, modality).to(self.dtype)
            decoder = self.decoders[modality.value]
            if modality == Modality.IMAGE:
                # Bernoulli over [0, 1] intensities
                logits = decoder.logits(flat_z).view_as(target)
                nll = F.binary_cross_entropy_with_logits(logits, target, reduction='none')
                terms[modality] = -nll.sum(dim=(-2, -1))
            else:
                # unit-variance Gaussian
                mean = decoder(flat_z).view_as(target)
                terms[modality] = -0.5 * ((target - mean) ** 2 + LOG_2PI).sum(dim=(-2, -1))
        return terms

    def elbo(self, batch: TrajectoryBatch, noise: Optional[torch.Tensor] = None,
             generator: Optional[torch.Generator] = None) -> ElboBreakdown:
        """Per-sequence ELBO: summed single-sample reconstruction terms minus per-step analytic KLs"""
        batch = batch.to(self.dtype)
        trace = self.filter_posterior(batch, noise=noise, generator=generator)
        reconstruction = self.reconstruction_log_likelihood(batch, trace.samples)
        kl = kl_divergence(trace.posteriors, trace.priors)

        terms = {f'reconstruction[{m.value}]': value for m, value in reconstruction.items()}
        terms['kl'] = kl
        for name, value in terms.items():
            finite = torch.isfinite(value.detach()).all(dim=0)
            if not bool(finite.all()):
                step = int((~finite).nonzero()[0])
                raise NumericException(
                    f"elbo: non-finite {name} term at step {step + 1}",
                    error_code="NON_FINITE",
                    details={"term": name, "step": step + 1},
                )

        elbo = sum(value.sum(dim=1) for value in reconstruction.values()) - kl.sum(dim=1)
        return ElboBreakdown(elbo=elbo, reconstruction=reconstruction, kl=kl, trace=trace)

    def decode(self, z: torch.Tensor) -> Dict[Modality, torch.Tensor]:
        """Observation means for latents of shape (batch, steps, K)"""
        size, steps = z.shape[:2]
        flat_z = z.reshape(size * steps, -1)
        decoded = {}
        for modality in self.modalities:
            mean = decode_modality(self.decoders[modality.value], flat_z)
            decoded[modality] = mean.view(size, steps, *mean.shape[1:])
        return decoded

    def predict(self, context: TrajectoryBatch, future_controls: torch.Tensor, horizon: int) -> Prediction:
        """
        Filter the context with zero noise (posterior means), then roll the
        transition prior forward using prior means. Future observations are
        never read.
        """
        if horizon < 1:
            raise EvaluationException(f"predict: horizon must be >= 1, got {horizon}", error_code="BAD_HORIZON")
        if context.seq_len < 1:
            raise EvaluationException("predict: at least one context step is required", error_code="BAD_CONTEXT")
        size = context.batch_size
        check_shape(future_controls, (size, horizon, self.config.control_dim), 'predict.future_controls')
        future_controls = future_controls.to(self.dtype)

        zeros = torch.zeros(size, context.seq_len, self.config.latent_dim, dtype=self.dtype)
        filtered = self.filter_posterior(context, noise=zeros)
        z = filtered.posteriors.mean[:, -1]
        hidden = filtered.hiddens[:, -1]
        latents, prior_vars = [], []
        for j in range(horizon):
            prior, hidden, _, _ = transition_prior(self.transition, z, future_controls[:, j], hidden,
                                                   step=context.seq_len + j + 1)
            z = prior.mean
            latents.append(z)
            prior_vars.append(prior.var)
        latents = torch.stack(latents, dim=1)
        return Prediction(latents=latents, prior_vars=torch.stack(prior_vars, dim=1),
                          decoded=self.decode(latents), filtered=filtered)

def build_model(config: ModelConfig) -> MultimodalLatentModel:
    """Seeded construction in the configured precision"""
    torch.manual_seed(config.seed)
    model = MultimodalLatentModel(config).to(dtype_for(config.float_mode))
    logger.info("model_built",
                variant=config.variant.value,
                parameters=sum(p.numel() for p in model.parameters()),
                modalities=[m.value for m in model.modalities])
    return model
