import pytest
import torch

from src.core.exceptions import EvaluationException, ModalityMismatchException, NumericException, ShapeMismatchException
from src.models.pydantic_models import Modality, Variant
from src.services.fusion_model import JOINT_EXPERT, TRANSITION_GRU_GROUP, build_model, parameter_group
from src.services.gaussian import kl_divergence, product_of_experts

from helpers import zero_layer

def fixed_noise(batch, latent_dim, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(batch.batch_size, batch.seq_len, latent_dim, generator=generator, dtype=torch.float64)

@pytest.mark.parametrize('variant', list(Variant))
def test_filter_shapes_per_variant(variant, make_config, tiny_batch):
    config = make_config(variant)
    model = build_model(config)
    trace = model.filter_posterior(tiny_batch, noise=fixed_noise(tiny_batch, config.latent_dim))
    assert trace.posteriors.mean.shape == (3, tiny_batch.seq_len, config.latent_dim)
    assert trace.samples.shape == trace.priors.var.shape
    assert trace.hiddens.shape == (3, tiny_batch.seq_len, config.transition_hidden)
    expected = {JOINT_EXPERT} if variant == Variant.VHP_C else {m.value for m in config.modalities}
    assert set(trace.experts) == expected

def test_parameter_groups():
    assert parameter_group('transition.gru.weight_hh') == TRANSITION_GRU_GROUP
    assert parameter_group('transition.a_head.bias') == 'transition'
    assert parameter_group('encoders.image.trunk.0.bias') == 'encoders'

def test_missing_modality_is_rejected(make_config, tiny_batch):
    model = build_model(make_config(Variant.VH))
    batch = tiny_batch.to(torch.float64)
    batch.haptic = None
    with pytest.raises(ModalityMismatchException) as exc_info:
        model.elbo(batch)
    assert exc_info.value.details == {'variant': 'VH', 'modality': 'haptic'}

def test_vision_only_model_ignores_other_modalities(make_config, tiny_batch):
    model = build_model(make_config(Variant.V))
    noise = fixed_noise(tiny_batch, 4)
    reference = model.elbo(tiny_batch, noise=noise).elbo
    tiny_batch.haptic = None
    torch.testing.assert_close(model.elbo(tiny_batch, noise=noise).elbo, reference)

def test_wrong_control_shape(tiny_model, tiny_batch):
    tiny_batch.controls = tiny_batch.controls[:, :-1]
    with pytest.raises(ShapeMismatchException) as exc_info:
        tiny_model.filter_posterior(tiny_batch)
    assert exc_info.value.details['op'] == 'filter_posterior.controls'

@pytest.mark.parametrize('step', [0, 2, 5])
def test_filtering_is_causal(step, tiny_model, tiny_batch):
    noise = fixed_noise(tiny_batch, 4)
    reference = tiny_model.filter_posterior(tiny_batch, noise=noise)
    tiny_batch.images[:, step] = 1.0 - tiny_batch.images[:, step]
    tiny_batch.proprio[:, step] += 0.5
    changed = tiny_model.filter_posterior(tiny_batch, noise=noise)
    assert torch.equal(changed.posteriors.mean[:, :step], reference.posteriors.mean[:, :step])
    assert torch.equal(changed.samples[:, :step], reference.samples[:, :step])
    assert not torch.equal(changed.posteriors.mean[:, step], reference.posteriors.mean[:, step])

@pytest.mark.parametrize('seed', range(20))
def test_posterior_never_wider_than_prior(seed, make_config, tiny_dataset):
    config = make_config(Variant.VHP, seed=seed)
    model = build_model(config)
    batch = tiny_dataset.batch([seed % 12, (seed + 5) % 12], dtype=torch.float64)
    with torch.no_grad():
        breakdown = model.elbo(batch, generator=torch.Generator().manual_seed(seed))
    trace = breakdown.trace
    assert bool((trace.posteriors.var <= trace.priors.var).all())
    assert bool((breakdown.kl >= 0).all())

def test_posterior_is_the_product_of_prior_and_experts(tiny_model, tiny_batch):
    trace = tiny_model.filter_posterior(tiny_batch, noise=fixed_noise(tiny_batch, 4))
    for t in range(tiny_batch.seq_len):
        at_t = (slice(None), t)
        fused = product_of_experts([trace.priors.at(at_t)] + [e.at(at_t) for e in trace.experts.values()])
        torch.testing.assert_close(trace.posteriors.mean[:, t], fused.mean)
        torch.testing.assert_close(trace.posteriors.var[:, t], fused.var)

def test_silenced_experts_leave_the_prior(tiny_model, tiny_batch):
    with torch.no_grad():
        for encoder in tiny_model.encoders.values():
            zero_layer(encoder.head.mean)
            zero_layer(encoder.head.pre_var, bias=torch.full((4,), 1e12))
    breakdown = tiny_model.elbo(tiny_batch, noise=fixed_noise(tiny_batch, 4))
    trace = breakdown.trace
    torch.testing.assert_close(trace.posteriors.mean, trace.priors.mean, rtol=1e-9, atol=1e-9)
    torch.testing.assert_close(trace.posteriors.var, trace.priors.var, rtol=1e-9, atol=1e-9)
    assert float(breakdown.kl.abs().max()) < 1e-8

def test_flat_initial_prior_gives_the_expert(make_config, tiny_batch):
    model = build_model(make_config(Variant.V, initial_prior_var=1e12))
    trace = model.filter_posterior(tiny_batch, noise=fixed_noise(tiny_batch, 4))
    image_expert = trace.experts['image']
    torch.testing.assert_close(trace.posteriors.mean[:, 0], image_expert.mean[:, 0], rtol=1e-9, atol=1e-9)
    torch.testing.assert_close(trace.posteriors.var[:, 0], image_expert.var[:, 0], rtol=1e-9, atol=1e-9)

def test_silenced_haptic_expert_reduces_to_vision_and_proprio(tiny_model, tiny_batch):
    with torch.no_grad():
        haptic = tiny_model.encoders['haptic']
        zero_layer(haptic.head.mean)
        zero_layer(haptic.head.pre_var, bias=torch.full((4,), 1e15))
    trace = tiny_model.filter_posterior(tiny_batch, noise=fixed_noise(tiny_batch, 4))
    for t in range(tiny_batch.seq_len):
        at_t = (slice(None), t)
        fused = product_of_experts([trace.priors.at(at_t), trace.experts['image'].at(at_t),
                                    trace.experts['proprio'].at(at_t)])
        torch.testing.assert_close(trace.posteriors.mean[:, t], fused.mean, rtol=1e-8, atol=1e-8)
        torch.testing.assert_close(trace.posteriors.var[:, t], fused.var, rtol=1e-8, atol=1e-8)

def test_elbo_decomposes_into_reconstruction_and_kl(tiny_model, tiny_batch):
    breakdown = tiny_model.elbo(tiny_batch, noise=fixed_noise(tiny_batch, 4))
    assert set(breakdown.reconstruction) == {Modality.IMAGE, Modality.PROPRIO, Modality.HAPTIC}
    expected = sum(v.sum(dim=1) for v in breakdown.reconstruction.values()) - breakdown.kl.sum(dim=1)
    torch.testing.assert_close(breakdown.elbo, expected)
    torch.testing.assert_close(breakdown.kl, kl_divergence(breakdown.trace.posteriors, breakdown.trace.priors))
    assert breakdown.mean().dim() == 0

@pytest.mark.parametrize('step', [2, 4, 6])
def test_non_finite_expert_names_modality_and_step(step, tiny_model, tiny_batch):
    tiny_batch.haptic[:, step - 1] = float('nan')
    with pytest.raises(NumericException) as exc_info:
        tiny_model.elbo(tiny_batch, noise=fixed_noise(tiny_batch, 4))
    details = exc_info.value.details
    assert (details['modality'], details['term'], details['step']) == ('haptic', 'expert[haptic]', step)
    assert f'step={step}' in exc_info.value.message

def test_non_finite_joint_expert_is_named(make_config, tiny_batch):
    model = build_model(make_config(Variant.VHP_C))
    tiny_batch.proprio[:, 1] = float('inf')
    with pytest.raises(NumericException) as exc_info:
        model.filter_posterior(tiny_batch, noise=fixed_noise(tiny_batch, 4))
    assert exc_info.value.details['term'] == f'expert[{JOINT_EXPERT}]'
    assert exc_info.value.details['step'] == 2

def test_non_finite_control_is_blamed_on_the_prior(tiny_model, tiny_batch):
    tiny_batch.controls[:, 2] = float('nan')
    with pytest.raises(NumericException) as exc_info:
        tiny_model.filter_posterior(tiny_batch, noise=fixed_noise(tiny_batch, 4))
    assert exc_info.value.details['term'] == 'prior'
    # controls[:, t - 1] drive the prior of step t + 1 (1-based)
    assert exc_info.value.details['step'] == 4

def test_elbo_names_the_non_finite_reconstruction_term(tiny_model, tiny_batch):
    with torch.no_grad():
        tiny_model.decoders['image'].deconv[-1].bias.fill_(float('nan'))
    with pytest.raises(NumericException) as exc_info:
        tiny_model.elbo(tiny_batch, noise=fixed_noise(tiny_batch, 4))
    assert exc_info.value.details == {'term': 'reconstruction[image]', 'step': 1}


def test_elbo_is_deterministic_under_a_seeded_generator(tiny_model, tiny_batch):
    first = tiny_model.elbo(tiny_batch, generator=torch.Generator().manual_seed(9)).elbo
    second = tiny_model.elbo(tiny_batch, generator=torch.Generator().manual_seed(9)).elbo
    assert torch.equal(first, second)

def test_build_model_is_seeded(make_config):
    first, second = build_model(make_config(seed=4)), build_model(make_config(seed=4))
    for a, b in zip(first.parameters(), second.parameters()):
        assert torch.equal(a, b)
    assert first.dtype == torch.float64

def test_prediction_shapes(tiny_model, tiny_batch):
    prediction = tiny_model.predict(tiny_batch.context(2), tiny_batch.future_controls(2, 3), horizon=3)
    assert prediction.latents.shape == (3, 3, 4)
    assert prediction.prior_vars.shape == (3, 3, 4)
    assert prediction.decoded[Modality.IMAGE].shape == (3, 3, 16, 16)
    assert prediction.decoded[Modality.HAPTIC].shape == (3, 3, 4, 3)
    assert prediction.filtered.seq_len == 2

def test_prediction_never_reads_future_observations(tiny_model, tiny_batch):
    controls = tiny_batch.future_controls(2, 4)
    reference = tiny_model.predict(tiny_batch.context(2), controls, horizon=4)
    tiny_batch.images[:, 2:] = 0.0
    tiny_batch.proprio[:, 2:] = 100.0
    tiny_batch.haptic[:, 2:] = -100.0
    again = tiny_model.predict(tiny_batch.context(2), controls, horizon=4)
    assert torch.equal(reference.latents, again.latents)
    assert torch.equal(reference.decoded[Modality.IMAGE], again.decoded[Modality.IMAGE])

def test_prediction_starts_from_the_filtered_mean(tiny_model, tiny_batch):
    prediction = tiny_model.predict(tiny_batch.context(3), tiny_batch.future_controls(3, 1), horizon=1)
    zeros = torch.zeros(3, 3, 4, dtype=torch.float64)
    filtered = tiny_model.filter_posterior(tiny_batch.context(3), noise=zeros)
    prior, _, _, _ = tiny_model.transition(filtered.posteriors.mean[:, -1], tiny_batch.controls[:, 2],
                                           filtered.hiddens[:, -1])
    torch.testing.assert_close(prediction.latents[:, 0], prior.mean)

def test_prediction_protocol_errors(tiny_model, tiny_batch):
    with pytest.raises(EvaluationException):
        tiny_model.predict(tiny_batch.context(2), tiny_batch.future_controls(2, 0), horizon=0)
    with pytest.raises(ShapeMismatchException):
        tiny_model.predict(tiny_batch.context(2), tiny_batch.future_controls(2, 2), horizon=3)

@pytest.mark.parametrize('seed', range(6))
@pytest.mark.parametrize('variant', list(Variant))
def test_every_parameter_receives_a_gradient(variant, seed, make_config, tiny_batch):
    model = build_model(make_config(variant, seed=seed))
    loss = -model.elbo(tiny_batch, generator=torch.Generator().manual_seed(seed)).mean()
    loss.backward()
    inactive = [name for name, param in model.named_parameters()
                if param.grad is None or float(param.grad.abs().sum()) == 0.0]
    assert inactive == []
