"""
Per-modality experts, decoders and the recurrent transition model.

Every layer except the GRU is weight-normalized. Encoders split into a
feature trunk and Gaussian heads so the concatenation baseline can fuse
trunk features instead of experts.
"""

from typing import Optional, Sequence, Tuple
import math
import torch
from torch import nn
import torch.nn.functional as F

from src.core.exceptions import NumericException, ShapeMismatchException
from src.services.diffcore import affine, check_finite, gru_cell, weight_normed
from src.services.gaussian import DiagGaussian, VAR_FLOOR

# bias of every layer feeding a ReLU; all-zero inputs (black background) stay in the active region
RELU_BIAS = 0.1

def _rectified(layer: nn.Module) -> nn.Module:
    nn.init.constant_(layer.bias, RELU_BIAS)
    return weight_normed(layer)

def _halved_length(window: int) -> int:
    # kernel 3, stride 2, padding 1
    return (window + 1) // 2

class GaussianHead(nn.Module):
    """Affine heads producing a DiagGaussian from a feature vector"""

    def __init__(self, in_features: int, latent_dim: int):
        super().__init__()
        self.mean = weight_normed(nn.Linear(in_features, latent_dim))
        self.pre_var = weight_normed(nn.Linear(in_features, latent_dim))

    def forward(self, features: torch.Tensor) -> DiagGaussian:
        mean = affine(features, self.mean.weight, self.mean.bias)
        pre_var = affine(features, self.pre_var.weight, self.pre_var.bias)
        return DiagGaussian.from_pre_variance(mean, pre_var)

class ImageEncoder(nn.Module):
    """Four stride-2 convolutions (kernel 4) with ReLU, flatten, Gaussian heads"""

    def __init__(self, image_shape: Tuple[int, int], latent_dim: int,
                 channels: Sequence[int] = (32, 64, 128, 256), heads: bool = True):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.name = 'image'
        layers, in_channels = [], 1
        for out_channels in channels:
            layers += [_rectified(nn.Conv2d(in_channels, out_channels, kernel_size=4, stride=2, padding=1)),
                       nn.ReLU()]
            in_channels = out_channels
        self.trunk = nn.Sequential(*layers, nn.Flatten())
        height, width = self.image_shape
        self.feature_dim = channels[-1] * (height // 16) * (width // 16)
        self.head = GaussianHead(self.feature_dim, latent_dim) if heads else None

    def features(self, images: torch.Tensor) -> torch.Tensor:
        if tuple(images.shape[1:]) != self.image_shape:
            raise ShapeMismatchException('encode_modality[image]', self.image_shape, tuple(images.shape[1:]))
        return self.trunk(images.unsqueeze(1))

    def forward(self, images: torch.Tensor) -> DiagGaussian:
        return self.head(self.features(images))

class LowDimEncoder(nn.Module):
    """Two 1-D convolutions over the within-step window, flatten, Gaussian heads"""

    def __init__(self, window: Tuple[int, int], latent_dim: int,
                 channels: Sequence[int] = (32, 64), heads: bool = True, name: str = 'lowdim'):
        super().__init__()
        self.window = tuple(window)
        self.name = name
        length, dim = self.window
        self.trunk = nn.Sequential(
            _rectified(nn.Conv1d(dim, channels[0], kernel_size=3, stride=1, padding=1)),
            nn.ReLU(),
            _rectified(nn.Conv1d(channels[0], channels[1], kernel_size=3, stride=2, padding=1)),
            nn.ReLU(),
            nn.Flatten(),
        )
        self.feature_dim = channels[1] * _halved_length(length)
        self.head = GaussianHead(self.feature_dim, latent_dim) if heads else None

    def features(self, windows: torch.Tensor) -> torch.Tensor:
        if tuple(windows.shape[1:]) != self.window:
            raise ShapeMismatchException(f'encode_modality[{self.name}]', self.window, tuple(windows.shape[1:]))
        # (batch, W, D) -> (batch, D, W): measurement dims are channels
        return self.trunk(windows.transpose(1, 2))

    def forward(self, windows: torch.Tensor) -> DiagGaussian:
        return self.head(self.features(windows))

class ImageDecoder(nn.Module):
    """Affine to a coarse feature map, four stride-2 transposed convolutions; emits pixel logits"""

    def __init__(self, image_shape: Tuple[int, int], latent_dim: int,
                 channels: Sequence[int] = (32, 64, 128, 256)):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.name = 'image'
        self.latent_dim = latent_dim
        height, width = self.image_shape
        self.coarse = (channels[-1], height // 16, width // 16)
        self.project = _rectified(nn.Linear(latent_dim, math.prod(self.coarse)))
        reversed_channels = list(channels[::-1]) + [1]
        layers = []
        for index, (c_in, c_out) in enumerate(zip(reversed_channels[:-1], reversed_channels[1:])):
            deconv = nn.ConvTranspose2d(c_in, c_out, kernel_size=4, stride=2, padding=1)
            if index < len(channels) - 1:
                layers += [_rectified(deconv), nn.ReLU()]
            else:
                layers.append(weight_normed(deconv))
        self.deconv = nn.Sequential(*layers)

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.latent_dim:
            raise ShapeMismatchException('decode_modality[image]', (self.latent_dim,), (z.shape[-1],))
        hidden = F.relu(self.project(z)).view(-1, *self.coarse)
        return self.deconv(hidden).squeeze(1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(z))

class LowDimDecoder(nn.Module):
    """Affine plus two 1-D transposed convolutions mirroring LowDimEncoder; linear output"""

    def __init__(self, window: Tuple[int, int], latent_dim: int,
                 channels: Sequence[int] = (32, 64), name: str = 'lowdim'):
        super().__init__()
        self.window = tuple(window)
        self.latent_dim = latent_dim
        self.name = name
        length, dim = self.window
        self.coarse = (channels[1], _halved_length(length))
        self.project = _rectified(nn.Linear(latent_dim, math.prod(self.coarse)))
        output_padding = length - (2 * self.coarse[1] - 1)
        self.upsample = _rectified(nn.ConvTranspose1d(channels[1], channels[0], kernel_size=3, stride=2,
                                                         padding=1, output_padding=output_padding))
        self.out = weight_normed(nn.ConvTranspose1d(channels[0], dim, kernel_size=3, stride=1, padding=1))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.latent_dim:
            raise ShapeMismatchException(f'decode_modality[{self.name}]', (self.latent_dim,), (z.shape[-1],))
        hidden = F.relu(self.project(z)).view(-1, *self.coarse)
        hidden = F.relu(self.upsample(hidden))
        return self.out(hidden).transpose(1, 2)

class TransitionGRU(nn.Module):
    """
    Single-layer GRU over [z_{t-1}, u_{t-1}] whose heads emit time-varying
    linear dynamics A_t, B_t and a diagonal process-noise variance.
    """

    def __init__(self, latent_dim: int, control_dim: int, hidden: int = 256):
        super().__init__()
        self.latent_dim = latent_dim
        self.control_dim = control_dim
        self.hidden = hidden
        self.gru = nn.GRUCell(latent_dim + control_dim, hidden)
        self.a_head = nn.Linear(hidden, latent_dim * latent_dim)
        self.b_head = nn.Linear(hidden, latent_dim * control_dim)
        self.var_head = nn.Linear(hidden, latent_dim)
        self.reset_parameters()
        self.a_head = weight_normed(self.a_head)
        self.b_head = weight_normed(self.b_head)
        self.var_head = weight_normed(self.var_head)

    @torch.no_grad()
    def reset_parameters(self) -> None:
        input_bound = 1.0 / math.sqrt(self.latent_dim + self.control_dim)
        hidden_bound = 1.0 / math.sqrt(self.hidden)
        self.gru.weight_ih.uniform_(-input_bound, input_bound)
        self.gru.weight_hh.uniform_(-hidden_bound, hidden_bound)
        self.gru.bias_ih.zero_()
        self.gru.bias_hh.zero_()
        # A_t starts near identity
        self.a_head.weight.uniform_(-1e-3, 1e-3)
        self.a_head.bias.copy_(torch.eye(self.latent_dim).flatten())

    def initial_hidden(self, batch: int, dtype: torch.dtype = None) -> torch.Tensor:
        return torch.zeros(batch, self.hidden, dtype=dtype)

    def forward(self, z_prev: torch.Tensor, u_prev: torch.Tensor,
                h_prev: torch.Tensor) -> Tuple[DiagGaussian, torch.Tensor, torch.Tensor, torch.Tensor]:
        if z_prev.shape[-1] != self.latent_dim:
            raise ShapeMismatchException('transition_prior.z', (self.latent_dim,), (z_prev.shape[-1],))
        if u_prev.shape[-1] != self.control_dim:
            raise ShapeMismatchException('transition_prior.u', (self.control_dim,), (u_prev.shape[-1],))
        h_next = gru_cell(self.gru, torch.cat([z_prev, u_prev], dim=-1), h_prev)
        batch = z_prev.shape[0]
        a_t = self.a_head(h_next).view(batch, self.latent_dim, self.latent_dim)
        b_t = self.b_head(h_next).view(batch, self.latent_dim, self.control_dim)
        mean = (a_t @ z_prev.unsqueeze(-1) + b_t @ u_prev.unsqueeze(-1)).squeeze(-1)
        var = F.softplus(self.var_head(h_next)) + VAR_FLOOR
        prior = DiagGaussian(check_finite(mean, 'transition_prior'), check_finite(var, 'transition_prior'))
        return prior, h_next, a_t, b_t

def locate_non_finite(error: NumericException, **context) -> NumericException:
    """Copy of a non-finite error annotated with where in the sequence it happened"""
    known = {key: value for key, value in context.items() if value is not None}
    where = "".join(f" {key}={value}" for key, value in known.items() if key not in error.details)
    return NumericException(f"{error.message}{where}", error_code=error.error_code,
                            details={**error.details, **known})

def check_expert(expert: DiagGaussian, name: str, step: Optional[int] = None) -> DiagGaussian:
    """Raise NumericException naming the expert (and step) when its mean or variance is not finite"""
    context = {'modality': name, 'term': f'expert[{name}]'}
    if step is not None:
        context['step'] = step
    check_finite(expert.mean, 'encode_modality', **context)
    check_finite(expert.var, 'encode_modality', **context)
    return expert

def encode_modality(encoder: nn.Module, observation: torch.Tensor, step: Optional[int] = None) -> DiagGaussian:
    """Expert for one modality at one time step"""
    name = getattr(encoder, 'name', 'image')
    try:
        expert = encoder(observation)
    except NumericException as e:
        raise locate_non_finite(e, modality=name, term=f'expert[{name}]', step=step) from e
    return check_expert(expert, name, step)

def decode_modality(decoder: nn.Module, z: torch.Tensor) -> torch.Tensor:
    """Mean of p(x | z): pixel intensities for images, window values for low-dim channels"""
    return check_finite(decoder(z), 'decode_modality', modality=getattr(decoder, 'name', 'image'))

def transition_prior(transition: TransitionGRU, z_prev: torch.Tensor, u_prev: torch.Tensor,
                     h_prev: Optional[torch.Tensor] = None, step: Optional[int] = None):
    """(prior_t, h_t, A_t, B_t) for one step; step (1-based) is reported on non-finite values"""
    if h_prev is None:
        h_prev = transition.initial_hidden(z_prev.shape[0], dtype=z_prev.dtype)
    try:
        return transition(z_prev, u_prev, h_prev)
    except NumericException as e:
        raise locate_non_finite(e, term='prior', step=step) from e
