"""
Diagonal Gaussian algebra.

All operations act on the last axis; leading axes are batch axes. Reductions
(KL, log-density) sum over the latent axis and keep the batch axes.
"""

from dataclasses import dataclass
from typing import Sequence
import math
import torch
import torch.nn.functional as F

from src.core.exceptions import LatentFusionException, ShapeMismatchException
from src.services.diffcore import check_same_shape

VAR_FLOOR = 1e-6
LOG_2PI = math.log(2 * math.pi)

@dataclass(frozen=True)
class DiagGaussian:
    mean: torch.Tensor
    var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise ShapeMismatchException('DiagGaussian', tuple(self.mean.shape), tuple(self.var.shape))
        object.__setattr__(self, 'var', torch.clamp(self.var, min=VAR_FLOOR))

    @classmethod
    def from_pre_variance(cls, mean: torch.Tensor, pre_var: torch.Tensor) -> 'DiagGaussian':
        """Network heads emit an unconstrained pre-variance; softplus + floor makes it positive"""
        return cls(mean, F.softplus(pre_var) + VAR_FLOOR)

    @classmethod
    def standard(cls, batch_shape: Sequence[int], dim: int, var: float = 1.0,
                 dtype: torch.dtype = None) -> 'DiagGaussian':
        shape = (*batch_shape, dim)
        return cls(torch.zeros(shape, dtype=dtype), torch.full(shape, float(var), dtype=dtype))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> torch.Tensor:
        return torch.sqrt(self.var)

    def at(self, index) -> 'DiagGaussian':
        """Select along the batch axes, e.g. g.at((slice(None), t)) for step t"""
        return DiagGaussian(self.mean[index], self.var[index])

    def detach(self) -> 'DiagGaussian':
        return DiagGaussian(self.mean.detach(), self.var.detach())

def product_of_experts(experts: Sequence[DiagGaussian]) -> DiagGaussian:
    """
    Normalized product of Gaussian experts: precisions add, the mean is the
    precision-weighted mean. Summands are sorted before reduction so the
    result does not depend on argument order.
    """
    if not experts:
        raise LatentFusionException("product_of_experts: empty expert list", error_code="EMPTY_POE")
    for expert in experts[1:]:
        check_same_shape(experts[0].mean, expert.mean, 'product_of_experts')

    precisions = torch.stack([1.0 / e.var for e in experts], dim=0)
    weighted = torch.stack([e.mean / e.var for e in experts], dim=0)
    precision = torch.sort(precisions, dim=0).values.sum(dim=0)
    weighted_sum = torch.sort(weighted, dim=0).values.sum(dim=0)
    return DiagGaussian(weighted_sum / precision, 1.0 / precision)

def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """KL(q || p) summed over the latent axis"""
    check_same_shape(q.mean, p.mean, 'kl_divergence')
    ratio = q.var / p.var
    return 0.5 * torch.sum(ratio + (q.mean - p.mean) ** 2 / p.var - 1.0 - torch.log(ratio), dim=-1)

def rsample(g: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw mean + sqrt(var) * noise; gradients reach mean and var only"""
    check_same_shape(g.mean, noise, 'rsample')
    return g.mean + g.std * noise.detach()

def log_prob(g: DiagGaussian, x: torch.Tensor) -> torch.Tensor:
    """Log-density summed over the latent axis"""
    check_same_shape(g.mean, x, 'log_prob')
    return -0.5 * torch.sum(LOG_2PI + torch.log(g.var) + (x - g.mean) ** 2 / g.var, dim=-1)
