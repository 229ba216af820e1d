"""Test-side views into layer internals: weight-norm factors, silenced layers and Adam moments"""

from typing import Optional
import torch
from torch import nn

from src.services.diffcore import AdamState, ParameterEntry, is_weight_normed, output_axis

def effective_weight(module: nn.Module) -> torch.Tensor:
    """Recompute scale * direction / ||direction|| from the stored factors"""
    if not is_weight_normed(module):
        return module.weight
    scale = module.parametrizations.weight.original0
    direction = module.parametrizations.weight.original1
    axis = output_axis(module)
    reduce_dims = [d for d in range(direction.dim()) if d != axis]
    norm = torch.linalg.vector_norm(direction, dim=reduce_dims, keepdim=True)
    assert bool((norm > 0).all()), "weight-norm direction has zero norm"
    return scale * direction / norm

@torch.no_grad()
def zero_layer(module: nn.Module, bias: Optional[torch.Tensor] = None) -> None:
    """Make a layer output its bias only (scale zeroed for weight-normed layers)"""
    if is_weight_normed(module):
        module.parametrizations.weight.original0.zero_()
    else:
        module.weight.zero_()
    if module.bias is not None:
        if bias is None:
            module.bias.zero_()
        else:
            module.bias.copy_(torch.as_tensor(bias, dtype=module.bias.dtype).reshape(module.bias.shape))

def adam_moments(state: AdamState, entry: ParameterEntry):
    """(first_moment, second_moment) of an entry, None before the first step"""
    moments = state.optimizer.state.get(entry.tensor, {})
    if not moments:
        return None
    return moments['exp_avg'], moments['exp_avg_sq']
