"""
Differentiable computation substrate.

Thin layer over torch autograd: precision modes, shape/finite guards that raise
domain errors, weight-normalized layers, a named parameter store with a raw
little-endian payload, Adam with per-group gradient clipping, and a
central-difference gradient checker.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence
import numpy as np
import torch
from torch import nn
from torch.nn.utils import parametrizations

from src.core.exceptions import LatentFusionException, NumericException, ShapeMismatchException
from src.core.logging_config import get_logger
from src.models.pydantic_models import FloatMode

logger = get_logger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

_DTYPES = {FloatMode.F64: torch.float64, FloatMode.F32: torch.float32}
_PAYLOAD_DTYPES = {FloatMode.F64: '<f8', FloatMode.F32: '<f4'}

def dtype_for(mode: FloatMode) -> torch.dtype:
    return _DTYPES[FloatMode(mode)]

def payload_dtype_for(mode: FloatMode) -> str:
    return _PAYLOAD_DTYPES[FloatMode(mode)]

def check_shape(tensor: torch.Tensor, expected: Sequence[Optional[int]], op: str) -> torch.Tensor:
    """Raise ShapeMismatchException unless tensor matches expected (None matches any extent)"""
    actual = tuple(tensor.shape)
    if len(actual) != len(expected) or any(e is not None and e != a for e, a in zip(expected, actual)):
        raise ShapeMismatchException(op, [(-1 if e is None else e) for e in expected], actual)
    return tensor

def check_same_shape(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchException(op, tuple(a.shape), tuple(b.shape))

def check_finite(tensor: torch.Tensor, op: str, **context) -> torch.Tensor:
    """Raise NumericException when tensor holds NaN or Inf; context lands in the message and details"""
    if not bool(torch.isfinite(tensor).all()):
        where = "".join(f" {key}={value}" for key, value in context.items())
        raise NumericException(
            f"{op}: non-finite values in output{where}",
            error_code="NON_FINITE",
            details={"op": op, **context},
        )
    return tensor

# Forward primitives not provided as a single torch call

def affine(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeMismatchException('affine', (weight.shape[-1],), (x.shape[-1],))
    return check_finite(nn.functional.linear(x, weight, bias), 'affine')

def gru_cell(cell: nn.GRUCell, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """One GRU step with shape and finiteness guards"""
    check_shape(x, (None, cell.input_size), 'gru_cell.input')
    check_shape(h, (x.shape[0], cell.hidden_size), 'gru_cell.hidden')
    return check_finite(cell(x, h), 'gru_cell')

# Weight normalization

def output_axis(module: nn.Module) -> int:
    # transposed convolutions store weights as (in, out, ...)
    return 1 if isinstance(module, (nn.ConvTranspose1d, nn.ConvTranspose2d)) else 0

def weight_normed(module: nn.Module) -> nn.Module:
    """Reparameterize module.weight as scale * direction / ||direction|| along the output axis"""
    return parametrizations.weight_norm(module, name='weight', dim=output_axis(module))

def is_weight_normed(module: nn.Module) -> bool:
    return hasattr(module, 'parametrizations') and 'weight' in module.parametrizations

# Parameter store

@dataclass(frozen=True)
class ParameterEntry:
    name: str
    tensor: nn.Parameter
    group: str
    weight_norm: bool

class ParameterStore:
    """Named view over a module's learnable parameters"""

    def __init__(self, module: nn.Module, group_of: Optional[Callable[[str], str]] = None):
        self.module = module
        self._group_of = group_of or (lambda name: name.split('.', 1)[0])
        self._entries: Dict[str, ParameterEntry] = {}
        for name, tensor in module.named_parameters():
            self._entries[name] = ParameterEntry(
                name=name,
                tensor=tensor,
                group=self._group_of(name),
                weight_norm='.parametrizations.' in name,
            )

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries.values())

    def __getitem__(self, name: str) -> ParameterEntry:
        return self._entries[name]

    def names(self) -> List[str]:
        return list(self._entries)

    def shapes(self) -> Dict[str, List[int]]:
        return {name: list(entry.tensor.shape) for name, entry in self._entries.items()}

    def select(self, group: Optional[str] = None) -> List[ParameterEntry]:
        """Entries of one group (all entries when group is None)"""
        return [e for e in self._entries.values() if group is None or e.group == group]

    def zero_grad(self) -> None:
        for entry in self._entries.values():
            if entry.tensor.grad is not None:
                entry.tensor.grad.zero_()

    def to_payload(self, mode: FloatMode) -> bytes:
        """Concatenate parameters in name order as raw little-endian floats"""
        dtype = payload_dtype_for(mode)
        chunks = [
            entry.tensor.detach().cpu().numpy().astype(dtype, copy=False).tobytes(order='C')
            for entry in self._entries.values()
        ]
        return b''.join(chunks)

    def payload_size(self, mode: FloatMode) -> int:
        itemsize = np.dtype(payload_dtype_for(mode)).itemsize
        return sum(entry.tensor.numel() for entry in self._entries.values()) * itemsize

    @torch.no_grad()
    def load_payload(self, payload: bytes, mode: FloatMode) -> None:
        dtype = np.dtype(payload_dtype_for(mode))
        expected = self.payload_size(mode)
        if len(payload) != expected:
            raise LatentFusionException(
                f"parameter payload has {len(payload)} bytes, expected {expected}",
                error_code="PAYLOAD_SIZE",
                details={"expected": expected, "actual": len(payload)},
            )
        offset = 0
        for entry in self._entries.values():
            count = entry.tensor.numel()
            values = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
            offset += count * dtype.itemsize
            entry.tensor.copy_(torch.from_numpy(values.copy()).reshape(entry.tensor.shape))

    def snapshot(self) -> Dict[str, torch.Tensor]:
        return {name: e.tensor.detach().clone() for name, e in self._entries.items()}

    @torch.no_grad()
    def restore(self, snapshot: Dict[str, torch.Tensor]) -> None:
        for name, value in snapshot.items():
            self._entries[name].tensor.copy_(value)

# Backward and optimization

def backward(loss: torch.Tensor) -> None:
    """Populate .grad of every tracked tensor reachable from a scalar loss"""
    if loss.dim() != 0:
        raise ShapeMismatchException('backward', (), tuple(loss.shape),
                                     message=f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), 'backward.loss')
    loss.backward()

@dataclass
class AdamState:
    optimizer: torch.optim.Adam
    step_count: int = 0

    @classmethod
    def for_store(cls, store: ParameterStore, lr: float) -> 'AdamState':
        params = [entry.tensor for entry in store]
        return cls(optimizer=torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS))

def adam_step(store: ParameterStore,
              state: AdamState,
              lr: float,
              clip_norm: Optional[float] = None,
              group: Optional[str] = None) -> Optional[float]:
    """
    One Adam update over the store.

    When clip_norm is set, the global gradient 2-norm of `group` is rescaled
    to at most clip_norm first; other groups are left unclipped. Returns the
    pre-clip norm of that group (None when no clipping was requested).
    """
    if lr <= 0:
        raise ValueError('lr must be > 0')
    missing = [entry.name for entry in store if entry.tensor.grad is None]
    if missing:
        raise LatentFusionException(
            f"adam_step: gradients missing for {len(missing)} parameters: {', '.join(missing)}",
            error_code="MISSING_GRADS",
            details={"parameters": missing},
        )
    for param_group in state.optimizer.param_groups:
        param_group['lr'] = lr

    group_norm = None
    if clip_norm is not None:
        clipped = [entry.tensor for entry in store.select(group)]
        if clipped:
            group_norm = float(torch.nn.utils.clip_grad_norm_(clipped, clip_norm))

    state.optimizer.step()
    state.step_count += 1
    store.zero_grad()
    return group_norm

# Gradient checking

def _central_difference(scalar_fn: Callable[[], torch.Tensor], flat: torch.Tensor, index: int, step: float) -> float:
    original = flat[index].item()
    with torch.no_grad():
        flat[index] = original + step
        upper = float(scalar_fn())
        flat[index] = original - step
        lower = float(scalar_fn())
        flat[index] = original
    return (upper - lower) / (2 * step)

def grad_check(scalar_fn: Callable[[], torch.Tensor],
               params: Iterable[torch.Tensor],
               epsilon: float = 1e-5,
               max_entries_per_param: Optional[int] = None,
               generator: Optional[np.random.Generator] = None,
               retry_above: Optional[float] = None) -> float:
    """
    Max over parameter entries of |analytic - central difference| / max(1, |analytic|, |numeric|).

    scalar_fn must be deterministic (freeze any noise it uses). With
    max_entries_per_param set, a random subset of each parameter's entries
    is checked. With retry_above set, an entry whose error exceeds it is
    measured again with a step ten times smaller and the smaller error
    kept.
    """
    if epsilon <= 0:
        raise ValueError('epsilon must be > 0')
    params = list(params)
    with torch.no_grad():
        first, second = float(scalar_fn()), float(scalar_fn())
    if first != second:
        raise LatentFusionException(
            "grad_check: scalar_fn is not deterministic; fix its noise inputs",
            error_code="NON_DETERMINISTIC",
            details={"first": first, "second": second},
        )

    value = scalar_fn()
    analytic = torch.autograd.grad(value, params, allow_unused=True)
    rng = generator or np.random.default_rng(0)

    def relative_error(exact: float, numeric: float) -> float:
        return abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))

    worst, retried = 0.0, 0
    for param, grad in zip(params, analytic):
        grad = torch.zeros_like(param) if grad is None else grad
        flat = param.data.view(-1)
        indices = np.arange(flat.numel())
        if max_entries_per_param is not None and flat.numel() > max_entries_per_param:
            indices = rng.choice(flat.numel(), size=max_entries_per_param, replace=False)
        for index in indices:
            exact = grad.view(-1)[index].item()
            error = relative_error(exact, _central_difference(scalar_fn, flat, int(index), epsilon))
            if retry_above is not None and error > retry_above:
                retried += 1
                error = min(error, relative_error(exact, _central_difference(scalar_fn, flat, int(index),
                                                                              epsilon / 10)))
            worst = max(worst, error)
    logger.debug("grad_check_finished", max_relative_error=worst, params=len(params), retried=retried)
    return worst
