"""
Differentiable computation layer: tensors, constrained parameters, Adam and
finite-difference gradient checks.

Every other numerical module builds on this one:

  * ``Value``       : a float64 ``torch.Tensor``
  * ``Param``       : an ``nn.Module`` holding one unconstrained
                      ``nn.Parameter`` and exposing its constrained view
  * ``backward``    : overwrite ``.grad`` of every parameter with ∂loss/∂param
  * ``AdamState``   : Adam accumulators for a parameter list
  * ``finite_diff_check`` : max relative error against central differences
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from Scripts.core.errors import NumericalError
from Scripts.core.logging_config import get_logger

logger = get_logger(__name__)

DTYPE = torch.float64

Value = torch.Tensor


# ============================================================================
# TENSOR HELPERS
# ============================================================================

def as_tensor(x: object) -> Value:
    """Convert arrays, scalars or tensors to a float64 tensor (no copy if possible)."""
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    arr = np.asarray(x, dtype=np.float64)
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.as_tensor(arr, dtype=DTYPE)


def to_numpy(x: Value) -> np.ndarray:
    """Detach a tensor and return it as a float64 numpy array."""
    return x.detach().cpu().numpy().astype(np.float64, copy=False)


def make_generator(seed: int) -> torch.Generator:
    """Seeded CPU random stream; all sampling in the package draws from one of these."""
    return torch.Generator().manual_seed(int(seed))


def randn(*shape: int, generator: torch.Generator) -> Value:
    return torch.randn(*shape, generator=generator, dtype=DTYPE)


@torch.no_grad()
def fan_in_uniform_(layer: nn.Linear, generator: torch.Generator) -> nn.Linear:
    """Weights and biases ~ U(−1/√fan_in, 1/√fan_in), drawn from ``generator``."""
    bound = 1.0 / math.sqrt(max(layer.in_features, 1))
    layer.weight.uniform_(-bound, bound, generator=generator)
    if layer.bias is not None:
        layer.bias.uniform_(-bound, bound, generator=generator)
    return layer


def make_mlp(sizes: Sequence[int], generator: torch.Generator) -> nn.Sequential:
    """tanh network with the given layer widths (no activation after the last layer)."""
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(fan_in_uniform_(nn.Linear(a, b, dtype=DTYPE), generator))
        if i < len(sizes) - 2:
            layers.append(nn.Tanh())
    return nn.Sequential(*layers)


# ============================================================================
# CONSTRAINED PARAMETERS
# ============================================================================

class Constraint(str, Enum):
    NONE = "none"
    POSITIVE = "positive"
    CHOLESKY = "cholesky"


def _to_unconstrained(value: Value, constraint: Constraint) -> Value:
    if constraint is Constraint.POSITIVE:
        if (value <= 0).any():
            raise ValueError("Positive parameter initialised with a non-positive value.")
        return torch.log(value)
    if constraint is Constraint.CHOLESKY:
        if value.ndim != 2 or value.shape[0] != value.shape[1]:
            raise ValueError(f"Cholesky parameter must be square, got shape {tuple(value.shape)}.")
        diag = torch.diagonal(value)
        if (diag <= 0).any():
            raise ValueError("Cholesky parameter needs a strictly positive diagonal.")
        return torch.tril(value, -1) + torch.diag(torch.log(diag))
    return value


class Param(nn.Module):
    """A trainable tensor stored in unconstrained space.

    ``positive`` parameters are stored as logs; ``cholesky`` parameters keep
    the strictly-lower triangle free and store the log of the diagonal, so
    the constrained view is always a valid Cholesky factor.
    """

    def __init__(
        self,
        value: object,
        constraint: Constraint | str = Constraint.NONE,
        trainable: bool = True,
    ) -> None:
        super().__init__()
        self.constraint = Constraint(constraint)
        raw = _to_unconstrained(as_tensor(value).clone(), self.constraint)
        self.raw = nn.Parameter(raw, requires_grad=trainable)

    def forward(self) -> Value:
        return self.value

    @property
    def value(self) -> Value:
        if self.constraint is Constraint.POSITIVE:
            return torch.exp(self.raw)
        if self.constraint is Constraint.CHOLESKY:
            return torch.tril(self.raw, -1) + torch.diag(torch.exp(torch.diagonal(self.raw)))
        return self.raw

    @torch.no_grad()
    def assign(self, value: object) -> None:
        """Overwrite the constrained value in place."""
        self.raw.copy_(_to_unconstrained(as_tensor(value), self.constraint))

    @property
    def shape(self) -> torch.Size:
        return self.raw.shape

    def extra_repr(self) -> str:
        return f"shape={tuple(self.raw.shape)}, constraint={self.constraint.value}"


# ============================================================================
# GRADIENTS
# ============================================================================

def trainable(params: Iterable[nn.Parameter]) -> list[nn.Parameter]:
    """Unique parameters that require gradients, in first-seen order."""
    seen: set[int] = set()
    out: list[nn.Parameter] = []
    for p in params:
        if p.requires_grad and id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def backward(loss: Value, params: Iterable[nn.Parameter]) -> None:
    """Write ∂loss/∂p into ``p.grad`` for every trainable parameter.

    Gradients are overwritten, never accumulated. Parameters the loss does
    not depend on receive a zero gradient.

    Raises:
        ValueError: If ``loss`` is not a scalar.
        NumericalError: If the loss or any gradient is NaN/Inf.
    """
    if loss.ndim != 0:
        raise ValueError(f"backward() needs a scalar loss, got shape {tuple(loss.shape)}.")
    if not torch.isfinite(loss):
        raise NumericalError(f"Non-finite loss encountered: {loss.item()!r}.")
    plist = trainable(params)
    grads = torch.autograd.grad(loss, plist, allow_unused=True)
    for p, g in zip(plist, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericalError(f"Non-finite gradient for a parameter of shape {tuple(p.shape)}.")
        p.grad = g.detach().clone()


# ============================================================================
# ADAM
# ============================================================================

@dataclass
class AdamState:
    """Adam accumulators for a fixed parameter list (β₁=0.9, β₂=0.999, ε=1e-8)."""

    params: list[nn.Parameter]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimizer: torch.optim.Adam = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.params = trainable(self.params)
        self.optimizer = torch.optim.Adam(
            self.params, lr=1e-3, betas=(self.beta1, self.beta2), eps=self.eps
        )

    @property
    def step_count(self) -> int:
        steps = [self.optimizer.state[p].get("step", 0) for p in self.params if p in self.optimizer.state]
        return int(max((int(s) for s in steps), default=0))


def adam_step(state: AdamState, lr: float) -> None:
    """Apply one Adam update in unconstrained space.

    Raises:
        ValueError: If ``lr`` is not positive or a parameter has no gradient.
    """
    if lr <= 0:
        raise ValueError(f"Learning rate must be positive, got {lr}.")
    for p in state.params:
        if p.grad is None:
            raise ValueError(f"Missing gradient for a parameter of shape {tuple(p.shape)}.")
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()


# ============================================================================
# FINITE DIFFERENCES
# ============================================================================

def finite_diff_gradients(
    loss_fn: Callable[[], Value],
    params: Sequence[nn.Parameter],
    h: float = 1e-5,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic and central-difference gradients, flattened over all params.

    ``loss_fn`` must be deterministic (fix its noise seed inside).

    Raises:
        ValueError: If two evaluations at the same point disagree.
    """
    plist = trainable(params)
    loss = loss_fn()
    again = loss_fn()
    if not torch.equal(loss.detach(), again.detach()):
        raise ValueError("loss_fn is not deterministic under a fixed seed.")

    grads = torch.autograd.grad(loss, plist, allow_unused=True)
    analytic = np.concatenate([
        (np.zeros(p.numel()) if g is None else to_numpy(g).ravel()) for p, g in zip(plist, grads)
    ])

    numeric: list[float] = []
    with torch.no_grad():
        for p in plist:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2.0 * h))
    return analytic, np.asarray(numeric)


def finite_diff_check(
    loss_fn: Callable[[], Value],
    params: Sequence[nn.Parameter],
    h: float = 1e-5,
) -> float:
    """Max over scalar parameters of |analytic − numeric| / (|numeric| + 1e-8)."""
    analytic, numeric = finite_diff_gradients(loss_fn, params, h)
    err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    worst = float(err.max()) if err.size else 0.0
    logger.debug("finite_diff_check: %d scalars, max rel err %.3e", err.size, worst)
    return worst
