"""
Covariance and mean functions for the sparse GP units.

  * RbfKernel   : s²·exp(−½ Σ_d (x_d − x'_d)²/ℓ_d²), ARD or shared lengthscale,
                  optional diagonal noise on k(X, X)
  * FeatureWarp : input warp (1 − blend)·X + blend·net(X), blend = sigmoid(ρ)
  * DeepKernel  : RbfKernel applied to warped inputs
  * MeanFunction: zero or trainable constant
"""

from __future__ import annotations

from typing import Optional

import torch
from torch import nn

from Scripts.diffmath import DTYPE, Constraint, Param, Value, make_mlp

# Hidden widths of the warp network.
WARP_HIDDEN: tuple[int, int] = (50, 50)

# Initial warp logit; sigmoid(−4) ≈ 0.018 keeps the warp close to the identity.
WARP_LOGIT_INIT = -4.0


def _check_input(X: Value, input_dim: int, what: str) -> None:
    if X.shape[-1] != input_dim:
        raise ValueError(f"{what}: expected inputs with {input_dim} columns, got {X.shape[-1]}.")


# ============================================================================
# RBF
# ============================================================================

class RbfKernel(nn.Module):
    """Squared-exponential kernel.

    Args:
        input_dim:      Number of input columns.
        ard:            One lengthscale per column (else a single shared one).
        lengthscale:    Initial lengthscale(s).
        signal_variance: Initial s².
        diagonal_noise: Initial white-noise variance on k(X, X); ``None`` for none.
    """

    def __init__(
        self,
        input_dim: int,
        ard: bool = True,
        lengthscale: float = 1.0,
        signal_variance: float = 1.0,
        diagonal_noise: Optional[float] = None,
    ) -> None:
        super().__init__()
        self.input_dim = int(input_dim)
        self.ard = bool(ard)
        n_ls = self.input_dim if self.ard else 1
        self.signal_variance = Param(torch.tensor(signal_variance, dtype=DTYPE), Constraint.POSITIVE)
        self.lengthscales = Param(torch.full((n_ls,), lengthscale, dtype=DTYPE), Constraint.POSITIVE)
        self.diagonal_noise = (
            Param(torch.tensor(diagonal_noise, dtype=DTYPE), Constraint.POSITIVE)
            if diagonal_noise is not None
            else None
        )

    def noise_variance(self) -> Value:
        if self.diagonal_noise is None:
            return torch.zeros((), dtype=DTYPE)
        return self.diagonal_noise.value

    def k_matrix(self, X: Value, X2: Optional[Value] = None, same: Optional[bool] = None) -> Value:
        """Gram matrix k(X, X2); the diagonal noise is added when X2 is X.

        ``same`` overrides the identity test (used by warped inputs).
        """
        _check_input(X, self.input_dim, "RbfKernel")
        if same is None:
            same = X2 is None or X2 is X
        X2 = X if X2 is None else X2
        _check_input(X2, self.input_dim, "RbfKernel")
        ls = self.lengthscales.value
        diff = (X.unsqueeze(-2) - X2.unsqueeze(-3)) / ls
        K = self.signal_variance.value * torch.exp(-0.5 * (diff * diff).sum(-1))
        if same and self.diagonal_noise is not None:
            K = K + self.noise_variance() * torch.eye(K.shape[-1], dtype=DTYPE)
        return K

    def kdiag(self, X: Value) -> Value:
        """Diagonal of k(X, X), noise included."""
        _check_input(X, self.input_dim, "RbfKernel")
        return (self.signal_variance.value + self.noise_variance()).expand(X.shape[:-1])

    def forward(self, X: Value, X2: Optional[Value] = None) -> Value:
        return self.k_matrix(X, X2)


# ============================================================================
# DEEP KERNEL
# ============================================================================

class FeatureWarp(nn.Module):
    """(1 − blend)·X + blend·net(X) with a 2×50 tanh network and blend = sigmoid(ρ)."""

    def __init__(self, input_dim: int, generator: torch.Generator, logit: float = WARP_LOGIT_INIT) -> None:
        super().__init__()
        self.input_dim = int(input_dim)
        self.net = make_mlp((self.input_dim, *WARP_HIDDEN, self.input_dim), generator)
        self.logit = Param(torch.tensor(logit, dtype=DTYPE))

    @property
    def blend(self) -> Value:
        return torch.sigmoid(self.logit.value)

    def forward(self, X: Value) -> Value:
        _check_input(X, self.input_dim, "FeatureWarp")
        b = self.blend
        return (1.0 - b) * X + b * self.net(X)


def deep_warp(warp: FeatureWarp, X: Value) -> Value:
    return warp(X)


class DeepKernel(nn.Module):
    """An RBF kernel evaluated on warped inputs; the warp may be shared."""

    def __init__(self, base: RbfKernel, warp: FeatureWarp) -> None:
        super().__init__()
        if base.input_dim != warp.input_dim:
            raise ValueError(
                f"DeepKernel: warp output dim {warp.input_dim} does not match kernel dim {base.input_dim}."
            )
        self.base = base
        self.warp = warp

    @property
    def input_dim(self) -> int:
        return self.base.input_dim

    def k_matrix(self, X: Value, X2: Optional[Value] = None, same: Optional[bool] = None) -> Value:
        if same is None:
            same = X2 is None or X2 is X
        Xw = self.warp(X)
        X2w = Xw if (X2 is None or X2 is X) else self.warp(X2)
        return self.base.k_matrix(Xw, X2w, same=same)

    def kdiag(self, X: Value) -> Value:
        _check_input(X, self.input_dim, "DeepKernel")
        return self.base.kdiag(X)

    def forward(self, X: Value, X2: Optional[Value] = None) -> Value:
        return self.k_matrix(X, X2)


Kernel = RbfKernel | DeepKernel


# ============================================================================
# MEAN FUNCTIONS
# ============================================================================

class MeanFunction(nn.Module):
    """Zero mean, or a trainable constant c (initialised at 0)."""

    def __init__(self, kind: str = "zero", value: float = 0.0) -> None:
        super().__init__()
        if kind not in ("zero", "constant"):
            raise ValueError(f"Unknown mean function '{kind}' (use 'zero' or 'constant').")
        self.kind = kind
        self.constant = Param(torch.tensor(value, dtype=DTYPE)) if kind == "constant" else None

    def forward(self, X: Value) -> Value:
        shape = X.shape[:-1]
        if self.constant is None:
            return torch.zeros(shape, dtype=DTYPE)
        return self.constant.value.expand(shape)
