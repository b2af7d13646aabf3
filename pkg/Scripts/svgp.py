"""
Sparse variational GP units with inducing points.

Each unit carries inducing locations Z and an unwhitened q(u) = N(m, L·Lᵀ).
Predictive marginals of q(f) at inputs X are

    mean = m_fn(X) + K_xZ K_ZZ⁻¹ (m − m_fn(Z))
    var  = k(x, x) − k_xZ K_ZZ⁻¹ k_Zx + k_xZ K_ZZ⁻¹ S K_ZZ⁻¹ k_Zx

with K_ZZ⁻¹ applied by Cholesky solves. A ``GpBank`` groups L units and
stacks their marginals column-wise.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
from torch import nn

from Scripts.diffmath import DTYPE, Constraint, Param, Value, as_tensor
from Scripts.gauss import FullGaussian, cholesky_jittered, kl_full
from Scripts.kernels import DeepKernel, FeatureWarp, Kernel, MeanFunction, RbfKernel
from Scripts.quadmoments import safe_sqrt

# Initial scale of the q(u) Cholesky factor.
Q_CHOL_INIT = 1e-2


# ============================================================================
# SINGLE UNIT
# ============================================================================

class SvgpUnit(nn.Module):
    """One sparse GP: kernel, mean function, inducing locations and q(u)."""

    def __init__(
        self,
        kernel: Kernel,
        mean_fn: MeanFunction,
        Z: Param,
        jitter: float = 1e-6,
    ) -> None:
        super().__init__()
        n_ind = Z.shape[0]
        if n_ind < 1:
            raise ValueError("An SVGP unit needs at least one inducing point.")
        self.kernel = kernel
        self.mean_fn = mean_fn
        self.Z = Z
        self.jitter = float(jitter)
        self.q_mean = Param(torch.zeros(n_ind, dtype=DTYPE))
        self.q_chol = Param(Q_CHOL_INIT * torch.eye(n_ind, dtype=DTYPE), Constraint.CHOLESKY)

    @property
    def num_inducing(self) -> int:
        return int(self.Z.shape[0])

    @property
    def qu(self) -> FullGaussian:
        return FullGaussian(self.q_mean.value, self.q_chol.value)

    def prior(self) -> FullGaussian:
        """p(u) = N(m_fn(Z), K_ZZ) with the Cholesky factor of the jittered Gram matrix."""
        Z = self.Z.value
        Lz = cholesky_jittered(self.kernel.k_matrix(Z), self.jitter)
        return FullGaussian(self.mean_fn(Z), Lz)

    def predict_marginals(self, X: Value) -> tuple[Value, Value]:
        """Mean and variance of q(f(x)) for each row of X (variance clamped at 0)."""
        p = self.prior()
        Z = self.Z.value
        Kzx = self.kernel.k_matrix(Z, X, same=False)
        A = torch.linalg.solve_triangular(p.chol, Kzx, upper=False)
        Kinv_Kzx = torch.cholesky_solve(Kzx, p.chol)
        alpha = torch.cholesky_solve((self.q_mean.value - p.mean).unsqueeze(-1), p.chol)
        mean = self.mean_fn(X) + (Kzx * alpha).sum(-2)
        B = self.q_chol.value.transpose(-1, -2) @ Kinv_Kzx
        var = self.kernel.kdiag(X) - (A * A).sum(-2) + (B * B).sum(-2)
        return mean, var.clamp_min(0.0)

    def kl_inducing(self) -> Value:
        """KL(q(u) || p(u))."""
        return kl_full(self.qu, self.prior())

    def sample_marginals(self, X: Value, noise: Value) -> Value:
        """mean + √var ⊙ noise; ``noise`` broadcasts against the n rows of X."""
        mean, var = self.predict_marginals(X)
        if noise.shape[-1] != mean.shape[-1]:
            raise ValueError(f"noise has {noise.shape[-1]} entries, expected {mean.shape[-1]}.")
        return mean + safe_sqrt(var) * noise

    @torch.no_grad()
    def set_to_prior(self) -> None:
        """Set q(u) equal to p(u)."""
        p = self.prior()
        self.q_mean.assign(p.mean)
        self.q_chol.assign(p.chol)


# ============================================================================
# BANK OF UNITS
# ============================================================================

class GpBank(nn.Module):
    """L units evaluated at the same inputs; marginals stacked as (n, L)."""

    def __init__(self, units: Sequence[SvgpUnit], share_Z: bool) -> None:
        super().__init__()
        if not units:
            raise ValueError("A GP bank needs at least one unit.")
        self.units = nn.ModuleList(units)
        self.share_Z = bool(share_Z)
        if self.share_Z and any(u.Z is not units[0].Z for u in units):
            raise ValueError("share_Z requires every unit to reference the same Z.")

    def __len__(self) -> int:
        return len(self.units)

    @property
    def input_dim(self) -> int:
        return int(self.units[0].Z.shape[-1])

    def predict_marginals(self, X: Value) -> tuple[Value, Value]:
        means, vars_ = zip(*(u.predict_marginals(X) for u in self.units))
        return torch.stack(means, -1), torch.stack(vars_, -1)

    def sample_marginals(self, X: Value, noise: Value) -> Value:
        """Draws of shape noise.shape, with noise of shape (..., n, L)."""
        mean, var = self.predict_marginals(X)
        return mean + safe_sqrt(var) * noise

    def kl(self) -> Value:
        return torch.stack([u.kl_inducing() for u in self.units]).sum()


def build_bank(
    n_units: int,
    Z_init: Value | Sequence[Value],
    *,
    ard: bool = True,
    mean_kind: str = "zero",
    share_Z: bool = True,
    shared_kernel: bool = False,
    diagonal_noise: Optional[float] = None,
    deep_kernel: bool = False,
    jitter: float = 1e-6,
    train_inducing: bool = True,
    generator: Optional[torch.Generator] = None,
) -> GpBank:
    """Assemble a bank of ``n_units`` SVGP units.

    Args:
        n_units:        Number of GPs in the bank.
        Z_init:         Initial inducing locations (one tensor when shared,
                        else one tensor per unit).
        ard:            Per-dimension lengthscales.
        mean_kind:      ``"zero"`` or ``"constant"``.
        share_Z:        All units reference one Z.
        shared_kernel:  All units reference one kernel (GPRN mixing bank).
        diagonal_noise: Initial white-noise variance on k(X, X), if any.
        deep_kernel:    Wrap every kernel around one shared input warp.
        jitter:         Base Cholesky jitter.
        train_inducing: Whether Z is optimised.
        generator:      Random stream for the warp network weights.

    Returns:
        The assembled :class:`GpBank`.
    """
    if share_Z:
        Z0 = as_tensor(Z_init)
        shared = Param(Z0, trainable=train_inducing)
        Zs = [shared] * n_units
    else:
        inits = list(Z_init) if not isinstance(Z_init, torch.Tensor) else [Z_init] * n_units
        if len(inits) != n_units:
            raise ValueError(f"Expected {n_units} inducing initialisations, got {len(inits)}.")
        Zs = [Param(as_tensor(z), trainable=train_inducing) for z in inits]
    input_dim = int(Zs[0].shape[-1])

    warp = None
    if deep_kernel:
        if generator is None:
            raise ValueError("deep_kernel needs a generator for the warp network.")
        warp = FeatureWarp(input_dim, generator)

    def new_kernel() -> Kernel:
        base = RbfKernel(input_dim, ard=ard, diagonal_noise=diagonal_noise)
        return DeepKernel(base, warp) if warp is not None else base

    common = new_kernel() if shared_kernel else None
    units = [
        SvgpUnit(common if common is not None else new_kernel(), MeanFunction(mean_kind), Zs[i], jitter)
        for i in range(n_units)
    ]
    return GpBank(units, share_Z=share_Z)
