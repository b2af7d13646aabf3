"""
Likelihood heads: from latent GP values F(x) to Gaussian observation moments.

Every head exposes two paths:

  * ``mean_var(x, f_mean, f_var)``   analytic mean/variance functions given
                                     independent Gaussian marginals of F(x)
  * ``conditional(x, f, generator)`` moments given one draw of F(x); the
                                     mixing matrix M is integrated out
                                     analytically, never sampled

and the expected log likelihood of a diagonal Gaussian noise model is a
closed-form function of those moments (``ell_gaussian_point``).

Heads:
  LinearHead   MOGP / DGP     Φ = M·F with q(M) diagonal Gaussian
  NeuralHead   N-MOGP / N-DGP Φ = M·σ(M̃F + b)
  SbgprnHead   (N-)SBGPRN     Φ = M(x)·F or M(x)·σ(M̃F + b), M(x) a network
  GprnHead     GPRN           Φ = M(x)·F with GP-distributed entries M(x)
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import torch
from torch import nn

from Scripts.diffmath import DTYPE, Constraint, Param, Value, make_mlp, randn
from Scripts.gauss import DiagGaussian, kl_diag, reparam_sample
from Scripts.quadmoments import Activation, QuadratureRule, activation_moments, gh_rule, safe_sqrt
from Scripts.svgp import GpBank

_LOG_2PI = math.log(2.0 * math.pi)

# Initial values
BETA_INIT = 10.0
M0_INIT_SCALE = 0.1
SIGMA_M_INIT = 1e-2
BIAS_SCALE_INIT = 0.1
MIXNET_HIDDEN: tuple[int, int] = (50, 50)


# ============================================================================
# NOISE MODEL AND EXPECTED LOG LIKELIHOOD
# ============================================================================

class NoiseModel(nn.Module):
    """Diagonal Gaussian observation noise with per-output precisions β."""

    def __init__(self, d_y: int, beta: float = BETA_INIT) -> None:
        super().__init__()
        self.beta = Param(torch.full((d_y,), beta, dtype=DTYPE), Constraint.POSITIVE)

    @property
    def precision(self) -> Value:
        return self.beta.value

    @property
    def variance(self) -> Value:
        return 1.0 / self.beta.value


def ell_gaussian_point(
    y: Value,
    m: Value,
    v: Value,
    beta: Value,
    mask: Optional[Value] = None,
) -> Value:
    """Σ over observed k of ½·log(β_k/2π) − (β_k/2)·[(y_k − m_k)² + v_k].

    Works on any leading batch shape; masked entries of ``y`` may hold NaN.

    Raises:
        ValueError: On negative variances or mismatched shapes.
    """
    if y.shape[-1] != m.shape[-1] or v.shape != m.shape:
        raise ValueError(
            f"ell_gaussian_point: shapes y{tuple(y.shape)}, m{tuple(m.shape)}, v{tuple(v.shape)} do not match."
        )
    if (v < 0).any():
        raise ValueError("ell_gaussian_point: variances must be non-negative.")
    if mask is None:
        mask = torch.ones(y.shape, dtype=torch.bool)
    y_filled = torch.where(mask, y, torch.zeros_like(y))
    term = 0.5 * (torch.log(beta) - _LOG_2PI) - 0.5 * beta * ((y_filled - m) ** 2 + v)
    return torch.where(mask, term, torch.zeros_like(term)).sum(-1)


# ============================================================================
# BUILDING BLOCKS
# ============================================================================

class LinearBayesMix(nn.Module):
    """q(M) = N(M₀, σ_M²) element-wise over a rows×cols matrix, unit-normal prior."""

    def __init__(self, rows: int, cols: int, generator: torch.Generator) -> None:
        super().__init__()
        self.M0 = Param(M0_INIT_SCALE * randn(rows, cols, generator=generator))
        self.sigma_M = Param(torch.full((rows, cols), SIGMA_M_INIT, dtype=DTYPE), Constraint.POSITIVE)

    @property
    def q(self) -> DiagGaussian:
        return DiagGaussian(self.M0.value, self.sigma_M.value)

    def kl(self) -> Value:
        return kl_diag(self.q, DiagGaussian.standard(self.M0.value))


class HiddenLayer(nn.Module):
    """σ(M̃·F + b) with MAP weights M̃ (D_H×L) and q(b) = N(b₀, s_b²)."""

    def __init__(
        self,
        n_hidden: int,
        n_in: int,
        activation: Activation,
        generator: torch.Generator,
    ) -> None:
        super().__init__()
        if n_hidden < 1:
            raise ValueError("A hidden layer needs D_H ≥ 1.")
        bound = 1.0 / math.sqrt(n_in)
        Mt = (torch.rand(n_hidden, n_in, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound
        self.Mtilde = Param(Mt)
        self.bias_mean = Param(torch.zeros(n_hidden, dtype=DTYPE))
        self.bias_scale = Param(torch.full((n_hidden,), BIAS_SCALE_INIT, dtype=DTYPE), Constraint.POSITIVE)
        self.activation = activation

    @property
    def n_hidden(self) -> int:
        return int(self.Mtilde.shape[0])

    @property
    def q_bias(self) -> DiagGaussian:
        return DiagGaussian(self.bias_mean.value, self.bias_scale.value)

    def kl(self) -> Value:
        return kl_diag(self.q_bias, DiagGaussian.standard(self.bias_mean.value))

    def preactivation(self, f_mean: Value, f_var: Value) -> tuple[Value, Value]:
        """Mean (..., D_H) and covariance (..., D_H, D_H) of M̃F + b."""
        Mt = self.Mtilde.value
        mean = f_mean @ Mt.T + self.bias_mean.value
        cov = (Mt * f_var.unsqueeze(-2)) @ Mt.T + torch.diag(self.bias_scale.value ** 2)
        return mean, cov

    def moments(self, f_mean: Value, f_var: Value, rule: QuadratureRule) -> tuple[Value, Value]:
        """Activation mean m^σ and covariance v^σ under the pre-activation Gaussian."""
        mean, cov = self.preactivation(f_mean, f_var)
        return activation_moments(self.activation, mean, cov, rule)

    def sample(self, f: Value, generator: torch.Generator) -> Value:
        """σ(M̃f + b) with one bias draw per row of ``f``."""
        noise = randn(*f.shape[:-1], self.n_hidden, generator=generator)
        b = reparam_sample(self.q_bias, noise)
        return self.activation(f @ self.Mtilde.value.T + b)

    def l2_weights(self) -> Iterator[Value]:
        yield self.Mtilde.value


class MixNet(nn.Module):
    """Deterministic input-dependent mixing matrix M(x) from a 2×50 tanh network."""

    def __init__(self, input_dim: int, rows: int, cols: int, generator: torch.Generator) -> None:
        super().__init__()
        if input_dim < 1:
            raise ValueError("MixNet needs at least one input column.")
        self.rows, self.cols = rows, cols
        self.net = make_mlp((input_dim, *MIXNET_HIDDEN, rows * cols), generator)

    def forward(self, x: Value) -> Value:
        return self.net(x).reshape(*x.shape[:-1], self.rows, self.cols)

    def l2_weights(self) -> Iterator[Value]:
        for layer in self.net:
            if isinstance(layer, nn.Linear):
                yield layer.weight


class GprnMixBank(nn.Module):
    """D_Y·L GP-distributed mixing weights sharing one kernel and one Z."""

    def __init__(self, bank: GpBank, rows: int, cols: int) -> None:
        super().__init__()
        if len(bank) != rows * cols:
            raise ValueError(f"GPRN mixing bank needs {rows * cols} units, got {len(bank)}.")
        self.bank = bank
        self.rows, self.cols = rows, cols

    def marginals(self, x: Value) -> tuple[Value, Value]:
        """Mean and variance of M(x), each of shape (n, D_Y, L)."""
        mean, var = self.bank.predict_marginals(x)
        shape = (*x.shape[:-1], self.rows, self.cols)
        return mean.reshape(shape), var.reshape(shape)

    def kl(self) -> Value:
        return self.bank.kl()


# ============================================================================
# ANALYTIC MEAN / VARIANCE FUNCTIONS
# ============================================================================

def head_mean_var_linear(mix: LinearBayesMix, f_means: Value, f_vars: Value) -> tuple[Value, Value]:
    """Exact moments of M·F for independent Gaussian M and F."""
    M0, s2 = mix.M0.value, mix.sigma_M.value ** 2
    if f_means.shape[-1] != M0.shape[-1]:
        raise ValueError(f"Linear head expects {M0.shape[-1]} latent values, got {f_means.shape[-1]}.")
    m = f_means @ M0.T
    v = f_vars @ (M0 * M0 + s2).T + (f_means * f_means) @ s2.T
    return m, v


def _mix_hidden(mix: LinearBayesMix, m_sigma: Value, v_sigma: Value) -> tuple[Value, Value]:
    M0, s2 = mix.M0.value, mix.sigma_M.value ** 2
    m = m_sigma @ M0.T
    v1 = torch.einsum("kh,...hg,kg->...k", M0, v_sigma, M0)
    v2 = (m_sigma * m_sigma) @ s2.T
    v3 = torch.diagonal(v_sigma, dim1=-2, dim2=-1) @ s2.T
    return m, (v1 + v2 + v3).clamp_min(0.0)


def head_mean_var_neural(
    mix: LinearBayesMix,
    hidden: HiddenLayer,
    f_means: Value,
    f_vars: Value,
    rule: QuadratureRule,
) -> tuple[Value, Value]:
    """Moments of M·σ(M̃F + b): m = M₀m^σ and v = v₁ + v₂ + v₃."""
    m_sigma, v_sigma = hidden.moments(f_means, f_vars, rule)
    return _mix_hidden(mix, m_sigma, v_sigma)


def head_mean_var_sbgprn(
    net: MixNet,
    x: Value,
    f_means: Value,
    f_vars: Value,
    hidden: Optional[HiddenLayer] = None,
    rule: Optional[QuadratureRule] = None,
) -> tuple[Value, Value]:
    """Moments of M(x)·F (SBGPRN) or M(x)·σ(M̃F + b) (N-SBGPRN)."""
    Mx = net(x)
    if hidden is None:
        if f_means.shape[-1] != Mx.shape[-1]:
            raise ValueError(f"SBGPRN head expects {Mx.shape[-1]} latent values, got {f_means.shape[-1]}.")
        m = (Mx @ f_means.unsqueeze(-1)).squeeze(-1)
        v = ((Mx * Mx) @ f_vars.unsqueeze(-1)).squeeze(-1)
        return m, v
    m_sigma, v_sigma = hidden.moments(f_means, f_vars, rule or gh_rule(100))
    m = (Mx @ m_sigma.unsqueeze(-1)).squeeze(-1)
    v = torch.einsum("...kh,...hg,...kg->...k", Mx, v_sigma, Mx)
    return m, v.clamp_min(0.0)


def head_mean_var_gprn(bank: GprnMixBank, f_means: Value, f_vars: Value, x: Value) -> tuple[Value, Value]:
    """Exact moments of Σ_ℓ M_kℓ(x)F_ℓ(x) for independent Gaussian factors."""
    mu_M, var_M = bank.marginals(x)
    mu_F, var_F = f_means.unsqueeze(-2), f_vars.unsqueeze(-2)
    m = (mu_M * mu_F).sum(-1)
    v = (mu_M * mu_M * var_F + mu_F * mu_F * var_M + var_M * var_F).sum(-1)
    return m, v


def l2_penalty(head: "LikelihoodHead") -> Value:
    """λ·Σ w² over M̃ and MixNet weights (biases excluded)."""
    total = torch.zeros((), dtype=DTYPE)
    for w in head.l2_weights():
        total = total + (w * w).sum()
    return head.l2_strength * total


# ============================================================================
# HEADS
# ============================================================================

class LikelihoodHead(nn.Module):
    """Common interface of the four likelihood heads."""

    def __init__(self, l2_strength: float = 1e-4) -> None:
        super().__init__()
        self.l2_strength = float(l2_strength)

    def mean_var(self, x: Value, f_mean: Value, f_var: Value, rule: QuadratureRule) -> tuple[Value, Value]:
        raise NotImplementedError

    def conditional(self, x: Value, f: Value, generator: torch.Generator) -> tuple[Value, Value]:
        raise NotImplementedError

    def kl(self) -> Value:
        return torch.zeros((), dtype=DTYPE)

    def l2_weights(self) -> Iterator[Value]:
        return iter(())


class LinearHead(LikelihoodHead):
    def __init__(self, mix: LinearBayesMix, l2_strength: float = 1e-4) -> None:
        super().__init__(l2_strength)
        self.mix = mix

    def mean_var(self, x, f_mean, f_var, rule):
        return head_mean_var_linear(self.mix, f_mean, f_var)

    def conditional(self, x, f, generator):
        return head_mean_var_linear(self.mix, f, torch.zeros_like(f))

    def kl(self) -> Value:
        return self.mix.kl()


class NeuralHead(LikelihoodHead):
    def __init__(self, mix: LinearBayesMix, hidden: HiddenLayer, l2_strength: float = 1e-4) -> None:
        super().__init__(l2_strength)
        self.mix = mix
        self.hidden = hidden

    def mean_var(self, x, f_mean, f_var, rule):
        return head_mean_var_neural(self.mix, self.hidden, f_mean, f_var, rule)

    def conditional(self, x, f, generator):
        h = self.hidden.sample(f, generator)
        M0, s2 = self.mix.M0.value, self.mix.sigma_M.value ** 2
        return h @ M0.T, (h * h) @ s2.T

    def kl(self) -> Value:
        return self.mix.kl() + self.hidden.kl()

    def l2_weights(self) -> Iterator[Value]:
        return self.hidden.l2_weights()


class SbgprnHead(LikelihoodHead):
    def __init__(self, net: MixNet, hidden: Optional[HiddenLayer] = None, l2_strength: float = 1e-4) -> None:
        super().__init__(l2_strength)
        self.net = net
        self.hidden = hidden

    def mean_var(self, x, f_mean, f_var, rule):
        return head_mean_var_sbgprn(self.net, x, f_mean, f_var, self.hidden, rule)

    def conditional(self, x, f, generator):
        h = f if self.hidden is None else self.hidden.sample(f, generator)
        m = (self.net(x) @ h.unsqueeze(-1)).squeeze(-1)
        return m, torch.zeros_like(m)

    def kl(self) -> Value:
        return self.hidden.kl() if self.hidden is not None else torch.zeros((), dtype=DTYPE)

    def l2_weights(self) -> Iterator[Value]:
        yield from self.net.l2_weights()
        if self.hidden is not None:
            yield from self.hidden.l2_weights()


class GprnHead(LikelihoodHead):
    def __init__(self, mixbank: GprnMixBank, l2_strength: float = 1e-4) -> None:
        super().__init__(l2_strength)
        self.mixbank = mixbank

    def mean_var(self, x, f_mean, f_var, rule):
        return head_mean_var_gprn(self.mixbank, f_mean, f_var, x)

    def conditional(self, x, f, generator):
        mu_M, var_M = self.mixbank.marginals(x)
        noise = randn(*f.shape[:-1], *mu_M.shape[-2:], generator=generator)
        M = mu_M + safe_sqrt(var_M) * noise
        m = (M @ f.unsqueeze(-1)).squeeze(-1)
        return m, torch.zeros_like(m)

    def kl(self) -> Value:
        return self.mixbank.kl()


def head_sample(
    head: LikelihoodHead,
    x: Value,
    f_sample: Value,
    generator: torch.Generator,
) -> tuple[Value, Value]:
    """Observation moments given one draw of F(x) (SGVB path)."""
    return head.conditional(x, f_sample, generator)
