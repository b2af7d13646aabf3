"""
Gauss-Hermite quadrature and Gaussian moments of activation functions.

For x ~ N(μ, σ²) and σ(·) ∈ {relu, leaky relu, erf, shifted erf}:

  * act_mean          : E[σ(x)] in closed form
  * act_poly_erf_mean : E[x·erf(x)] and E[x²·erf(x)] in closed form
  * act_second_moment : E[σ(x)²] in closed form (Owen's T for the erf family)
  * act_cross_moment  : E[σ(x₁)σ(x₂)] for a bivariate normal, with the inner
                        integral done analytically and the outer one by
                        Gauss-Hermite (smooth activations) or piecewise
                        Gauss-Legendre split at the kinks (relu family)
  * activation_moments: batched mean vector and covariance matrix of σ
                        applied to a multivariate normal

All functions broadcast over tensors and are differentiable in (μ, σ).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import NamedTuple

import numpy as np
import torch
from scipy.special import roots_hermite

from Scripts.core.models import ActivationKind
from Scripts.diffmath import DTYPE, Value, as_tensor

_SQRT2 = math.sqrt(2.0)
_SQRTPI = math.sqrt(math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Correlations are kept strictly inside (-1, 1).
RHO_CLAMP = 1.0 - 1e-9

# numpy's Hermite recurrence loses the weights past this order.
_NUMPY_GH_MAX_ORDER = 150

# Standard-normal range covered by the piecewise outer integral.
_Z_RANGE = 10.0

# Gauss-Legendre nodes for Owen's T on [0, 1].
_OWEN_ORDER = 64


# ── Types ─────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite nodes and weights for the weight function e^{−x²}."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def order(self) -> int:
        return int(self.nodes.shape[0])

    @cached_property
    def _tensors(self) -> tuple[Value, Value]:
        return torch.tensor(self.nodes, dtype=DTYPE), torch.tensor(self.weights, dtype=DTYPE)

    def tensors(self) -> tuple[Value, Value]:
        return self._tensors


@dataclass(frozen=True)
class Activation:
    """A point-wise non-linearity; ``slope`` is only used by leaky relu."""

    kind: ActivationKind
    slope: float = 0.35

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ActivationKind(self.kind))
        if self.kind is ActivationKind.LEAKY and not 0.0 < self.slope < 1.0:
            raise ValueError(f"Leaky relu slope must lie in (0, 1), got {self.slope}.")

    def __call__(self, x: Value) -> Value:
        if self.kind is ActivationKind.RELU:
            return torch.clamp_min(x, 0.0)
        if self.kind is ActivationKind.LEAKY:
            return torch.where(x > 0, x, self.slope * x)
        if self.kind is ActivationKind.ERF:
            return torch.erf(x)
        return torch.erf(x) + 1.0


class GaussianScalar(NamedTuple):
    mu: Value
    sigma: Value


# ============================================================================
# QUADRATURE RULE
# ============================================================================

@lru_cache(maxsize=16)
def gh_rule(order: int) -> QuadratureRule:
    """Gauss-Hermite rule exact for polynomials up to degree 2·order − 1.

    Raises:
        ValueError: If ``order`` < 1.
    """
    if order < 1:
        raise ValueError(f"Quadrature order must be ≥ 1, got {order}.")
    if order <= _NUMPY_GH_MAX_ORDER:
        nodes, weights = np.polynomial.hermite.hermgauss(order)
    else:
        nodes, weights = roots_hermite(order)
    # Outermost weights underflow for large orders and carry no mass.
    keep = np.isfinite(weights) & (weights > 0.0)
    nodes, weights = nodes[keep], weights[keep]
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(nodes=nodes, weights=weights)


def gaussian_expectation(fn, mu: Value, sigma: Value, rule: QuadratureRule) -> Value:
    """E[fn(x)] for x ~ N(μ, σ²) by the change of variables x = μ + √2·σ·t."""
    nodes, weights = rule.tensors()
    mu, sigma = torch.broadcast_tensors(as_tensor(mu), as_tensor(sigma))
    x = mu.unsqueeze(-1) + _SQRT2 * sigma.unsqueeze(-1) * nodes
    return (fn(x) * weights).sum(-1) / _SQRTPI


# ============================================================================
# HELPERS
# ============================================================================

def norm_cdf(z: Value) -> Value:
    return 0.5 * (1.0 + torch.erf(z / _SQRT2))


def norm_pdf(z: Value) -> Value:
    return _INV_SQRT_2PI * torch.exp(-0.5 * z * z)


def safe_sqrt(v: Value) -> Value:
    """√max(v, 0) with a zero (not infinite) gradient at 0."""
    pos = v > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, v, torch.ones_like(v))), torch.zeros_like(v))


def _standardised(mu: Value, sigma: Value) -> tuple[Value, Value, Value]:
    """(z, σ_safe, is_degenerate) for the σ = 0 limit."""
    degenerate = sigma <= 0
    sig = torch.where(degenerate, torch.ones_like(sigma), sigma)
    return mu / sig, sig, degenerate


def _relu_moments(mu: Value, sigma: Value) -> tuple[Value, Value]:
    z, sig, degenerate = _standardised(mu, sigma)
    cdf, pdf = norm_cdf(z), norm_pdf(z)
    first = mu * cdf + sig * pdf
    second = (mu * mu + sig * sig) * cdf + mu * sig * pdf
    point = torch.clamp_min(mu, 0.0)
    return torch.where(degenerate, point, first), torch.where(degenerate, point * point, second)


@lru_cache(maxsize=1)
def _owen_rule() -> tuple[Value, Value]:
    nodes, weights = np.polynomial.legendre.leggauss(_OWEN_ORDER)
    return torch.tensor(0.5 * (nodes + 1.0), dtype=DTYPE), torch.tensor(0.5 * weights, dtype=DTYPE)


def owens_t(h: Value, a: Value) -> Value:
    """Owen's T(h, a) = (1/2π)∫₀ᵃ exp(−h²(1+x²)/2)/(1+x²) dx for 0 ≤ a ≤ 1.

    The integrand is analytic on the interval, so a fixed Gauss-Legendre rule
    reaches double precision.
    """
    t, w = _owen_rule()
    x = a.unsqueeze(-1) * t
    q = 1.0 + x * x
    integrand = torch.exp(-0.5 * (h * h).unsqueeze(-1) * q) / q
    return a * (integrand * w).sum(-1) / (2.0 * math.pi)


def _erf_second_moment(mu: Value, sigma: Value) -> Value:
    # E[erf(x)²] = 1 − 8·T(√2μ/√(1+2σ²), 1/√(1+4σ²))
    s2 = sigma * sigma
    h = _SQRT2 * mu / torch.sqrt(1.0 + 2.0 * s2)
    a = 1.0 / torch.sqrt(1.0 + 4.0 * s2)
    return 1.0 - 8.0 * owens_t(h, a)


# ============================================================================
# MOMENTS
# ============================================================================

def act_mean(act: Activation, mu: Value, sigma: Value) -> Value:
    """E[σ(x)] for x ~ N(μ, σ²), closed form for every activation."""
    mu, sigma = torch.broadcast_tensors(as_tensor(mu), as_tensor(sigma))
    if act.kind is ActivationKind.RELU:
        return _relu_moments(mu, sigma)[0]
    if act.kind is ActivationKind.LEAKY:
        eps = act.slope
        return eps * mu + (1.0 - eps) * _relu_moments(mu, sigma)[0]
    mean = torch.erf(mu / torch.sqrt(1.0 + 2.0 * sigma * sigma))
    return mean + 1.0 if act.kind is ActivationKind.SHERF else mean


def act_poly_erf_mean(degree: int, mu: Value, sigma: Value) -> Value:
    """E[xⁿ·erf(x)] for n ∈ {1, 2}, x ~ N(μ, σ²).

    Raises:
        ValueError: For any other degree.
    """
    mu, sigma = torch.broadcast_tensors(as_tensor(mu), as_tensor(sigma))
    s2 = 1.0 + 2.0 * sigma * sigma
    s = torch.sqrt(s2)
    gauss = torch.exp(-mu * mu / s2)
    erf_mean = torch.erf(mu / s)
    first = mu * erf_mean + 2.0 * sigma * sigma * gauss / (_SQRTPI * s)
    if degree == 1:
        return first
    if degree == 2:
        return mu * first + sigma * sigma * (erf_mean + 2.0 * mu * gauss / (_SQRTPI * s * s2))
    raise ValueError(f"Only degrees 1 and 2 are supported, got {degree}.")


def act_second_moment(act: Activation, mu: Value, sigma: Value, rule: QuadratureRule) -> Value:
    """E[σ(x)²] for x ~ N(μ, σ²).

    Raises:
        ValueError: If the quadrature order is below 2.
    """
    if rule.order < 2:
        raise ValueError("act_second_moment needs a quadrature rule of order ≥ 2.")
    mu, sigma = torch.broadcast_tensors(as_tensor(mu), as_tensor(sigma))
    if act.kind is ActivationKind.RELU:
        return _relu_moments(mu, sigma)[1]
    if act.kind is ActivationKind.LEAKY:
        eps = act.slope
        relu_sq = _relu_moments(mu, sigma)[1]
        return eps * eps * (mu * mu + sigma * sigma) + (1.0 - eps * eps) * relu_sq
    second = _erf_second_moment(mu, sigma)
    if act.kind is ActivationKind.SHERF:
        return second + 2.0 * act_mean(Activation(ActivationKind.ERF), mu, sigma) + 1.0
    return second


def act_cross_moment(
    act: Activation,
    mu2: Value,
    cov2: Value,
    rule: QuadratureRule,
) -> Value:
    """E[σ(x₁)σ(x₂)] for (x₁, x₂) ~ N(mu2, cov2).

    Raises:
        ValueError: If ``cov2`` is not a symmetric PSD 2×2 matrix.
    """
    mu2, cov2 = as_tensor(mu2), as_tensor(cov2)
    if cov2.shape[-2:] != (2, 2):
        raise ValueError(f"cov2 must be 2×2, got {tuple(cov2.shape)}.")
    v1, v2, c12 = cov2[..., 0, 0], cov2[..., 1, 1], cov2[..., 0, 1]
    if (v1 < 0).any() or (v2 < 0).any() or (c12 * c12 > v1 * v2 * (1.0 + 1e-9) + 1e-12).any():
        raise ValueError("cov2 is not positive semi-definite.")
    s1, s2 = safe_sqrt(v1), safe_sqrt(v2)
    rho = correlation(c12, s1, s2)
    return _cross_from_correlation(act, mu2[..., 0], mu2[..., 1], s1, s2, rho, rule)


def correlation(c12: Value, s1: Value, s2: Value) -> Value:
    """c12 / (s1·s2), zero where either scale vanishes, clamped inside (−1, 1)."""
    denom = s1 * s2
    ok = denom > 0
    rho = torch.where(ok, c12 / torch.where(ok, denom, torch.ones_like(denom)), torch.zeros_like(denom))
    return rho.clamp(-RHO_CLAMP, RHO_CLAMP)


def _cross_from_correlation(
    act: Activation,
    m1: Value,
    m2: Value,
    s1: Value,
    s2: Value,
    rho: Value,
    rule: QuadratureRule,
) -> Value:
    m1, m2, s1, s2, rho = torch.broadcast_tensors(m1, m2, s1, s2, rho)

    # x₁ = m1 + s1·z, x₂ | z ~ N(m2 + s2·ρ·z, s2²(1 − ρ²))
    def integrand(z: Value) -> Value:
        outer = act(m1.unsqueeze(-1) + s1.unsqueeze(-1) * z)
        inner_mu = m2.unsqueeze(-1) + (s2 * rho).unsqueeze(-1) * z
        inner_sigma = (s2 * torch.sqrt(1.0 - rho * rho)).unsqueeze(-1).expand_as(inner_mu)
        return outer * act_mean(act, inner_mu, inner_sigma)

    if act.kind in (ActivationKind.ERF, ActivationKind.SHERF):
        nodes, weights = rule.tensors()
        return (integrand(_SQRT2 * nodes) * weights).sum(-1) / _SQRTPI

    # The outer factor has a kink at z = −m1/s1 and the inner mean bends
    # sharply near z = −m2/(s2·ρ) as |ρ| → 1: integrate piece by piece.
    t, w = _legendre_rule(rule.order)
    edges = torch.stack(
        [
            torch.full_like(m1, -_Z_RANGE),
            _kink(m1, s1),
            _kink(m2, s2 * rho),
            torch.full_like(m1, _Z_RANGE),
        ],
        dim=-1,
    ).sort(dim=-1).values
    total = torch.zeros_like(m1)
    for piece in range(3):
        lo, hi = edges[..., piece].unsqueeze(-1), edges[..., piece + 1].unsqueeze(-1)
        half = 0.5 * (hi - lo)
        z = lo + half * (t + 1.0)
        total = total + (integrand(z) * norm_pdf(z) * half * w).sum(-1)
    return total


@lru_cache(maxsize=8)
def _legendre_rule(order: int) -> tuple[Value, Value]:
    nodes, weights = np.polynomial.legendre.leggauss(order)
    return torch.tensor(nodes, dtype=DTYPE), torch.tensor(weights, dtype=DTYPE)


def _kink(offset: Value, scale: Value) -> Value:
    """Root of offset + scale·z, or the range edge when it falls outside [−_Z_RANGE, _Z_RANGE]."""
    inside = scale.abs() * _Z_RANGE > offset.abs()
    root = -offset / torch.where(inside, scale, torch.ones_like(scale))
    return torch.where(inside, root, torch.full_like(root, _Z_RANGE))


def linear_gaussian_closure(b: Value, means: Value, variances: Value) -> GaussianScalar:
    """Distribution of Σ bᵢxᵢ for independent xᵢ ~ N(meansᵢ, variancesᵢ).

    Raises:
        ValueError: If the three vectors differ in length.
    """
    b, means, variances = as_tensor(b), as_tensor(means), as_tensor(variances)
    if not (b.shape[-1] == means.shape[-1] == variances.shape[-1]):
        raise ValueError(
            f"Length mismatch: {b.shape[-1]}, {means.shape[-1]}, {variances.shape[-1]}."
        )
    mu = (b * means).sum(-1)
    var = (b * b * variances).sum(-1)
    return GaussianScalar(mu, safe_sqrt(var))


# ============================================================================
# BATCHED MOMENTS OF A HIDDEN LAYER
# ============================================================================

def activation_moments(
    act: Activation,
    mean: Value,
    cov: Value,
    rule: QuadratureRule,
) -> tuple[Value, Value]:
    """Mean vector and covariance matrix of σ(a) for a ~ N(mean, cov).

    Args:
        act:  Activation applied element-wise.
        mean: Pre-activation means, shape (..., H).
        cov:  Pre-activation covariances, shape (..., H, H).
        rule: Quadrature rule for second and cross moments.

    Returns:
        (m_sigma of shape (..., H), v_sigma of shape (..., H, H)).
    """
    H = mean.shape[-1]
    var = torch.diagonal(cov, dim1=-2, dim2=-1)
    sd = safe_sqrt(var)
    m_sigma = act_mean(act, mean, sd)
    second = act_second_moment(act, mean, sd, rule)
    diag = torch.clamp_min(second - m_sigma * m_sigma, 0.0)
    if H == 1:
        return m_sigma, diag.unsqueeze(-1)

    i, j = torch.triu_indices(H, H, offset=1)
    rho = correlation(cov[..., i, j], sd[..., i], sd[..., j])
    cross = _cross_from_correlation(act, mean[..., i], mean[..., j], sd[..., i], sd[..., j], rho, rule)
    off = cross - m_sigma[..., i] * m_sigma[..., j]

    v_sigma = torch.zeros(*mean.shape, H, dtype=DTYPE)
    v_sigma[..., i, j] = off
    v_sigma[..., j, i] = off
    return m_sigma, v_sigma + torch.diag_embed(diag)

