"""
Model assembly and evidence lower bounds.

``build`` turns a resolved :class:`ModelSpec` into a :class:`Model` holding

  * ``layer1``  : bank of L latent GPs on the inputs (observed or latent)
  * ``layer2``  : bank of L′ GPs on layer-1 draws (DGP variants only)
  * ``head``    : likelihood head mapping latent values to observation moments
  * ``noise``   : diagonal Gaussian noise model
  * ``latents`` : per-datapoint q(xᵢ) (latent-input variants only)

``elbo_minibatch`` evaluates

    (N/|B|)·Σ_B ELL(i) − kl_scale·[Σ KL(q(u)) + KL(q(M)) + KL(q(b))
                                   + (N/|B|)·Σ_B KL(q(xᵢ))] − L2

with the ELL computed by SGVB or analytically according to ``ModelSpec.ell_mode``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from Scripts.core.errors import ConfigError
from Scripts.core.logging_config import get_logger
from Scripts.core.models import EllMode, ModelSpec, Variant
from Scripts.diffmath import (
    DTYPE,
    AdamState,
    Constraint,
    Param,
    Value,
    adam_step,
    as_tensor,
    backward,
    make_generator,
    randn,
    to_numpy,
)
from Scripts.gauss import DiagGaussian, kl_diag, kmeans, reparam_sample
from Scripts.likelihoods import (
    GprnHead,
    GprnMixBank,
    HiddenLayer,
    LikelihoodHead,
    LinearBayesMix,
    LinearHead,
    MixNet,
    NeuralHead,
    NoiseModel,
    SbgprnHead,
    ell_gaussian_point,
    l2_penalty,
)
from Scripts.quadmoments import Activation, gh_rule
from Scripts.svgp import GpBank, build_bank

logger = get_logger(__name__)

# Initial white-noise variance on the GPRN latent-function kernels.
GPRN_LATENT_NOISE = 1e-2

# Initial scale of q(xᵢ) for latent inputs.
LATENT_SCALE_INIT = 0.1

# Rows evaluated at once by predict().
PREDICT_CHUNK = 1000


# ============================================================================
# DATA CARRIER
# ============================================================================

@dataclass
class TensorData:
    """Training tensors: X (N×D_X, possibly D_X = 0), Y (N×D_Y, NaN where masked), mask."""

    X: Value
    Y: Value
    mask: Value

    @classmethod
    def from_arrays(cls, X: np.ndarray, Y: np.ndarray, mask: Optional[np.ndarray] = None) -> "TensorData":
        Y = np.asarray(Y, dtype=np.float64)
        if mask is None:
            mask = ~np.isnan(Y)
        return cls(as_tensor(X), as_tensor(Y), torch.as_tensor(np.asarray(mask, dtype=bool)))

    @property
    def n(self) -> int:
        return int(self.Y.shape[0])


# ============================================================================
# LATENT INPUTS
# ============================================================================

class LatentInputs(nn.Module):
    """Factorised q(X) = Πᵢ N(xᵢ | μᵢ, diag sᵢ²) with a unit-normal prior."""

    def __init__(self, means: Value, scale: float = LATENT_SCALE_INIT) -> None:
        super().__init__()
        means = as_tensor(means)
        self.mean = Param(means)
        self.scale = Param(torch.full_like(means, scale), Constraint.POSITIVE)

    def __len__(self) -> int:
        return int(self.mean.shape[0])

    @property
    def dim(self) -> int:
        return int(self.mean.shape[1])

    def q(self, idx: Optional[Value] = None) -> DiagGaussian:
        m, s = self.mean.value, self.scale.value
        if idx is not None:
            m, s = m[idx], s[idx]
        return DiagGaussian(m, s)

    def kl(self, idx: Optional[Value] = None) -> Value:
        q = self.q(idx)
        return kl_diag(q, DiagGaussian.standard(q.mean))

    def sample(self, idx: Optional[Value], generator: torch.Generator) -> Value:
        q = self.q(idx)
        return reparam_sample(q, randn(*q.mean.shape, generator=generator))


def pca_latent_means(Y: np.ndarray, dim: int, seed: int = 0) -> np.ndarray:
    """Principal-component scores of zero-filled Y, scaled to unit variance per component."""
    Yf = np.nan_to_num(np.asarray(Y, dtype=np.float64), nan=0.0)
    Yc = Yf - Yf.mean(axis=0)
    U, S, _ = np.linalg.svd(Yc, full_matrices=False)
    k = min(dim, S.shape[0])
    scores = U[:, :k] * S[:k]
    std = scores.std(axis=0)
    scores = scores / np.where(std > 0, std, 1.0)
    if k < dim:
        rng = np.random.default_rng(seed)
        pad = 0.1 * rng.standard_normal((Yf.shape[0], dim - k))
        scores = np.hstack([scores, pad])
    return scores


# ============================================================================
# MODEL
# ============================================================================

@dataclass
class ElboTerms:
    """Components of one minibatch ELBO estimate."""

    ell: Value          # rescaled (N/|B|)·Σ ELL
    ell_mean: Value     # per-datapoint average ELL over the batch
    kl: Value           # annealed KL, including rescaled latent KL
    l2: Value
    elbo: Value


class Model(nn.Module):
    """An assembled model variant; see the module docstring for its parts."""

    def __init__(
        self,
        spec: ModelSpec,
        layer1: GpBank,
        head: LikelihoodHead,
        noise: NoiseModel,
        n_data: int,
        layer2: Optional[GpBank] = None,
        latents: Optional[LatentInputs] = None,
    ) -> None:
        super().__init__()
        self.spec = spec
        self.layer1 = layer1
        self.layer2 = layer2
        self.head = head
        self.noise = noise
        self.latents = latents
        self.n_data = int(n_data)
        self.rule = gh_rule(spec.quad_order)

    @property
    def variant(self) -> Variant:
        return self.spec.variant

    @property
    def ell_mode(self) -> EllMode:
        return self.spec.ell_mode or EllMode.SGVB

    def trainable_parameters(self, include_latents: bool = True) -> list[nn.Parameter]:
        params = [p for name, p in self.named_parameters() if include_latents or not name.startswith("latents.")]
        return [p for p in params if p.requires_grad]

    # ── Forward passes ────────────────────────────────────────────────────────

    def dgp_forward_sample(self, X: Value, generator: torch.Generator, n_samples: int = 1) -> Value:
        """Layer-2 draws of shape (S, n, L′) through sampled layer-1 values."""
        if self.layer2 is None:
            raise ConfigError(f"dgp_forward_sample needs a DGP variant, got {self.variant.value}.")
        n, L = X.shape[0], len(self.layer1)
        f1 = self.layer1.sample_marginals(X, randn(n_samples, n, L, generator=generator))
        flat = f1.reshape(n_samples * n, L)
        f2 = self.layer2.sample_marginals(flat, randn(n_samples * n, len(self.layer2), generator=generator))
        return f2.reshape(n_samples, n, len(self.layer2))

    def ell_analytic(self, X: Value, Y: Value, mask: Value) -> Value:
        """Per-point analytic ELL, shape (n,)."""
        if self.layer2 is not None:
            raise ConfigError(f"{self.variant.value} has no analytic expected log likelihood.")
        f_mean, f_var = self.layer1.predict_marginals(X)
        m, v = self.head.mean_var(X, f_mean, f_var, self.rule)
        return ell_gaussian_point(Y, m, v, self.noise.precision, mask)

    def sample_conditional(
        self,
        X: Optional[Value],
        generator: torch.Generator,
        n_samples: int,
        latents: Optional[LatentInputs] = None,
    ) -> tuple[Value, Value]:
        """Observation moments (S, n, D_Y) given ``n_samples`` draws of the latent functions.

        With ``latents`` the inputs themselves are drawn from q(X) once per sample.
        """
        if latents is not None:
            q = latents.q()
            n = q.mean.shape[0]
            X = reparam_sample(q, randn(n_samples, *q.mean.shape, generator=generator))
            flat = X.reshape(n_samples * n, -1)
            f = self.layer1.sample_marginals(flat, randn(n_samples * n, len(self.layer1), generator=generator))
            f = f.reshape(n_samples, n, len(self.layer1))
        elif self.layer2 is not None:
            f = self.dgp_forward_sample(X, generator, n_samples)
        else:
            noise = randn(n_samples, X.shape[0], len(self.layer1), generator=generator)
            f = self.layer1.sample_marginals(X, noise)
        return self.head.conditional(X, f, generator)

    def ell_sgvb(self, X: Value, Y: Value, mask: Value, generator: torch.Generator, n_samples: int) -> Value:
        """Per-point Monte-Carlo ELL averaged over ``n_samples`` draws of F, shape (n,)."""
        m, v = self.sample_conditional(X, generator, n_samples)
        return ell_gaussian_point(Y, m, v, self.noise.precision, mask).mean(0)

    def ell(self, X: Value, Y: Value, mask: Value, generator: torch.Generator) -> Value:
        if self.ell_mode is EllMode.ANALYTIC:
            return self.ell_analytic(X, Y, mask)
        return self.ell_sgvb(X, Y, mask, generator, self.spec.n_samples or 1)

    def kl_global(self) -> Value:
        kl = self.layer1.kl() + self.head.kl()
        if self.layer2 is not None:
            kl = kl + self.layer2.kl()
        return kl

    # ── Prediction ────────────────────────────────────────────────────────────

    @torch.no_grad()
    def predict(self, X: Value, n_mc: int = 200, seed: int = 0) -> tuple[Value, Value]:
        """Predictive mean and variance (noise 1/β included) for each row of X."""
        X = as_tensor(X)
        generator = make_generator(seed)
        means, variances = [], []
        for start in range(0, X.shape[0], PREDICT_CHUNK):
            Xc = X[start:start + PREDICT_CHUNK]
            if self.layer2 is None:
                f_mean, f_var = self.layer1.predict_marginals(Xc)
                m, v = self.head.mean_var(Xc, f_mean, f_var, self.rule)
            else:
                f2 = self.dgp_forward_sample(Xc, generator, n_mc)
                ms, vs = self.head.conditional(Xc, f2, generator)
                m = ms.mean(0)
                v = (vs + ms * ms).mean(0) - m * m
            means.append(m)
            variances.append(v.clamp_min(0.0) + self.noise.variance)
        return torch.cat(means), torch.cat(variances)


# ============================================================================
# BUILD
# ============================================================================

def _inducing_init(points: np.ndarray, n_ind: int, seed: int) -> np.ndarray:
    k = min(n_ind, points.shape[0])
    if k < n_ind:
        logger.warning("Only %d training points: using %d inducing points instead of %d", k, k, n_ind)
    return kmeans(points, k, seed=seed)


def build(
    spec: ModelSpec,
    X: Optional[np.ndarray],
    Y: Optional[np.ndarray] = None,
    seed: int = 0,
) -> Model:
    """Construct a freshly initialised model.

    Args:
        spec: A resolved specification (see :meth:`ModelSpec.resolve`).
        X:    Training inputs for k-means initialisation of Z (ignored for
              latent-input models).
        Y:    Training outputs (required for latent-input models, used by the
              PCA initialisation of q(X)).
        seed: Initialisation seed.

    Returns:
        The assembled :class:`Model`.

    Raises:
        ConfigError: If the ModelSpec is incomplete or inconsistent.
    """
    if not spec.is_resolved:
        raise ConfigError("ModelSpec must be resolved against the data dimensions before build().")
    v = spec.variant
    generator = make_generator(seed)
    d_y = int(spec.d_y)
    L = int(spec.n_latent)
    mean_kind = "zero" if v.is_neural else "constant"

    latents = None
    if spec.latent_inputs:
        if Y is None:
            raise ConfigError("Latent-input models need the training outputs for initialisation.")
        means = pca_latent_means(Y, int(spec.latent_dim), seed)
        latents = LatentInputs(means)
        init_points = means
    else:
        if X is None or np.asarray(X).ndim != 2 or np.asarray(X).shape[1] == 0:
            raise ConfigError(f"{v.value} needs observed inputs (D_X ≥ 1).")
        init_points = np.asarray(X, dtype=np.float64)
        if spec.d_x is not None and init_points.shape[1] != spec.d_x:
            raise ConfigError(f"Inputs have {init_points.shape[1]} columns but D_X={spec.d_x}.")
    n_data = init_points.shape[0]
    Z1 = as_tensor(_inducing_init(init_points, int(spec.n_inducing), seed))

    bank_opts = dict(
        ard=bool(spec.ard),
        jitter=spec.jitter,
        train_inducing=spec.train_inducing,
        generator=generator,
    )
    layer1 = build_bank(
        L, Z1,
        mean_kind=mean_kind,
        diagonal_noise=GPRN_LATENT_NOISE if v is Variant.GPRN else None,
        deep_kernel=spec.deep_kernel,
        **bank_opts,
    )

    layer2 = None
    activation = Activation(spec.activation, spec.leaky_slope) if spec.activation is not None else None
    if v is Variant.MOGP:
        head: LikelihoodHead = LinearHead(LinearBayesMix(d_y, L, generator), spec.l2_strength)
    elif v is Variant.N_MOGP:
        D_H = int(spec.n_hidden)
        head = NeuralHead(
            LinearBayesMix(d_y, D_H, generator), HiddenLayer(D_H, L, activation, generator), spec.l2_strength
        )
    elif v is Variant.GPRN:
        mix_bank = build_bank(d_y * L, Z1.clone(), mean_kind="constant", shared_kernel=True, **bank_opts)
        head = GprnHead(GprnMixBank(mix_bank, d_y, L), spec.l2_strength)
    elif v is Variant.SBGPRN:
        head = SbgprnHead(MixNet(spec.input_dim, d_y, L, generator), None, spec.l2_strength)
    elif v is Variant.N_SBGPRN:
        D_H = int(spec.n_hidden)
        head = SbgprnHead(
            MixNet(spec.input_dim, d_y, D_H, generator),
            HiddenLayer(D_H, L, activation, generator),
            spec.l2_strength,
        )
    else:
        L2 = int(spec.n_latent_layer2)
        n_ind2 = int(spec.n_inducing_layer2 or spec.n_inducing)
        Z2 = [randn(n_ind2, L, generator=generator) for _ in range(L2)]
        layer2 = build_bank(L2, Z2, mean_kind=mean_kind, share_Z=False, **bank_opts)
        if v is Variant.DGP:
            head = LinearHead(LinearBayesMix(d_y, L2, generator), spec.l2_strength)
        else:
            D_H = int(spec.n_hidden)
            head = NeuralHead(
                LinearBayesMix(d_y, D_H, generator), HiddenLayer(D_H, L2, activation, generator), spec.l2_strength
            )

    model = Model(spec, layer1, head, NoiseModel(d_y), n_data, layer2=layer2, latents=latents)
    logger.debug(
        "Built %s: L=%d, N_ind=%d, %d parameter tensors",
        v.value, L, Z1.shape[0], len(list(model.parameters())),
    )
    return model


# ============================================================================
# ELBO
# ============================================================================

def lvm_ell(model: Model, data: TensorData, batch: Value, generator: torch.Generator) -> Value:
    """Per-point ELL with one reparameterised latent draw per datapoint."""
    if model.latents is None:
        raise ConfigError(f"lvm_ell needs a latent-input model, got supervised {model.variant.value}.")
    x = model.latents.sample(batch, generator)
    return model.ell_analytic(x, data.Y[batch], data.mask[batch])


def elbo_terms(
    model: Model,
    data: TensorData,
    batch: Value | np.ndarray,
    seed: int,
    kl_scale: float = 1.0,
) -> ElboTerms:
    """Minibatch ELBO and its parts; deterministic given ``seed``.

    Raises:
        ValueError: If the batch is empty.
    """
    batch = torch.as_tensor(np.asarray(batch, dtype=np.int64))
    if batch.numel() == 0:
        raise ValueError("elbo_minibatch needs a non-empty batch.")
    generator = make_generator(seed)
    scale = model.n_data / batch.numel()

    if model.latents is not None:
        ell_points = lvm_ell(model, data, batch, generator)
        kl_local = scale * model.latents.kl(batch)
    else:
        ell_points = model.ell(data.X[batch], data.Y[batch], data.mask[batch], generator)
        kl_local = torch.zeros((), dtype=DTYPE)

    ell = scale * ell_points.sum()
    kl = kl_scale * (model.kl_global() + kl_local)
    l2 = l2_penalty(model.head)
    return ElboTerms(ell=ell, ell_mean=ell_points.mean(), kl=kl, l2=l2, elbo=ell - kl - l2)


def elbo_minibatch(
    model: Model,
    data: TensorData,
    batch: Value | np.ndarray,
    seed: int,
    kl_scale: float = 1.0,
) -> Value:
    """Scalar minibatch ELBO estimate (see module docstring)."""
    return elbo_terms(model, data, batch, seed, kl_scale).elbo


# ============================================================================
# TEST-TIME LATENTS
# ============================================================================

def latent_objective(model: Model, latents: LatentInputs, data: TensorData, seed: int) -> Value:
    """Σᵢ ELL(i) − Σᵢ KL(q(xᵢ*)) for fixed model parameters."""
    generator = make_generator(seed)
    idx = torch.arange(data.n)
    x = latents.sample(idx, generator)
    ell = model.ell_analytic(x, data.Y, data.mask).sum()
    return ell - latents.kl()


def masked_nearest(train_Y: np.ndarray, test_Y: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Index of the closest training row for each test row, NaN entries ignored.

    Distance is the mean squared difference over the columns observed in both
    rows; pairs with no common column are never chosen unless nothing else is.
    """
    train_Y = np.asarray(train_Y, dtype=np.float64)
    test_Y = np.asarray(test_Y, dtype=np.float64)
    m_s = (~np.isnan(train_Y)).astype(np.float64)
    y_s = np.nan_to_num(train_Y, nan=0.0)
    out = np.empty(test_Y.shape[0], dtype=np.int64)
    for start in range(0, test_Y.shape[0], chunk):
        block = test_Y[start:start + chunk]
        m_t = (~np.isnan(block)).astype(np.float64)
        y_t = np.nan_to_num(block, nan=0.0)
        common = m_t @ m_s.T
        sq = (y_t * y_t) @ m_s.T - 2.0 * y_t @ y_s.T + m_t @ (y_s * y_s).T
        dist = np.where(common > 0, np.maximum(sq, 0.0) / np.maximum(common, 1.0), np.inf)
        out[start:start + chunk] = np.argmin(dist, axis=1)
    return out


def fit_test_latents(
    model: Model,
    train_Y: np.ndarray,
    test: TensorData,
    steps: int = 300,
    lr: float = 0.02,
    seed: int = 0,
) -> LatentInputs:
    """Fit q(X*) for test outputs with every model parameter frozen.

    Means start at the q-mean of the nearest training point over the
    observed outputs (see :func:`masked_nearest`); only the new latent parameters are optimised.

    Raises:
        ConfigError: If the model has no latent inputs.
        ValueError:  If the test set is empty.
    """
    if model.latents is None:
        raise ConfigError("fit_test_latents needs a latent-input model.")
    if test.n == 0:
        raise ValueError("fit_test_latents needs at least one test point.")

    test_Y = np.where(test.mask.cpu().numpy(), to_numpy(test.Y), np.nan)
    nearest = masked_nearest(train_Y, test_Y)
    init = model.latents.mean.value.detach()[torch.as_tensor(nearest, dtype=torch.long)]
    latents = LatentInputs(init.clone())
    if steps == 0:
        return latents

    state = AdamState(list(latents.parameters()))
    with torch.no_grad():
        before = latent_objective(model, latents, test, seed).item()
    for step in range(steps):
        objective = latent_objective(model, latents, test, seed + 1 + step)
        backward(-objective, state.params)
        adam_step(state, lr)
    with torch.no_grad():
        after = latent_objective(model, latents, test, seed).item()
    logger.info("Fitted %d test latents: objective %.3f → %.3f", test.n, before, after)
    if after < before:
        logger.warning("Test-latent objective decreased during fitting (%.3f → %.3f)", before, after)
    return latents
