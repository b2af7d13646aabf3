"""
Unit tests for Scripts/gp_models.py: model assembly, ELBOs and test latents.
"""

from __future__ import annotations

import logging
import math

import numpy as np
import pytest
import torch

from Scripts.core.errors import ConfigError
from Scripts.core.models import EllMode, ModelSpec, Variant
from Scripts.diffmath import DTYPE, as_tensor, finite_diff_gradients, make_generator
from Scripts.gp_models import (
    LatentInputs,
    TensorData,
    build,
    elbo_minibatch,
    elbo_terms,
    fit_test_latents,
    latent_objective,
    masked_nearest,
    pca_latent_means,
)
from Scripts.likelihoods import ell_gaussian_point

ALL_VARIANTS = [v.value for v in Variant]
ANALYTIC_VARIANTS = [v.value for v in Variant if v.supports_analytic]


def _mode(variant: str) -> str:
    return "analytic" if Variant(variant).supports_analytic else "sgvb"


def _lvm_spec(variant: str = "N-MOGP", d_y: int = 3) -> ModelSpec:
    return ModelSpec.model_validate({
        "variant": variant, "latent_inputs": True, "latent_D_X": 2, "L": 2, "D_H": 3, "N_ind": 4, "quad_order": 20,
    }).resolve(0, d_y)


# ============================================================================
# build
# ============================================================================

class TestBuild:
    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_every_variant_builds_with_finite_elbo(self, variant, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec(variant), X, Y, seed=0)
        value = elbo_minibatch(model, TensorData.from_arrays(X, Y), np.arange(8), seed=0)
        assert torch.isfinite(value)
        assert model.variant.value == variant

    def test_layer_structure(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        dgp = build(toy_spec("N-DGP"), X, Y)
        assert len(dgp.layer1) == 2 and len(dgp.layer2) == 2
        assert dgp.layer2.units[0].Z is not dgp.layer2.units[1].Z
        mogp = build(toy_spec("MOGP"), X, Y)
        assert mogp.layer2 is None and mogp.latents is None
        assert mogp.layer1.units[0].Z.shape == (4, 2)

    def test_neural_variants_use_zero_mean(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        assert build(toy_spec("N-MOGP"), X, Y).layer1.units[0].mean_fn.kind == "zero"
        assert build(toy_spec("MOGP"), X, Y).layer1.units[0].mean_fn.kind == "constant"

    def test_gprn_latent_kernels_have_diagonal_noise(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("GPRN"), X, Y)
        assert model.layer1.units[0].kernel.diagonal_noise is not None
        assert len(model.head.mixbank.bank) == 6

    def test_seeded_build_is_reproducible(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        a = build(toy_spec("N-SBGPRN"), X, Y, seed=3).state_dict()
        b = build(toy_spec("N-SBGPRN"), X, Y, seed=3).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_unresolved_spec_rejected(self, toy_arrays):
        X, Y = toy_arrays
        with pytest.raises(ConfigError):
            build(ModelSpec(variant="MOGP"), X, Y)

    def test_missing_inputs_rejected(self, toy_spec):
        with pytest.raises(ConfigError):
            build(toy_spec("MOGP"), None, np.zeros((8, 3)))

    def test_input_width_checked(self, toy_spec):
        with pytest.raises(ConfigError):
            build(toy_spec("MOGP"), np.zeros((8, 3)), None)

    def test_too_few_points_for_inducing(self, toy_spec, toy_arrays, caplog):
        X, Y = toy_arrays
        with caplog.at_level(logging.WARNING):
            model = build(toy_spec("MOGP", N_ind=50), X, Y)
        assert model.layer1.units[0].num_inducing == 8
        assert "inducing" in caplog.text

    def test_deep_kernel_and_frozen_inducing(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("MOGP", deep_kernel=True, train_inducing=False), X, Y)
        assert hasattr(model.layer1.units[0].kernel, "warp")
        assert not model.layer1.units[0].Z.raw.requires_grad


# ============================================================================
# Gradients
# ============================================================================

def _check_gradients(model, data, params, rtol=1e-4, atol=1e-6):
    loss_fn = lambda: elbo_minibatch(model, data, np.arange(data.n), seed=0)
    analytic, numeric = finite_diff_gradients(loss_fn, params)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


class TestGradients:
    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_small_parameters_match_finite_differences(self, variant, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec(variant, ell_mode=_mode(variant)), X, Y, seed=1)
        params = [p for p in model.trainable_parameters() if p.numel() <= 64]
        _check_gradients(model, TensorData.from_arrays(X, Y), params)

    def test_sgvb_path(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("N-MOGP", ell_mode="sgvb", activation="erf"), X, Y, seed=2)
        _check_gradients(model, TensorData.from_arrays(X, Y), model.trainable_parameters())

    def test_masked_outputs(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        Y = Y.copy()
        Y[::2, 1] = np.nan
        model = build(toy_spec("N-SBGPRN", ell_mode="analytic"), X, Y, seed=0)
        params = [p for p in model.trainable_parameters() if p.numel() <= 64]
        _check_gradients(model, TensorData.from_arrays(X, Y), params)

    def test_latent_inputs(self, toy_arrays):
        _, Y = toy_arrays
        model = build(_lvm_spec(), None, Y, seed=0)
        params = [model.latents.mean.raw, model.latents.scale.raw]
        _check_gradients(model, TensorData.from_arrays(np.zeros((8, 0)), Y), params)

    @pytest.mark.slow
    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_every_parameter_matches_finite_differences(self, variant, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec(variant, ell_mode=_mode(variant)), X, Y, seed=1)
        _check_gradients(model, TensorData.from_arrays(X, Y), model.trainable_parameters())


# ============================================================================
# Analytic and sampled ELL agree
# ============================================================================

class TestCrossPath:
    @pytest.mark.parametrize("variant", ANALYTIC_VARIANTS)
    def test_sgvb_mean_matches_analytic(self, variant, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec(variant, activation="sherf") if Variant(variant).is_neural else toy_spec(variant), X, Y)
        for unit in model.layer1.units:
            unit.q_chol.assign(0.3 * torch.eye(unit.num_inducing, dtype=DTYPE))
        data = TensorData.from_arrays(X, Y)
        with torch.no_grad():
            analytic = model.ell_analytic(data.X, data.Y, data.mask)
            m, v = model.sample_conditional(data.X, make_generator(0), 40_000)
            samples = ell_gaussian_point(data.Y, m, v, model.noise.precision, data.mask)
        se = samples.std(0) / math.sqrt(samples.shape[0])
        assert ((analytic - samples.mean(0)).abs() <= 4 * se + 1e-10).all()

    def test_deep_variant_has_no_analytic_ell(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("DGP"), X, Y)
        with pytest.raises(ConfigError):
            model.ell_analytic(as_tensor(X), as_tensor(Y), torch.ones(8, 3, dtype=torch.bool))


# ============================================================================
# ELBO
# ============================================================================

class TestElbo:
    def test_terms_add_up(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("N-MOGP", ell_mode="analytic"), X, Y)
        t = elbo_terms(model, TensorData.from_arrays(X, Y), np.arange(8), seed=0)
        assert t.elbo.item() == pytest.approx((t.ell - t.kl - t.l2).item())
        assert t.kl.item() == pytest.approx(model.kl_global().item())
        assert t.ell.item() == pytest.approx(8 * t.ell_mean.item())

    def test_minibatch_rescaling(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("MOGP", ell_mode="analytic"), X, Y)
        data = TensorData.from_arrays(X, Y)
        t = elbo_terms(model, data, np.array([0, 3]), seed=0)
        ell_points = model.ell_analytic(data.X[[0, 3]], data.Y[[0, 3]], data.mask[[0, 3]])
        assert t.ell.item() == pytest.approx(4.0 * ell_points.sum().item())

    def test_hidden_unit_permutation_leaves_elbo_unchanged(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("N-MOGP", ell_mode="analytic"), X, Y, seed=3)
        data = TensorData.from_arrays(X, Y)
        before = elbo_minibatch(model, data, np.arange(8), 0).item()

        perm = torch.tensor([2, 0, 1])
        hidden, mix = model.head.hidden, model.head.mix
        with torch.no_grad():
            hidden.Mtilde.assign(hidden.Mtilde.value[perm])
            hidden.bias_mean.assign(hidden.bias_mean.value[perm])
            hidden.bias_scale.assign(hidden.bias_scale.value[perm])
            mix.M0.assign(mix.M0.value[:, perm])
            mix.sigma_M.assign(mix.sigma_M.value[:, perm])
        after = elbo_minibatch(model, data, np.arange(8), 0).item()
        assert after == pytest.approx(before, rel=1e-10)

    def test_kl_scale(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("MOGP", ell_mode="analytic"), X, Y)
        t = elbo_terms(model, TensorData.from_arrays(X, Y), np.arange(8), seed=0, kl_scale=0.0)
        assert t.kl.item() == 0.0

    def test_seeded_estimate_is_reproducible(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("N-DGP"), X, Y)
        data = TensorData.from_arrays(X, Y)
        assert elbo_minibatch(model, data, np.arange(8), 5).item() == elbo_minibatch(model, data, np.arange(8), 5).item()

    def test_empty_batch_rejected(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("MOGP"), X, Y)
        with pytest.raises(ValueError):
            elbo_minibatch(model, TensorData.from_arrays(X, Y), np.array([], dtype=int), 0)

    def test_masked_values_do_not_matter(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("N-MOGP", ell_mode="analytic"), X, Y)
        mask = np.ones_like(Y, dtype=bool)
        mask[2, 1] = False
        Y2 = Y.copy()
        Y2[2, 1] = 1e3
        a = elbo_minibatch(model, TensorData.from_arrays(X, Y, mask), np.arange(8), 0)
        b = elbo_minibatch(model, TensorData.from_arrays(X, Y2, mask), np.arange(8), 0)
        assert a.item() == b.item()

    def test_optimal_q_attains_exact_marginal_likelihood(self):
        # One output, one GP, inducing points at the data, M fixed at 1.
        X = np.linspace(0.0, 19.0, 20).reshape(-1, 1)
        y = np.sin(X[:, 0] / 2.0).reshape(-1, 1)
        spec = ModelSpec.model_validate({"variant": "MOGP", "L": 1, "N_ind": 20, "ell_mode": "analytic"}).resolve(1, 1)
        model = build(spec, X, y)
        unit = model.layer1.units[0]
        unit.Z.assign(X)
        model.head.mix.M0.assign([[1.0]])
        model.head.mix.sigma_M.assign([[1e-8]])

        Xt, yt = as_tensor(X), as_tensor(y[:, 0])
        K = unit.kernel.k_matrix(Xt).detach()
        noise = model.noise.variance.item()
        A = K + noise * torch.eye(20, dtype=DTYPE)
        post_mean = K @ torch.linalg.solve(A, yt)
        post_cov = K - K @ torch.linalg.solve(A, K)
        unit.q_mean.assign(post_mean)
        unit.q_chol.assign(torch.linalg.cholesky(0.5 * (post_cov + post_cov.T)))

        exact = torch.distributions.MultivariateNormal(torch.zeros(20, dtype=DTYPE), A).log_prob(yt).item()
        with torch.no_grad():
            t = elbo_terms(model, TensorData.from_arrays(X, y), np.arange(20), seed=0)
            bound = t.elbo.item() + model.head.kl().item()
        assert bound <= exact + 1e-6
        assert bound == pytest.approx(exact, abs=1e-4)


# ============================================================================
# Prediction
# ============================================================================

class TestPredict:
    @pytest.mark.parametrize("variant", ["MOGP", "N-SBGPRN", "N-DGP"])
    def test_shapes_and_noise_floor(self, variant, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec(variant), X, Y)
        mean, var = model.predict(as_tensor(X[:5]), n_mc=50)
        assert mean.shape == var.shape == (5, 3)
        assert (var >= model.noise.variance - 1e-12).all()

    def test_analytic_mean_matches_sampling(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("N-MOGP", activation="erf"), X, Y)
        for unit in model.layer1.units:
            unit.q_chol.assign(0.3 * torch.eye(unit.num_inducing, dtype=DTYPE))
        with torch.no_grad():
            mean, _ = model.predict(as_tensor(X))
            m, _ = model.sample_conditional(as_tensor(X), make_generator(1), 40_000)
        se = m.std(0) / math.sqrt(m.shape[0])
        assert ((mean - m.mean(0)).abs() <= 4 * se + 1e-10).all()


# ============================================================================
# Two-layer sampling
# ============================================================================

class TestDgpForwardSample:
    def test_shape(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("DGP"), X, Y)
        f2 = model.dgp_forward_sample(as_tensor(X), make_generator(0), n_samples=7)
        assert f2.shape == (7, 8, 2)

    def test_prior_layer_two_on_collapsed_layer_one(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("N-DGP"), X, Y)
        unit = model.layer1.units[0]
        Z = unit.Z.value.detach()
        for u in model.layer1.units:
            u.q_chol.assign(1e-12 * torch.eye(u.num_inducing, dtype=DTYPE))
        for u in model.layer2.units:
            u.set_to_prior()

        with torch.no_grad():
            f1_mean, _ = model.layer1.predict_marginals(Z)
            f2 = model.dgp_forward_sample(Z, make_generator(1), n_samples=20_000)
        for j, u in enumerate(model.layer2.units):
            prior_var = u.kernel.kdiag(f1_mean).detach()
            se = torch.sqrt(prior_var / f2.shape[0])
            assert ((f2[..., j].mean(0) - u.mean_fn(f1_mean).detach()).abs() <= 4 * se).all()
            assert torch.allclose(f2[..., j].var(0), prior_var, rtol=0.05)

    def test_needs_two_layers(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("N-MOGP"), X, Y)
        with pytest.raises(ConfigError):
            model.dgp_forward_sample(as_tensor(X), make_generator(0))


# ============================================================================
# Latent inputs
# ============================================================================

class TestLatentInputs:
    def test_pca_means(self):
        Y = np.random.default_rng(0).normal(size=(30, 5))
        Z = pca_latent_means(Y, 3)
        assert Z.shape == (30, 3)
        assert np.allclose(Z.std(axis=0), 1.0)

    def test_pca_pads_when_outputs_are_few(self):
        assert pca_latent_means(np.random.default_rng(0).normal(size=(10, 2)), 4).shape == (10, 4)

    def test_lvm_build_and_elbo(self, toy_arrays):
        _, Y = toy_arrays
        spec = _lvm_spec()
        model = build(spec, None, Y)
        assert len(model.latents) == 8 and model.latents.dim == 2
        assert model.ell_mode is EllMode.ANALYTIC
        t = elbo_terms(model, TensorData.from_arrays(np.zeros((8, 0)), Y), np.arange(8), seed=0)
        assert torch.isfinite(t.elbo)
        assert t.kl.item() > model.kl_global().item()

    def test_lvm_needs_outputs(self):
        with pytest.raises(ConfigError):
            build(_lvm_spec(), None, None)

    def test_latent_kl(self):
        latents = LatentInputs(torch.zeros(3, 2, dtype=DTYPE), scale=1.0)
        assert latents.kl().item() == pytest.approx(0.0, abs=1e-12)

    def test_fit_test_latents(self, toy_arrays):
        _, Y = toy_arrays
        model = build(_lvm_spec(), None, Y)
        test = TensorData.from_arrays(np.zeros((3, 0)), Y[:3] + 0.01)
        latents = fit_test_latents(model, Y, test, steps=20, seed=0)
        assert latents.mean.shape == (3, 2)
        assert torch.isfinite(latent_objective(model, latents, test, 0))
        frozen = [p for p in model.parameters() if p.grad is not None]
        assert not frozen

    def test_fit_test_latents_starts_at_nearest_training_point(self, toy_arrays):
        _, Y = toy_arrays
        model = build(_lvm_spec(), None, Y)
        latents = fit_test_latents(model, Y, TensorData.from_arrays(np.zeros((2, 0)), Y[[4, 6]]), steps=0)
        assert torch.allclose(latents.mean.value, model.latents.mean.value[[4, 6]])

    def test_nearest_training_point_ignores_masked_outputs(self, toy_arrays):
        _, Y = toy_arrays
        Y = Y.copy()
        Y[3, 2] = 40.0
        model = build(_lvm_spec(), None, Y)
        query = Y[[3]].copy()
        query[0, 2] = np.nan
        latents = fit_test_latents(model, Y, TensorData.from_arrays(np.zeros((1, 0)), query), steps=0)
        assert torch.allclose(latents.mean.value, model.latents.mean.value[[3]])

    def test_masked_nearest_skips_rows_without_common_outputs(self):
        train_Y = np.array([[np.nan, 5.0], [1.0, np.nan]])
        assert masked_nearest(train_Y, np.array([[1.5, np.nan]])).tolist() == [1]

    def test_fit_test_latents_needs_lvm(self, toy_spec, toy_arrays):
        X, Y = toy_arrays
        model = build(toy_spec("MOGP"), X, Y)
        with pytest.raises(ConfigError):
            fit_test_latents(model, Y, TensorData.from_arrays(X, Y))
