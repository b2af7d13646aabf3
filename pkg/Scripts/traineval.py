"""
Training protocol and evaluation metrics.

Training:
  * ``restarts`` models are built from seeds drawn from the master seed,
    each trained for ``screening_epochs``; the one with the best average
    ELL over its last screening epoch is trained on to ``epochs``
  * Adam with a stepwise learning-rate decay (``lr_at``) and optional
    linear KL annealing (``kl_scale_at``)

Evaluation:
  * ``test_ll`` : nested log-mean-exp estimator over N_outer × N_inner draws
  * ``mrmse``   : RMSE per output dimension, averaged over dimensions
"""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from Scripts.core.errors import ConfigError
from Scripts.core.logging_config import get_logger
from Scripts.core.models import EvalConfig, ModelSpec, TrainConfig
from Scripts.data import Dataset
from Scripts.diffmath import AdamState, Value, adam_step, as_tensor, backward, make_generator, to_numpy
from Scripts.gp_models import LatentInputs, Model, TensorData, build, elbo_terms, fit_test_latents

logger = get_logger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)

# Sample-by-point rows evaluated at once by test_ll().
EVAL_ROWS = 2 ** 16


# ============================================================================
# SCHEDULES
# ============================================================================

def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Initial lr × factor^(number of milestones ≤ epoch)."""
    passed = sum(1 for m in cfg.lr_milestones if m <= epoch)
    return cfg.lr * cfg.lr_factor ** passed


def kl_scale_at(cfg: TrainConfig, epoch: int) -> float:
    """Linear KL annealing from 0 to 1 over ``kl_warmup_epochs``."""
    if cfg.kl_warmup_epochs == 0:
        return 1.0
    return min(1.0, epoch / cfg.kl_warmup_epochs)


# ============================================================================
# HISTORY
# ============================================================================

@dataclass
class TrainHistory:
    """One record per completed epoch."""

    records: list[dict[str, float]] = field(default_factory=list)
    restart_seed: Optional[int] = None

    def __len__(self) -> int:
        return len(self.records)

    def append(self, **record: float) -> None:
        self.records.append(record)

    @property
    def last_ell(self) -> float:
        return self.records[-1]["ell"] if self.records else float("-inf")

    def to_frame(self) -> pd.DataFrame:
        columns = ["epoch", "elbo", "ell", "lr", "kl_scale", "wall_time_s"]
        return pd.DataFrame(self.records, columns=columns)


# ============================================================================
# TRAINING
# ============================================================================

@dataclass
class _Run:
    model: Model
    state: AdamState
    history: TrainHistory
    rng: np.random.Generator
    started: float


def _new_run(spec: ModelSpec, dataset: Dataset, seed: int) -> _Run:
    model = build(spec, dataset.X, dataset.Y, seed=seed)
    state = AdamState(model.trainable_parameters())
    return _Run(model, state, TrainHistory(restart_seed=seed), np.random.default_rng(seed), time.perf_counter())


def _run_epoch(run: _Run, data: TensorData, cfg: TrainConfig, epoch: int, batch_size: int) -> None:
    lr, kl_scale = lr_at(cfg, epoch), kl_scale_at(cfg, epoch)
    perm = run.rng.permutation(data.n)
    elbos, ells, sizes = [], [], []
    for start in range(0, data.n, batch_size):
        batch = perm[start:start + batch_size]
        step_seed = int(run.rng.integers(0, 2**31 - 1))
        terms = elbo_terms(run.model, data, batch, step_seed, kl_scale)
        backward(-terms.elbo, run.state.params)
        adam_step(run.state, lr)
        elbos.append(terms.elbo.item())
        ells.append(terms.ell_mean.item())
        sizes.append(len(batch))
    w = np.asarray(sizes, dtype=np.float64)
    run.history.append(
        epoch=epoch,
        elbo=float(np.mean(elbos)),
        ell=float(np.average(ells, weights=w)),
        lr=lr,
        kl_scale=kl_scale,
        wall_time_s=time.perf_counter() - run.started,
    )
    logger.debug("epoch %d: elbo %.4f, ell %.4f, lr %.4g", epoch, run.history.records[-1]["elbo"],
                 run.history.records[-1]["ell"], lr)


def _train_epochs(run: _Run, data: TensorData, cfg: TrainConfig, end: int, batch_size: int, desc: str) -> None:
    start = len(run.history)
    show = cfg.show_progress and sys.stderr.isatty()
    for epoch in tqdm(range(start, end), desc=desc, unit="epoch", disable=not show):
        _run_epoch(run, data, cfg, epoch, batch_size)


def train(spec: ModelSpec, dataset: Dataset, cfg: TrainConfig) -> tuple[Model, TrainHistory]:
    """Build, screen and train a model on ``dataset``.

    Returns:
        ``(model, history)`` of the selected restart; history includes its
        screening epochs. Deterministic given ``cfg.seed``.

    Raises:
        ValueError:  If the dataset is empty.
        ConfigError: If the ModelSpec cannot be built.
    """
    if dataset.n == 0:
        raise ValueError("Cannot train on an empty dataset.")
    if not spec.is_resolved:
        spec = spec.resolve(dataset.d_x, dataset.d_y)
    data = dataset.to_tensors()

    batch_size = cfg.batch_size_for(spec.variant)
    if batch_size > dataset.n:
        logger.warning("Minibatch size %d exceeds N=%d: using full-batch training", batch_size, dataset.n)
        batch_size = dataset.n

    seeds = [int(s) for s in np.random.default_rng(cfg.seed).integers(0, 2**31 - 1, size=cfg.restarts)]
    logger.info("Training %s on N=%d (D_X=%d, D_Y=%d): %d restart(s), %d epochs, minibatch %d",
                spec.variant.value, dataset.n, dataset.d_x, dataset.d_y, cfg.restarts, cfg.epochs, batch_size)

    screening = min(cfg.screening_epochs, cfg.epochs)
    if cfg.restarts == 1 or screening == 0:
        best = _new_run(spec, dataset, seeds[0])
    else:
        runs = []
        for i, seed in enumerate(seeds):
            run = _new_run(spec, dataset, seed)
            _train_epochs(run, data, cfg, screening, batch_size, f"restart {i + 1}/{cfg.restarts}")
            logger.info("Restart %d/%d (seed %d): screening ELL %.4f", i + 1, cfg.restarts, seed, run.history.last_ell)
            runs.append(run)
        best = max(runs, key=lambda r: r.history.last_ell)
        logger.info("Selected restart with seed %d (ELL %.4f)", best.history.restart_seed, best.history.last_ell)

    _train_epochs(best, data, cfg, cfg.epochs, batch_size, spec.variant.value)
    if len(best.history):
        last = best.history.records[-1]
        logger.info("Finished %s: ELBO %.3f, train ELL %.4f per point, %.1fs",
                    spec.variant.value, last["elbo"], last["ell"], last["wall_time_s"])
    return best.model, best.history


# ============================================================================
# METRICS
# ============================================================================

def mrmse(pred_means: np.ndarray, Y: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean over observed output dims of √(meanᵢ (ŷ_ik − y_ik)²).

    Raises:
        ValueError: On shape mismatch.
    """
    pred, Y = np.asarray(pred_means, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    if pred.shape != Y.shape:
        raise ValueError(f"mrmse: prediction shape {pred.shape} does not match targets {Y.shape}.")
    mask = ~np.isnan(Y) if mask is None else np.asarray(mask, dtype=bool)
    sq = np.where(mask, (pred - np.where(mask, Y, 0.0)) ** 2, 0.0)
    counts = mask.sum(axis=0)
    observed = counts > 0
    rmse = np.sqrt(sq.sum(axis=0)[observed] / counts[observed])
    return float(rmse.mean()) if rmse.size else 0.0


@torch.no_grad()
def test_ll(
    model: Model,
    X_star: Optional[np.ndarray | Value],
    Y_star: np.ndarray | Value,
    eval_cfg: EvalConfig,
    mask: Optional[np.ndarray] = None,
    latents: Optional[LatentInputs] = None,
) -> float:
    """Nested Monte-Carlo estimate of the per-datapoint test log likelihood.

        (1/N_outer)·Σ_k log[(1/N_inner)·Σ_j p(y* | F*_jk)], averaged over points

    Raises:
        ConfigError: For a latent-input model without fitted test latents.
    """
    if model.latents is not None and latents is None:
        raise ConfigError("Latent-input models need fitted test latents (fit_test_latents) for test_ll.")
    Y = as_tensor(Y_star)
    M = torch.as_tensor(~np.isnan(to_numpy(Y)) if mask is None else np.asarray(mask, dtype=bool))
    X = None if latents is not None else as_tensor(X_star)
    generator = make_generator(eval_cfg.seed)
    n_out, n_in = eval_cfg.n_outer, eval_cfg.n_inner
    beta = model.noise.precision

    chunk = max(1, EVAL_ROWS // (n_out * n_in))
    per_point = []
    for start in range(0, Y.shape[0], chunk):
        sl = slice(start, start + chunk)
        if latents is not None:
            chunk_latents = LatentInputs(latents.mean.value[sl])
            chunk_latents.scale.assign(latents.scale.value[sl])
            m, v = model.sample_conditional(None, generator, n_out * n_in, chunk_latents)
        else:
            m, v = model.sample_conditional(X[sl], generator, n_out * n_in)
        y, msk = Y[sl], M[sl]
        var = v + 1.0 / beta
        y_filled = torch.where(msk, y, torch.zeros_like(y))
        logp = -0.5 * (_LOG_2PI + torch.log(var) + (y_filled - m) ** 2 / var)
        logp = torch.where(msk, logp, torch.zeros_like(logp)).sum(-1)       # (S, n)
        logp = logp.reshape(n_out, n_in, -1)
        inner = torch.logsumexp(logp, dim=1) - math.log(n_in)               # (N_outer, n)
        per_point.append(inner.mean(0))
    return float(torch.cat(per_point).mean().item())


def evaluate(
    model: Model,
    train: Dataset,
    test: Dataset,
    eval_cfg: EvalConfig,
) -> dict[str, float]:
    """Test log likelihood and MRMSE, in standardised or original units.

    Latent-input models first fit q(X*) for the test outputs.
    """
    latents = None
    if model.latents is not None:
        latents = fit_test_latents(
            model, train.Y, test.to_tensors(),
            steps=eval_cfg.latent_fit_steps, lr=eval_cfg.latent_fit_lr, seed=eval_cfg.seed,
        )
        pred_inputs = latents.mean.value.detach()
    else:
        pred_inputs = as_tensor(test.X)

    ll = test_ll(model, test.X, test.Y, eval_cfg, mask=test.mask, latents=latents)
    mean, _ = model.predict(pred_inputs)
    pred = to_numpy(mean)
    Y = test.Y
    if eval_cfg.destandardize and test.standardized:
        pred, Y = pred * test.y_std + test.y_mean, Y * test.y_std + test.y_mean
        ll -= float(np.mean(np.where(test.mask, np.log(test.y_std), 0.0).sum(axis=1)))
    return {"test_ll": ll, "mrmse": mrmse(pred, Y, test.mask)}


def append_metrics(path: str | Path, record: dict[str, Any]) -> Path:
    """Append one JSON line to a metrics file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def read_metrics(path: str | Path) -> pd.DataFrame:
    return pd.read_json(path, lines=True)
