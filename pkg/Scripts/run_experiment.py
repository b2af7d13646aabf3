#!/usr/bin/env python3
"""
Command-line entry point: data generation, training, evaluation, prediction
and the experiment sweeps.

Usage :
  python Scripts/run_experiment.py synth --out Data/synth.csv
  python Scripts/run_experiment.py train --variant N-MOGP --data Data/synth.csv --d-x 5
  python Scripts/run_experiment.py train --config configs/nmogp.json --data Data/sarcos.csv
  python Scripts/run_experiment.py eval --checkpoint Results/run/model.ckpt --data Data/synth.csv
  python Scripts/run_experiment.py predict --checkpoint Results/run/model.ckpt --inputs X.csv --out pred.csv
  python Scripts/run_experiment.py sweep-hidden --variants N-MOGP,N-SBGPRN
  python Scripts/run_experiment.py mask-sweep --missing 0,2,4,6
  python Scripts/run_experiment.py small-data --fractions 0.1,0.25,0.5,1.0

Each run directory holds model.ckpt, history.csv and metrics.jsonl.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

import click
import numpy as np
import pandas as pd
from pydantic import ValidationError

# ── Project root on sys.path ──────────────────────────────────────────────────
PROJECT_ROOT = Path(__file__).resolve().parent.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from Scripts.checkpoint import load_checkpoint, save_checkpoint
from Scripts.core.errors import EXIT_CONFIG, EXIT_NUMERICAL, ConfigError, NumericalError
from Scripts.core.logging_config import get_logger, log_settings, setup_run_logging
from Scripts.core.models import (
    DataConfig,
    EvalConfig,
    ModelSpec,
    RunConfig,
    SynthConfig,
    TrainConfig,
    Variant,
    sanitize_name,
)
from Scripts.data import (
    Dataset,
    concat_unsupervised,
    gen_synthetic,
    load_csv,
    mask_outputs,
    split,
    write_csv,
)
from Scripts.diffmath import as_tensor, to_numpy
from Scripts.gp_models import Model
from Scripts.traineval import TrainHistory, append_metrics, evaluate, train

logger = get_logger(__name__)

_CONTEXT = {"help_option_names": ["-h", "--help"]}


# ============================================================================
# HELPERS
# ============================================================================

@contextmanager
def _exit_codes() -> Iterator[None]:
    """Map configuration errors to exit code 2 and numerical failures to 3."""
    try:
        yield
    except NumericalError as exc:
        click.echo(f"Numerical error: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)
    except ValidationError as exc:
        click.echo(f"Configuration error:\n{exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (ConfigError, ValueError) as exc:
        click.echo(f"Configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


def _int_list(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"Expected a comma-separated list of integers, got '{value}'.") from exc


def _float_list(value: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"Expected a comma-separated list of numbers, got '{value}'.") from exc


def _load_run_config(config: Optional[str], variant: Optional[str]) -> RunConfig:
    if config:
        run_cfg = RunConfig.from_file(config)
        if variant:
            run_cfg.model = _override(run_cfg.model, variant=variant)
        return run_cfg
    if not variant:
        raise ConfigError("Either --variant or --config is required.")
    return RunConfig(model=ModelSpec(variant=variant))


def _override(model: ModelSpec, **updates: object) -> ModelSpec:
    """Re-validate ``model`` with the non-None CLI overrides applied."""
    data = model.model_dump(exclude_unset=True)
    data.update({k: v for k, v in updates.items() if v is not None})
    return ModelSpec.model_validate(data)


def _load_dataset(data: Optional[str], d_x: Optional[int], synth: SynthConfig) -> Dataset:
    if data:
        if d_x is None:
            raise ConfigError("--d-x is required with --data.")
        return load_csv(data, d_x)
    return gen_synthetic(synth)


def _prepare(ds: Dataset, data_cfg: DataConfig, unsupervised: bool, mask_seed: int) -> tuple[Dataset, Dataset]:
    """Optional unsupervised view, split, then masking of training outputs."""
    if unsupervised:
        ds = concat_unsupervised(ds)
    train_ds, test_ds = split(ds, data_cfg.test_fraction, data_cfg.split_seed, data_cfg.standardize)
    if data_cfg.missing_per_point:
        train_ds = mask_outputs(train_ds, data_cfg.missing_per_point, mask_seed)
    return train_ds, test_ds


def run_one(
    spec: ModelSpec,
    train_ds: Dataset,
    test_ds: Dataset,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    data_cfg: DataConfig,
) -> tuple[Model, TrainHistory, dict[str, object]]:
    """Train and evaluate one configuration; returns the metrics record."""
    started = time.perf_counter()
    model, history = train(spec, train_ds, train_cfg)
    scores = evaluate(model, train_ds, test_ds, eval_cfg)
    record: dict[str, object] = {
        "variant": model.variant.value,
        "seed": train_cfg.seed,
        "split": data_cfg.split_seed,
        "train_ell": history.last_ell if len(history) else None,
        "test_ll": scores["test_ll"],
        "mrmse": scores["mrmse"],
        "wall_time_s": time.perf_counter() - started,
        "standardized": bool(train_ds.standardized and not eval_cfg.destandardize),
        "missing_per_point": data_cfg.missing_per_point,
    }
    logger.info("%s: test LL %.4f, MRMSE %.4f", record["variant"], scores["test_ll"], scores["mrmse"])
    return model, history, record


def _setup(out: Path, name: str, verbose: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    setup_run_logging(log_dir=out / "Logs", run_name=sanitize_name(name),
                      level=logging.DEBUG if verbose else logging.INFO)


def _train_options(f):
    """Options shared by train and the sweeps."""
    options = [
        click.option("--data", type=click.Path(dir_okay=False), default=None,
                     help="CSV with a header row: inputs first, then outputs (default: synthetic data)."),
        click.option("--d-x", "d_x", type=int, default=None, help="Number of input columns in --data."),
        click.option("--config", type=click.Path(dir_okay=False), default=None, help="JSON run configuration."),
        click.option("--seed", type=int, default=None, help="Master training seed."),
        click.option("--split-seed", type=int, default=None, help="Train/test split seed."),
        click.option("--test-fraction", type=float, default=None, help="Fraction of points held out."),
        click.option("--ell-mode", type=click.Choice(["sgvb", "analytic"]), default=None,
                     help="Expected log likelihood estimator."),
        click.option("--quad-order", type=int, default=None, help="Gauss-Hermite order for activation moments."),
        click.option("--epochs", type=int, default=None, help="Training epochs."),
        click.option("--minibatch", type=int, default=None, help="Minibatch size."),
        click.option("--restarts", type=int, default=None, help="Random initialisations screened."),
        click.option("--lr", type=float, default=None, help="Initial learning rate."),
        click.option("--n-outer", type=int, default=None, help="Outer samples of the test-LL estimator."),
        click.option("--n-inner", type=int, default=None, help="Inner samples of the test-LL estimator."),
        click.option("--destandardize", is_flag=True, default=False, help="Report metrics in original units."),
        click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory."),
        click.option("-v", "--verbose", is_flag=True, default=False, help="DEBUG output on the console."),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _configs(
    run_cfg: RunConfig,
    seed: Optional[int],
    split_seed: Optional[int],
    test_fraction: Optional[float],
    epochs: Optional[int],
    minibatch: Optional[int],
    restarts: Optional[int],
    lr: Optional[float],
    n_outer: Optional[int],
    n_inner: Optional[int],
    destandardize: bool,
) -> tuple[TrainConfig, EvalConfig, DataConfig]:
    def upd(model, **kw):
        return model.model_validate({**model.model_dump(), **{k: v for k, v in kw.items() if v is not None}})

    train_cfg = upd(run_cfg.train, seed=seed, epochs=epochs, minibatch_size=minibatch, restarts=restarts, lr=lr)
    eval_cfg = upd(run_cfg.eval, n_outer=n_outer, n_inner=n_inner, destandardize=destandardize or None)
    data_cfg = upd(run_cfg.data, split_seed=split_seed, test_fraction=test_fraction)
    return train_cfg, eval_cfg, data_cfg


# ============================================================================
# CLI
# ============================================================================

@click.group(context_settings=_CONTEXT)
def cli() -> None:
    """Sparse variational multi-output GPs with neural likelihoods."""


# ── synth ─────────────────────────────────────────────────────────────────────

@cli.command(context_settings=_CONTEXT)
@click.option("--n", "n", type=int, default=1000, show_default=True, help="Number of points.")
@click.option("--input-dim", type=int, default=5, show_default=True)
@click.option("--output-dim", type=int, default=8, show_default=True)
@click.option("--noise", type=float, default=0.1, show_default=True, help="Observation noise σ₀.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default="Data/synthetic.csv", show_default=True)
def synth(n: int, input_dim: int, output_dim: int, noise: float, seed: int, out: str) -> None:
    """Write the unit-ball synthetic dataset to CSV."""
    with _exit_codes():
        cfg = SynthConfig(n=n, input_dim=input_dim, output_dim=output_dim, noise=noise, seed=seed)
        path = write_csv(gen_synthetic(cfg), out)
        click.echo(f"Wrote {cfg.n} rows ({cfg.input_dim} inputs, {cfg.output_dim} outputs) to {path}")


# ── train ─────────────────────────────────────────────────────────────────────

@cli.command("train", context_settings=_CONTEXT)
@click.option("--variant", type=str, default=None,
              help="MOGP, GPRN, DGP, SBGPRN, N-MOGP, N-SBGPRN or N-DGP.")
@click.option("--unsupervised", is_flag=True, default=False,
              help="Latent-input model on the concatenated [X | Y] data.")
@click.option("--missing-per-point", type=int, default=None, help="Training outputs masked per point.")
@_train_options
def train_cmd(variant, unsupervised, missing_per_point, data, d_x, config, seed, split_seed, test_fraction,
              ell_mode, quad_order, epochs, minibatch, restarts, lr, n_outer, n_inner, destandardize,
              out, verbose) -> None:
    """Train one model, evaluate it on the held-out split and save a checkpoint."""
    with _exit_codes():
        run_cfg = _load_run_config(config, variant)
        spec = _override(run_cfg.model, ell_mode=ell_mode, quad_order=quad_order,
                         latent_inputs=True if unsupervised else None)
        train_cfg, eval_cfg, data_cfg = _configs(run_cfg, seed, split_seed, test_fraction, epochs, minibatch,
                                                 restarts, lr, n_outer, n_inner, destandardize)
        if missing_per_point is not None:
            data_cfg = data_cfg.model_copy(update={"missing_per_point": missing_per_point})
        d_x = d_x if d_x is not None else data_cfg.d_x

        out_dir = Path(out or f"Results/{sanitize_name(spec.variant.value)}_{train_cfg.seed}")
        _setup(out_dir, f"train_{spec.variant.value}", verbose)
        log_settings(logger, model=spec, train=train_cfg, eval=eval_cfg, data=data_cfg)

        ds = _load_dataset(data, d_x, SynthConfig())
        train_ds, test_ds = _prepare(ds, data_cfg, spec.latent_inputs, train_cfg.seed)
        model, history, record = run_one(spec, train_ds, test_ds, train_cfg, eval_cfg, data_cfg)

        extras = {
            **train_ds.stats(),
            "d_x": ds.d_x,
            "unsupervised": spec.latent_inputs,
            "test_fraction": data_cfg.test_fraction,
            "split_seed": data_cfg.split_seed,
            "standardize": data_cfg.standardize,
        }
        save_checkpoint(out_dir / "model.ckpt", model, extras)
        history.to_frame().to_csv(out_dir / "history.csv", index=False)
        append_metrics(out_dir / "metrics.jsonl", record)
        click.echo(f"{record['variant']}: test_ll={record['test_ll']:.4f} mrmse={record['mrmse']:.4f} → {out_dir}")


# ── eval ──────────────────────────────────────────────────────────────────────

@cli.command("eval", context_settings=_CONTEXT)
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--data", type=click.Path(dir_okay=False), default=None,
              help="CSV used for training (default: synthetic data).")
@click.option("--d-x", "d_x", type=int, default=None, help="Input columns (default: from the checkpoint).")
@click.option("--split-seed", type=int, default=None)
@click.option("--test-fraction", type=float, default=None)
@click.option("--seed", type=int, default=0, show_default=True, help="Estimator seed.")
@click.option("--n-outer", type=int, default=25, show_default=True)
@click.option("--n-inner", type=int, default=50, show_default=True)
@click.option("--destandardize", is_flag=True, default=False)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Metrics JSONL to append to.")
def eval_cmd(checkpoint, data, d_x, split_seed, test_fraction, seed, n_outer, n_inner, destandardize, out) -> None:
    """Recompute the held-out split of a checkpoint's data and report test LL and MRMSE."""
    with _exit_codes():
        model, extras = load_checkpoint(checkpoint)
        data_cfg = DataConfig(
            test_fraction=test_fraction if test_fraction is not None else extras.get("test_fraction", 0.1),
            split_seed=split_seed if split_seed is not None else extras.get("split_seed", 0),
            standardize=extras.get("standardize", True),
        )
        eval_cfg = EvalConfig(n_outer=n_outer, n_inner=n_inner, seed=seed, destandardize=destandardize)
        ds = _load_dataset(data, d_x if d_x is not None else extras.get("d_x"), SynthConfig())
        train_ds, test_ds = _prepare(ds, data_cfg, bool(extras.get("unsupervised")), 0)
        scores = evaluate(model, train_ds, test_ds, eval_cfg)
        record = {
            "variant": model.variant.value, "seed": seed, "split": data_cfg.split_seed,
            "train_ell": None, "test_ll": scores["test_ll"], "mrmse": scores["mrmse"], "wall_time_s": None,
            "standardized": bool(data_cfg.standardize and not destandardize), "missing_per_point": 0,
        }
        if out:
            append_metrics(out, record)
        click.echo(f"{record['variant']}: test_ll={scores['test_ll']:.4f} mrmse={scores['mrmse']:.4f}")


# ── predict ───────────────────────────────────────────────────────────────────

@cli.command("predict", context_settings=_CONTEXT)
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--inputs", type=click.Path(dir_okay=False, exists=True), required=True,
              help="CSV with a header row and one column per model input.")
@click.option("--out", type=click.Path(dir_okay=False), default="predictions.csv", show_default=True)
@click.option("--destandardize", is_flag=True, default=False, help="Means and variances in original units.")
def predict_cmd(checkpoint, inputs, out, destandardize) -> None:
    """Write predictive means and variances (mean_k, var_k columns) for new inputs."""
    with _exit_codes():
        model, extras = load_checkpoint(checkpoint)
        if model.latents is not None:
            raise ConfigError("Latent-input models have no observed inputs; use `eval` instead.")
        frame = pd.read_csv(inputs)
        if frame.shape[1] != model.spec.d_x:
            raise ConfigError(f"--inputs has {frame.shape[1]} columns, the model expects {model.spec.d_x}.")
        X = frame.to_numpy(dtype=np.float64)
        x_mean = np.asarray(extras.get("x_mean", np.zeros(X.shape[1])))
        x_std = np.asarray(extras.get("x_std", np.ones(X.shape[1])))
        mean, var = model.predict(as_tensor((X - x_mean) / x_std))
        mean, var = to_numpy(mean), to_numpy(var)
        if destandardize:
            y_mean = np.asarray(extras.get("y_mean", np.zeros(mean.shape[1])))
            y_std = np.asarray(extras.get("y_std", np.ones(mean.shape[1])))
            mean, var = mean * y_std + y_mean, var * y_std ** 2
        cols = {f"mean_{k + 1}": mean[:, k] for k in range(mean.shape[1])}
        cols.update({f"var_{k + 1}": var[:, k] for k in range(var.shape[1])})
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(cols).to_csv(out, index=False)
        click.echo(f"Wrote predictions for {len(X)} inputs to {out}")


# ── sweeps ────────────────────────────────────────────────────────────────────

def _sweep_setup(config, data, d_x, seed, split_seed, test_fraction, epochs, minibatch, restarts, lr,
                 n_outer, n_inner, destandardize, out, verbose, name):
    run_cfg = RunConfig.from_file(config) if config else RunConfig(model=ModelSpec(variant=Variant.MOGP))
    train_cfg, eval_cfg, data_cfg = _configs(run_cfg, seed, split_seed, test_fraction, epochs, minibatch,
                                             restarts, lr, n_outer, n_inner, destandardize)
    out_dir = Path(out or f"Results/{name}")
    _setup(out_dir, name, verbose)
    log_settings(logger, train=train_cfg, eval=eval_cfg, data=data_cfg)
    ds = _load_dataset(data, d_x if d_x is not None else data_cfg.d_x, SynthConfig())
    return run_cfg, train_cfg, eval_cfg, data_cfg, out_dir, ds


def _write_table(rows: list[dict[str, object]], out_dir: Path, name: str) -> Path:
    path = out_dir / f"{name}.csv"
    pd.DataFrame(rows).to_csv(path, index=False)
    click.echo(f"Wrote {len(rows)} rows to {path}")
    return path


@cli.command("sweep-hidden", context_settings=_CONTEXT)
@click.option("--variants", type=str, default="N-MOGP,N-SBGPRN,N-DGP", show_default=True)
@click.option("--hidden", type=str, default="4,8,12,16,20", show_default=True, help="D_H values.")
@_train_options
def sweep_hidden(variants, hidden, data, d_x, config, seed, split_seed, test_fraction, ell_mode, quad_order,
                 epochs, minibatch, restarts, lr, n_outer, n_inner, destandardize, out, verbose) -> None:
    """Train each neural variant for each number of hidden units."""
    with _exit_codes():
        run_cfg, train_cfg, eval_cfg, data_cfg, out_dir, ds = _sweep_setup(
            config, data, d_x, seed, split_seed, test_fraction, epochs, minibatch, restarts, lr,
            n_outer, n_inner, destandardize, out, verbose, "sweep_hidden")
        train_ds, test_ds = _prepare(ds, data_cfg, False, train_cfg.seed)
        rows = []
        for name in variants.split(","):
            for d_h in _int_list(hidden):
                spec = _override(run_cfg.model, variant=name.strip(), n_hidden=d_h, ell_mode=ell_mode,
                                 quad_order=quad_order)
                if not spec.variant.is_neural:
                    raise ConfigError(f"sweep-hidden needs neural variants, got {spec.variant.value}.")
                _, _, record = run_one(spec, train_ds, test_ds, train_cfg, eval_cfg, data_cfg)
                record["n_hidden"] = d_h
                append_metrics(out_dir / "metrics.jsonl", record)
                rows.append(record)
        _write_table(rows, out_dir, "sweep_hidden")


@cli.command("mask-sweep", context_settings=_CONTEXT)
@click.option("--variants", type=str, default="MOGP,N-MOGP", show_default=True)
@click.option("--missing", type=str, default="0,2,4,6", show_default=True,
              help="Numbers of training outputs masked per point.")
@_train_options
def mask_sweep(variants, missing, data, d_x, config, seed, split_seed, test_fraction, ell_mode, quad_order,
               epochs, minibatch, restarts, lr, n_outer, n_inner, destandardize, out, verbose) -> None:
    """Train each variant with increasing numbers of missing outputs per training point."""
    with _exit_codes():
        run_cfg, train_cfg, eval_cfg, data_cfg, out_dir, ds = _sweep_setup(
            config, data, d_x, seed, split_seed, test_fraction, epochs, minibatch, restarts, lr,
            n_outer, n_inner, destandardize, out, verbose, "mask_sweep")
        rows = []
        for n_missing in _int_list(missing):
            cfg = data_cfg.model_copy(update={"missing_per_point": n_missing})
            train_ds, test_ds = _prepare(ds, cfg, False, train_cfg.seed)
            for name in variants.split(","):
                spec = _override(run_cfg.model, variant=name.strip(), ell_mode=ell_mode, quad_order=quad_order)
                _, _, record = run_one(spec, train_ds, test_ds, train_cfg, eval_cfg, cfg)
                append_metrics(out_dir / "metrics.jsonl", record)
                rows.append(record)
        _write_table(rows, out_dir, "mask_sweep")


@cli.command("small-data", context_settings=_CONTEXT)
@click.option("--variants", type=str, default="MOGP,N-MOGP", show_default=True)
@click.option("--fractions", type=str, default="0.1,0.25,0.5,1.0", show_default=True,
              help="Nested fractions of the training split.")
@click.option("--n-ind", type=int, default=250, show_default=True, help="Inducing points per GP.")
@_train_options
def small_data(variants, fractions, n_ind, data, d_x, config, seed, split_seed, test_fraction, ell_mode,
               quad_order, epochs, minibatch, restarts, lr, n_outer, n_inner, destandardize, out, verbose) -> None:
    """Train on nested subsets of the training data, scaling the minibatch with the subset size."""
    with _exit_codes():
        run_cfg, train_cfg, eval_cfg, data_cfg, out_dir, ds = _sweep_setup(
            config, data, d_x, seed, split_seed, test_fraction, epochs, minibatch, restarts, lr,
            n_outer, n_inner, destandardize, out, verbose, "small_data")
        train_full, test_ds = _prepare(ds, data_cfg, False, train_cfg.seed)
        order = np.random.default_rng(data_cfg.split_seed).permutation(train_full.n)
        rows = []
        for frac in sorted(_float_list(fractions)):
            if not 0.0 < frac <= 1.0:
                raise ConfigError(f"Fractions must lie in (0, 1], got {frac}.")
            n_sub = max(1, int(round(frac * train_full.n)))
            subset = train_full.subset(np.sort(order[:n_sub]))
            for name in variants.split(","):
                spec = _override(run_cfg.model, variant=name.strip(), n_inducing=n_ind, ell_mode=ell_mode,
                                 quad_order=quad_order)
                batch = max(1, int(round(frac * train_cfg.batch_size_for(spec.variant))))
                cfg = train_cfg.model_copy(update={"minibatch_size": batch})
                _, _, record = run_one(spec, subset, test_ds, cfg, eval_cfg, data_cfg)
                record["n_train"] = n_sub
                append_metrics(out_dir / "metrics.jsonl", record)
                rows.append(record)
        _write_table(rows, out_dir, "small_data")


if __name__ == "__main__":
    cli()
