"""
Datasets: CSV ingestion, synthetic generation, splits, standardisation,
missing-output masks and the unsupervised (concatenated) view.

Missing outputs are NaN in ``Dataset.Y`` and ``False`` in ``Dataset.mask``;
inputs are always fully observed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from Scripts.core.logging_config import get_logger
from Scripts.core.models import SynthConfig
from Scripts.gp_models import TensorData

logger = get_logger(__name__)

# Cell values read as a missing output.
MISSING_TOKENS: frozenset[str] = frozenset({"", "nan", "na", "null"})


# ============================================================================
# DATASET
# ============================================================================

@dataclass
class Dataset:
    """Inputs, outputs, observation mask and per-column standardisation stats.

    ``X`` and ``Y`` hold standardised values when ``standardized`` is true;
    ``raw()`` maps them back with ``value·std + mean``.
    """

    X: np.ndarray
    Y: np.ndarray
    mask: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    standardized: bool = False
    x_names: list[str] = field(default_factory=list)
    y_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if np.isnan(self.X).any():
            raise ValueError("Inputs may not contain missing values.")
        if not self.x_names:
            self.x_names = [f"x{i + 1}" for i in range(self.X.shape[1])]
        if not self.y_names:
            self.y_names = [f"y{k + 1}" for k in range(self.Y.shape[1])]

    @classmethod
    def from_arrays(
        cls,
        X: np.ndarray,
        Y: np.ndarray,
        mask: Optional[np.ndarray] = None,
        **names: list[str],
    ) -> "Dataset":
        """Unstandardised dataset; the mask defaults to "not NaN"."""
        Y = np.asarray(Y, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        mask = ~np.isnan(Y) if mask is None else np.asarray(mask, dtype=bool)
        Y = np.where(mask, Y, np.nan)
        return cls(
            X=X, Y=Y, mask=mask,
            x_mean=np.zeros(X.shape[1]), x_std=np.ones(X.shape[1]),
            y_mean=np.zeros(Y.shape[1]), y_std=np.ones(Y.shape[1]),
            **names,
        )

    @property
    def n(self) -> int:
        return int(self.Y.shape[0])

    @property
    def d_x(self) -> int:
        return int(self.X.shape[1])

    @property
    def d_y(self) -> int:
        return int(self.Y.shape[1])

    def subset(self, idx: np.ndarray) -> "Dataset":
        return replace(self, X=self.X[idx], Y=self.Y[idx], mask=self.mask[idx])

    def raw(self) -> "Dataset":
        """The same data in original units."""
        if not self.standardized:
            return self
        return replace(
            self,
            X=self.X * self.x_std + self.x_mean,
            Y=self.Y * self.y_std + self.y_mean,
            x_mean=np.zeros(self.d_x), x_std=np.ones(self.d_x),
            y_mean=np.zeros(self.d_y), y_std=np.ones(self.d_y),
            standardized=False,
        )

    def to_tensors(self) -> TensorData:
        return TensorData.from_arrays(self.X, self.Y, self.mask)

    def to_frame(self) -> pd.DataFrame:
        cols = {name: self.X[:, i] for i, name in enumerate(self.x_names)}
        cols.update({name: self.Y[:, k] for k, name in enumerate(self.y_names)})
        return pd.DataFrame(cols)

    def stats(self) -> dict[str, list[float]]:
        """Standardisation statistics as JSON-ready lists."""
        return {
            "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean.tolist(), "y_std": self.y_std.tolist(),
        }


# ============================================================================
# SYNTHETIC DATA
# ============================================================================

def gen_synthetic(cfg: SynthConfig) -> Dataset:
    """Inputs uniform in the unit ball, outputs cos(4‖x‖) + σ₀·ε in every dimension."""
    rng = np.random.default_rng(cfg.seed)
    direction = rng.standard_normal((cfg.n, cfg.input_dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(size=(cfg.n, 1)) ** (1.0 / cfg.input_dim)
    X = direction * radius
    clean = np.cos(4.0 * np.linalg.norm(X, axis=1, keepdims=True))
    Y = np.repeat(clean, cfg.output_dim, axis=1) + cfg.noise * rng.standard_normal((cfg.n, cfg.output_dim))
    logger.info("Generated synthetic data: N=%d, D_X=%d, D_Y=%d", cfg.n, cfg.input_dim, cfg.output_dim)
    return Dataset.from_arrays(X, Y)


# ============================================================================
# CSV
# ============================================================================

def _parse_cell(cell: str) -> float:
    """Exact decimal-to-fp64 conversion; NaN for anything unparsable."""
    try:
        return float(cell)
    except ValueError:
        return np.nan


def load_csv(path: str | Path, d_x: int) -> Dataset:
    """Read a headed CSV whose first ``d_x`` columns are inputs.

    Empty cells or ``nan`` in output columns become masked entries.

    Raises:
        ValueError: On ragged rows, non-numeric cells, missing inputs, or
                    ``d_x`` ≥ the number of columns.
    """
    path = Path(path)
    if not path.exists():
        raise ValueError(f"Data file not found: '{path}'.")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as exc:
        raise ValueError(f"Ragged rows in '{path}': {exc}") from exc

    if not 0 <= d_x < raw.shape[1]:
        raise ValueError(f"D_X={d_x} must be smaller than the {raw.shape[1]} columns of '{path}'.")
    if raw.isna().any().any():
        row = int(np.where(raw.isna().any(axis=1))[0][0]) + 2
        raise ValueError(f"Ragged row {row} in '{path}'.")

    text = raw.apply(lambda col: col.str.strip())
    missing = text.apply(lambda col: col.str.lower().isin(MISSING_TOKENS))
    values = text.apply(lambda col: col.map(_parse_cell))
    bad = values.isna() & ~missing
    if bad.any().any():
        r, c = np.argwhere(bad.to_numpy())[0]
        raise ValueError(f"Non-numeric cell {text.iat[r, c]!r} at row {r + 2}, column '{raw.columns[c]}'.")
    if missing.iloc[:, :d_x].any().any():
        raise ValueError(f"Missing input values in '{path}'.")

    arr = values.to_numpy(dtype=np.float64)
    ds = Dataset.from_arrays(
        arr[:, :d_x], arr[:, d_x:],
        x_names=list(raw.columns[:d_x]), y_names=list(raw.columns[d_x:]),
    )
    logger.info("Loaded %s: N=%d, D_X=%d, D_Y=%d, %d missing outputs",
                path.name, ds.n, ds.d_x, ds.d_y, int((~ds.mask).sum()))
    return ds


def write_csv(ds: Dataset, path: str | Path) -> Path:
    """Write ``ds`` (inputs then outputs) with shortest round-trip float text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.to_frame().to_csv(path, index=False, na_rep="nan")
    return path


# ============================================================================
# SPLITS AND STANDARDISATION
# ============================================================================

def _column_stats(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if A.shape[1] == 0:
        return np.zeros(0), np.ones(0)
    with np.errstate(invalid="ignore"):
        mean = np.nan_to_num(np.nanmean(A, axis=0), nan=0.0)
        std = np.nan_to_num(np.nanstd(A, axis=0), nan=0.0)
    return mean, np.where(std > 0, std, 1.0)


def standardize_with(ds: Dataset, ref: Dataset) -> Dataset:
    """Standardise ``ds`` (in original units) with ``ref``'s statistics."""
    return replace(
        ds,
        X=(ds.X - ref.x_mean) / ref.x_std,
        Y=(ds.Y - ref.y_mean) / ref.y_std,
        x_mean=ref.x_mean, x_std=ref.x_std, y_mean=ref.y_mean, y_std=ref.y_std,
        standardized=True,
    )


def split(
    ds: Dataset,
    test_fraction: float,
    seed: int,
    standardize: bool = True,
) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split; statistics come from the training part only.

    Raises:
        ValueError: If the fraction is outside (0, 1) or a part would be empty.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}.")
    ds = ds.raw()
    n_test = int(round(ds.n * test_fraction))
    if n_test < 1 or n_test > ds.n - 1:
        raise ValueError(f"Split of N={ds.n} with fraction {test_fraction} leaves an empty part.")
    perm = np.random.default_rng(seed).permutation(ds.n)
    train, test = ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))
    if not standardize:
        return train, test

    x_mean, x_std = _column_stats(train.X)
    y_mean, y_std = _column_stats(train.Y)
    ref = replace(train, x_mean=x_mean, x_std=x_std, y_mean=y_mean, y_std=y_std)
    return standardize_with(train, ref), standardize_with(test, ref)


# ============================================================================
# MASKS AND UNSUPERVISED VIEW
# ============================================================================

def mask_outputs(ds: Dataset, missing_per_point: int, seed: int) -> Dataset:
    """Hide exactly ``missing_per_point`` random output dimensions of every point.

    Raises:
        ValueError: If ``missing_per_point`` is not in [0, D_Y).
    """
    if not 0 <= missing_per_point < ds.d_y:
        raise ValueError(f"missing_per_point must lie in [0, {ds.d_y}), got {missing_per_point}.")
    if missing_per_point == 0:
        return ds
    rng = np.random.default_rng(seed)
    order = np.argsort(rng.uniform(size=(ds.n, ds.d_y)), axis=1)
    hidden = np.zeros_like(ds.mask)
    np.put_along_axis(hidden, order[:, :missing_per_point], True, axis=1)
    mask = ds.mask & ~hidden
    return replace(ds, Y=np.where(mask, ds.Y, np.nan), mask=mask)


def concat_unsupervised(ds: Dataset) -> Dataset:
    """Move the inputs into the outputs: Y ← [X | Y], X ← empty.

    Raises:
        ValueError: If the dataset has no inputs left.
    """
    if ds.d_x == 0:
        raise ValueError("Dataset has no inputs to concatenate (already unsupervised?).")
    return Dataset(
        X=np.zeros((ds.n, 0)),
        Y=np.hstack([ds.X, ds.Y]),
        mask=np.hstack([np.ones((ds.n, ds.d_x), dtype=bool), ds.mask]),
        x_mean=np.zeros(0), x_std=np.ones(0),
        y_mean=np.concatenate([ds.x_mean, ds.y_mean]),
        y_std=np.concatenate([ds.x_std, ds.y_std]),
        standardized=ds.standardized,
        x_names=[],
        y_names=[*ds.x_names, *ds.y_names],
    )
