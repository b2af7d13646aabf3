"""
Pydantic models for configuration validation.

Every user-settable value (model variant and sizes, training protocol,
evaluation estimator, synthetic data, CSV handling) is funnelled through
these models *before* any tensor is allocated.  This gives:

  * Type coercion  (e.g. "250" → 250 for integers, "N-MOGP" → Variant.N_MOGP)
  * Early validation  with clear, actionable error messages
  * One JSON run-configuration file using the familiar size names
    (``D_X``, ``D_Y``, ``L``, ``L_prime``, ``D_H``, ``N_ind``)

Pydantic v2 is required (``pydantic>=2.0``).
"""

from __future__ import annotations

import math
import re
from enum import Enum
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# ── Regex constants ───────────────────────────────────────────────────────────

# Safe run/directory name: alphanumeric, underscores, hyphens
_SAFE_NAME_RE = re.compile(r"[^\w\-]")


# ── Private helpers ───────────────────────────────────────────────────────────

def sanitize_name(value: str) -> str:
    """Replace any character that is not alphanumeric, underscore, or hyphen."""
    return _SAFE_NAME_RE.sub("_", value.strip())


# ── Enumerations ──────────────────────────────────────────────────────────────

class Variant(str, Enum):
    """The seven supervised model families."""

    MOGP = "MOGP"
    GPRN = "GPRN"
    DGP = "DGP"
    SBGPRN = "SBGPRN"
    N_MOGP = "N-MOGP"
    N_SBGPRN = "N-SBGPRN"
    N_DGP = "N-DGP"

    @property
    def is_neural(self) -> bool:
        return self in (Variant.N_MOGP, Variant.N_SBGPRN, Variant.N_DGP)

    @property
    def is_deep(self) -> bool:
        return self in (Variant.DGP, Variant.N_DGP)

    @property
    def uses_mixnet(self) -> bool:
        return self in (Variant.SBGPRN, Variant.N_SBGPRN)

    @property
    def supports_analytic(self) -> bool:
        return not self.is_deep

    @property
    def supports_latent_inputs(self) -> bool:
        return self in (Variant.MOGP, Variant.N_MOGP, Variant.N_SBGPRN)


class EllMode(str, Enum):
    """How the expected log likelihood is evaluated."""

    SGVB = "sgvb"
    ANALYTIC = "analytic"


class ActivationKind(str, Enum):
    """Point-wise non-linearities with closed-form Gaussian means."""

    RELU = "relu"
    LEAKY = "leaky"
    ERF = "erf"
    SHERF = "sherf"


# ── Model description ─────────────────────────────────────────────────────────

_DEFAULT_ACTIVATION: dict[Variant, ActivationKind] = {
    Variant.N_MOGP: ActivationKind.SHERF,
    Variant.N_SBGPRN: ActivationKind.LEAKY,
    Variant.N_DGP: ActivationKind.ERF,
}

_DEFAULT_LVM_ACTIVATION: dict[Variant, ActivationKind] = {
    Variant.N_MOGP: ActivationKind.LEAKY,
    Variant.N_SBGPRN: ActivationKind.RELU,
}


class ModelSpec(BaseModel):
    """Validated description of one model variant.

    Sizes left unset are filled by :meth:`resolve` once the data dimensions
    are known, following the regression protocol (L = ⌈D_Y/2⌉,
    L′ = ⌈¾·D_Y⌉, D_H = 2·D_Y or D_Y) or, for latent-input models, the
    unsupervised protocol (latent D_X = 4, L = 4, D_H = 14 / 7, N_ind = 200).
    """

    model_config = ConfigDict(populate_by_name=True, extra="forbid", use_enum_values=False)

    variant: Variant = Field(..., description="Model family, e.g. 'N-MOGP'.")

    # ── Dimensions ────────────────────────────────────────────────────────────
    d_x: Optional[int] = Field(default=None, ge=0, alias="D_X", description="Observed input dimension.")
    d_y: Optional[int] = Field(default=None, ge=1, alias="D_Y", description="Output dimension.")
    n_latent: Optional[int] = Field(default=None, ge=1, alias="L", description="Number of layer-1 GPs.")
    n_latent_layer2: Optional[int] = Field(
        default=None, ge=1, alias="L_prime", description="Number of layer-2 GPs (DGP only)."
    )
    n_hidden: Optional[int] = Field(default=None, ge=1, alias="D_H", description="Hidden units (neural variants).")

    # ── Likelihood ────────────────────────────────────────────────────────────
    activation: Optional[ActivationKind] = Field(default=None, description="Hidden-layer non-linearity.")
    leaky_slope: float = Field(default=0.35, gt=0.0, lt=1.0, description="Negative-side slope of leaky ReLU.")
    l2_strength: float = Field(default=1e-4, ge=0.0, description="L2 coefficient on M̃ and MixNet weights.")

    # ── GP prior ──────────────────────────────────────────────────────────────
    n_inducing: Optional[int] = Field(default=None, ge=1, alias="N_ind", description="Inducing points per layer-1 GP.")
    n_inducing_layer2: Optional[int] = Field(
        default=None, ge=1, alias="N_ind_layer2", description="Inducing points per layer-2 GP."
    )
    ard: Optional[bool] = Field(default=None, description="Separate lengthscale per input dimension.")
    deep_kernel: bool = Field(default=False, description="Warp layer-1 inputs with a tanh network.")
    train_inducing: bool = Field(default=True, description="Optimise inducing locations Z.")
    jitter: float = Field(default=1e-6, gt=0.0, description="Base Cholesky jitter.")

    # ── Latent inputs ─────────────────────────────────────────────────────────
    latent_inputs: bool = Field(default=False, description="Unsupervised (latent-input) model.")
    latent_dim: Optional[int] = Field(default=None, ge=1, alias="latent_D_X", description="Latent input dimension.")

    # ── Inference ─────────────────────────────────────────────────────────────
    ell_mode: Optional[EllMode] = Field(default=None, description="'sgvb' or 'analytic'.")
    n_samples: Optional[int] = Field(default=None, ge=1, description="SGVB samples per step.")
    quad_order: int = Field(default=100, ge=2, description="Gauss-Hermite order for activation moments.")

    # ── Validators ────────────────────────────────────────────────────────────

    @field_validator("variant", mode="before")
    @classmethod
    def parse_variant(cls, v: object) -> object:
        if isinstance(v, str):
            return v.strip().upper().replace("_", "-")
        return v

    @model_validator(mode="after")
    def check_consistency(self) -> "ModelSpec":
        """Reject combinations that the inference code does not support."""
        v = self.variant
        if self.ell_mode is EllMode.ANALYTIC and not v.supports_analytic:
            raise ValueError(
                f"{v.value} has no analytic expected log likelihood; use ell_mode='sgvb'."
            )
        if self.latent_inputs:
            if not v.supports_latent_inputs:
                raise ValueError(
                    f"Latent-input models are only provided for MOGP, N-MOGP and N-SBGPRN "
                    f"(got {v.value})."
                )
            if self.ell_mode is EllMode.SGVB:
                raise ValueError("Latent-input models train with analytic expected log likelihoods.")
        if self.is_resolved:
            if v.is_deep and self.n_latent_layer2 is None:
                raise ValueError(f"{v.value} requires L_prime ≥ 1.")
            if v.is_neural and self.n_hidden is None:
                raise ValueError(f"{v.value} requires D_H ≥ 1.")
        return self

    # ── Resolution ────────────────────────────────────────────────────────────

    @property
    def is_resolved(self) -> bool:
        return self.d_y is not None and self.n_latent is not None and self.n_inducing is not None

    @property
    def input_dim(self) -> int:
        """Input dimension seen by the layer-1 GPs."""
        if self.latent_inputs:
            return int(self.latent_dim or 0)
        return int(self.d_x or 0)

    def resolve(self, d_x: int, d_y: int) -> "ModelSpec":
        """Return a copy with data dimensions set and every unset size filled in.

        Args:
            d_x: Number of observed input columns (0 for unsupervised data).
            d_y: Number of output columns.

        Returns:
            A fully specified :class:`ModelSpec`.
        """
        data = self.model_dump(exclude_unset=True)
        data.update(d_x=d_x, d_y=d_y)
        v, lvm = self.variant, self.latent_inputs

        defaults: dict[str, object] = {
            "n_latent": 4 if lvm else math.ceil(d_y / 2),
            "ard": not lvm,
            "ell_mode": EllMode.ANALYTIC if (lvm or v is Variant.GPRN) else EllMode.SGVB,
            "n_samples": 5 if v.is_deep else 250,
        }
        if lvm:
            defaults["latent_dim"] = 4
            defaults["n_inducing"] = 200
        else:
            defaults["n_inducing"] = 100 if v is Variant.GPRN else 400
        if v.is_deep:
            defaults["n_latent_layer2"] = math.ceil(0.75 * d_y)
            defaults["n_inducing_layer2"] = 100 if v is Variant.N_DGP else 400
        if v.is_neural:
            if lvm:
                defaults["n_hidden"] = 14 if v is Variant.N_MOGP else 7
                defaults["activation"] = _DEFAULT_LVM_ACTIVATION[v]
            else:
                defaults["n_hidden"] = d_y if v is Variant.N_SBGPRN else 2 * d_y
                defaults["activation"] = _DEFAULT_ACTIVATION[v]

        for key, value in defaults.items():
            if data.get(key) is None:
                data[key] = value
        return ModelSpec.model_validate(data)


# ── Training protocol ─────────────────────────────────────────────────────────

# Default datapoints per gradient step (doubled for the two-layer variants)
DEFAULT_MINIBATCH = 500


class TrainConfig(BaseModel):
    """Validated training protocol (epochs, minibatching, restarts, schedule)."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=250, ge=0, description="Total training epochs.")
    minibatch_size: Optional[int] = Field(
        default=None, ge=1, description="Datapoints per gradient step (None: per-variant default)."
    )
    lr: float = Field(default=0.02, ge=0.01, le=0.05, description="Initial Adam learning rate.")
    lr_milestones: List[int] = Field(default_factory=lambda: [125, 200], description="Epochs where lr decays.")
    lr_factor: float = Field(default=0.5, gt=0.0, le=1.0, description="Multiplicative decay per milestone.")
    restarts: int = Field(default=5, ge=1, description="Random initialisations screened.")
    screening_epochs: int = Field(default=10, ge=0, description="Epochs each restart trains before selection.")
    kl_warmup_epochs: int = Field(default=0, ge=0, description="Epochs of linear KL annealing.")
    seed: int = Field(default=0, description="Master seed.")
    show_progress: bool = Field(default=True, description="Show a tqdm bar when attached to a TTY.")

    @field_validator("lr_milestones")
    @classmethod
    def milestones_sorted(cls, v: List[int]) -> List[int]:
        if any(m < 0 for m in v):
            raise ValueError("lr milestones must be non-negative epochs.")
        return sorted(v)

    def batch_size_for(self, variant: Variant) -> int:
        """Explicit minibatch size, else 500 (1000 for the two-layer variants)."""
        if self.minibatch_size is not None:
            return self.minibatch_size
        return 2 * DEFAULT_MINIBATCH if variant.is_deep else DEFAULT_MINIBATCH


class EvalConfig(BaseModel):
    """Validated configuration of the nested test log-likelihood estimator."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    n_outer: int = Field(default=25, ge=1, alias="N_outer")
    n_inner: int = Field(default=50, ge=1, alias="N_inner")
    seed: int = Field(default=0)
    latent_fit_steps: int = Field(default=300, ge=0, description="Adam steps fitting q(X*).")
    latent_fit_lr: float = Field(default=0.02, gt=0.0, description="Learning rate fitting q(X*).")
    destandardize: bool = Field(default=False, description="Report metrics in original units.")


class SynthConfig(BaseModel):
    """Validated configuration of the unit-ball synthetic dataset."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    n: int = Field(default=1000, ge=1, alias="N")
    input_dim: int = Field(default=5, ge=1)
    output_dim: int = Field(default=8, ge=1)
    noise: float = Field(default=0.1, ge=0.0, description="Observation noise σ₀.")
    seed: int = Field(default=0)


class DataConfig(BaseModel):
    """How a CSV is interpreted and split."""

    model_config = ConfigDict(extra="forbid")

    d_x: Optional[int] = Field(default=None, ge=1, description="Number of leading input columns.")
    test_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    split_seed: int = Field(default=0)
    missing_per_point: int = Field(default=0, ge=0, description="Outputs masked per training point.")
    standardize: bool = Field(default=True, description="Standardise with train-split statistics.")


class RunConfig(BaseModel):
    """One JSON run-configuration file: model + train + eval + data sections."""

    model_config = ConfigDict(extra="forbid")

    model: ModelSpec
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        """Load and validate a JSON configuration file.

        Raises:
            ValueError: If the file does not exist.
            pydantic.ValidationError: If any field is invalid.
        """
        path = Path(path)
        if not path.exists():
            raise ValueError(f"Configuration file not found: '{path}'.")
        return cls.model_validate_json(path.read_text(encoding="utf-8"))
