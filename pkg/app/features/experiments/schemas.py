from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, model_validator

from app.features.diagnostics.schemas import MetricRow, SlopeFit
from app.features.potentials.schemas import PotentialConfig
from app.infrastructure.config import settings

ExperimentKind = Literal[
    "bias_sweep",
    "strong_error_sweep",
    "contraction",
    "crossing_scaling",
    "increment_scaling",
    "moment_stability",
    "oracle_checks",
]

# --- Input Schemas ---


class BurnInPolicy(BaseModel):
    """How many steps a chain runs before it is measured.

    ``auto`` picks ``n = ceil(log(D0 / (tolerance * eps)) / (mu gamma))`` so the
    contraction term ``D0 exp(-mu gamma n)`` sits below ``tolerance`` times the
    expected bias ``eps``; ``fixed`` uses ``steps`` and checks the same bound.
    """

    model_config = ConfigDict(extra="forbid")

    mode: Literal["auto", "fixed", "none"] = "auto"
    steps: Optional[int] = Field(default=None, ge=0)
    diameter: Optional[PositiveFloat] = None  # D0; defaults to a spread estimate
    bias_scale: Optional[PositiveFloat] = None  # eps; defaults to gamma**rate
    tolerance: PositiveFloat = 1e-4
    max_steps: int = Field(default=2_000_000, ge=1)

    @model_validator(mode="after")
    def check_steps(self):
        if self.mode == "fixed" and self.steps is None:
            raise ValueError("fixed burn-in needs `steps`")
        return self


class ExperimentPlan(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1, pattern=r"^[A-Za-z0-9_.-]+$")
    kind: ExperimentKind
    potential: str
    # every kind but oracle_checks needs at least one stepsize
    gammas: List[PositiveFloat] = []
    n_chains: int = Field(default=1000, ge=2)
    seed: Optional[int] = Field(default=None, ge=0, lt=2**64)
    init: Optional[List[float]] = None
    burn_in: BurnInPolicy = BurnInPolicy()

    # verdict band on the fitted slope (or rate, for contraction)
    slope_min: Optional[float] = None
    slope_max: Optional[float] = None
    # the slope CI must not contain this value (e.g. 0.25 to tell 1/2 from 1/4)
    exclude_slope: Optional[float] = None
    override_stepsize_guard: bool = False

    # bias_sweep
    wasserstein_p: List[float] = [1.0, 2.0]
    allow_approximate_reference: bool = True
    reference_factor: int = Field(default=10, ge=1)
    n_batches: int = Field(default=10, ge=2)
    # strong_error_sweep
    refinement: int = Field(default=settings.REFERENCE_REFINEMENT, ge=2)
    check_refinement: int = Field(default=settings.CONSISTENCY_REFINEMENT, ge=2)
    check_gamma: Optional[PositiveFloat] = None
    max_consistency_ratio: PositiveFloat = 0.1
    horizon: PositiveFloat = 2.0
    fit_metric: Literal["mean_sup", "sup_l2"] = "mean_sup"
    # contraction
    init_b: Optional[List[float]] = None
    decay: PositiveFloat = 3.0  # fit over n <= decay / (mu gamma)
    rate_fraction: PositiveFloat = 0.9
    # relative tolerance against the closed-form rate, where one exists
    exact_rate_tolerance: Optional[PositiveFloat] = None
    # crossing_scaling, increment_scaling
    window: PositiveFloat = 1.0
    dense_substeps: int = Field(default=settings.DENSE_SUBSTEPS, ge=1)
    n_lags: int = Field(default=5, ge=4)
    # moment_stability
    horizon_factor: PositiveFloat = 10.0
    n_windows: int = Field(default=10, ge=3)
    trend_significance: PositiveFloat = 0.01
    # oracle_checks
    n_samples: int = Field(default=100_000, ge=1)
    n_instances: int = Field(default=1000, ge=1)
    max_points: int = Field(default=6, ge=1, le=8)
    normalizer_tolerance: PositiveFloat = 1e-8
    pairing_tolerance: PositiveFloat = 1e-12

    @model_validator(mode="after")
    def check_grid(self):
        if self.kind == "oracle_checks":
            if self.gammas:
                raise ValueError("oracle_checks plans take no `gammas`")
        elif not self.gammas:
            raise ValueError(f"{self.kind} plans need at least one stepsize in `gammas`")
        if any(b >= a for a, b in zip(self.gammas, self.gammas[1:])):
            raise ValueError("gammas must be strictly decreasing")
        if self.slope_min is not None and self.slope_max is not None:
            if self.slope_min > self.slope_max:
                raise ValueError("slope_min must not exceed slope_max")
        if self.check_refinement <= self.refinement:
            raise ValueError("check_refinement must exceed refinement")
        if self.kind == "crossing_scaling" and self.dense_substeps < 8:
            raise ValueError("crossing statistics need dense_substeps >= 8")
        if any(p < 1 for p in self.wasserstein_p):
            raise ValueError("wasserstein_p entries must be >= 1")
        return self


class SuiteConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=settings.DEFAULT_SEED, ge=0, lt=2**64)
    potentials: Dict[str, PotentialConfig] = {}
    experiments: List[ExperimentPlan] = []

    @model_validator(mode="after")
    def check_ids(self):
        ids = [plan.id for plan in self.experiments]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ValueError(f"duplicate experiment ids: {duplicates}")
        return self


# --- Output Schemas ---


class Provenance(BaseModel):
    seed: int
    n_chains: int
    commit: str
    wall_time_s: float
    input_hash: str
    cached: bool = False


class ExperimentReport(BaseModel):
    experiment_id: str
    kind: ExperimentKind
    potential: str
    rows: List[MetricRow]
    fit: Optional[SlopeFit] = None
    slope_min: Optional[float] = None
    slope_max: Optional[float] = None
    verdict: bool
    detail: str
    provenance: Optional[Provenance] = None


class BiasReport(ExperimentReport):
    """Per-stepsize error estimates, their log-log slope, and the verdict on it."""

    fit: SlopeFit


class SummaryRow(BaseModel):
    experiment_id: str
    kind: str
    potential: str
    slope: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]
    slope_min: Optional[float]
    slope_max: Optional[float]
    verdict: bool
    detail: str

