from typing import Annotated, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, model_validator

# --- Input Schemas ---


class DeclaredConstants(BaseModel):
    """Constants a config may state; they must be at least as conservative as derived."""

    mu: Optional[PositiveFloat] = None
    lipschitz_L: Optional[PositiveFloat] = None
    growth_m: Optional[float] = Field(default=None, ge=0)
    growth_L: Optional[float] = Field(default=None, ge=0)


class _PotentialConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta: PositiveFloat = 1.0
    declared: Optional[DeclaredConstants] = None


class QuadraticConfig(_PotentialConfig):
    kind: Literal["quadratic"]
    dimension: int = Field(default=1, ge=1)
    curvature: PositiveFloat = 1.0
    center: Optional[List[float]] = None

    @model_validator(mode="after")
    def check_center(self):
        if self.center is not None and len(self.center) != self.dimension:
            raise ValueError("center must have `dimension` entries")
        return self


class LaplaceGaussian1DConfig(_PotentialConfig):
    kind: Literal["laplace_gaussian_1d"]
    observations: List[float] = []
    scale: PositiveFloat = 1.0
    prior_mean: float = 0.0
    prior_sd: PositiveFloat = 1.0
    l1_weight: Optional[PositiveFloat] = None


class LaplaceGaussianNDConfig(_PotentialConfig):
    kind: Literal["laplace_gaussian_nd"]
    observations: List[List[float]] = Field(min_length=1)
    scale: PositiveFloat = 1.0
    prior_mean: Optional[List[float]] = None
    prior_sd: PositiveFloat = 1.0
    precision: Optional[List[List[float]]] = None
    l1_weight: Optional[PositiveFloat] = None

    @model_validator(mode="after")
    def check_shapes(self):
        dimension = len(self.observations[0])
        if dimension < 1 or any(len(y) != dimension for y in self.observations):
            raise ValueError("observations must all have the same positive dimension")
        if self.prior_mean is not None and len(self.prior_mean) != dimension:
            raise ValueError("prior_mean must match the observations' dimension")
        if self.precision is not None:
            matrix = np.asarray(self.precision, dtype=float)
            if matrix.shape != (dimension, dimension):
                raise ValueError("precision must be a d x d matrix")
            if not np.allclose(matrix, matrix.T):
                raise ValueError("precision matrix must be symmetric")
            if np.linalg.eigvalsh(matrix)[0] <= 0:
                raise ValueError("precision matrix must be positive definite")
        return self


class BallPenaltyConfig(_PotentialConfig):
    kind: Literal["ball_penalty"]
    centers: List[List[float]] = Field(min_length=1)
    radii: List[PositiveFloat] = Field(min_length=1)
    penalty: PositiveFloat = 1.0
    curvature: PositiveFloat = 1.0
    anchor: Optional[List[float]] = None

    @model_validator(mode="after")
    def check_shapes(self):
        if len(self.centers) != len(self.radii):
            raise ValueError("need one radius per center")
        dimension = len(self.centers[0])
        if any(len(c) != dimension for c in self.centers):
            raise ValueError("centers must all have the same dimension")
        if self.anchor is not None and len(self.anchor) != dimension:
            raise ValueError("anchor must match the centers' dimension")
        return self


PotentialConfig = Annotated[
    Union[
        QuadraticConfig,
        LaplaceGaussian1DConfig,
        LaplaceGaussianNDConfig,
        BallPenaltyConfig,
    ],
    Field(discriminator="kind"),
]


class PotentialFile(BaseModel):
    """A standalone potential definition file."""

    potential: PotentialConfig


# --- Output Schemas ---


class MonotonicityReport(BaseModel):
    min_ratio: float
    mu: float
    n_pairs: int
    passed: bool


class GrowthReport(BaseModel):
    max_ratio: float
    growth_m: float
    growth_L: float
    n_samples: int
    radius: float
    all_finite: bool
    passed: bool


class StepsizeGuard(BaseModel):
    constant_L: float
    convergence_bound: float  # mu / (2 L^2)
    lipschitz_bound: float  # 1 / (mu + L)


class PotentialSummary(BaseModel):
    name: str
    kind: str
    dimension: int
    beta: float
    mu: float
    lipschitz_L: Optional[float]
    growth_m: float
    growth_L: float
    regularity_class: str
    n_surfaces: int
    delta: Optional[float]
    bounding_radius: Optional[float]
    guard: StepsizeGuard
