from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class EmpiricalMeasure:
    """Weighted point cloud; uniform weights when ``weights`` is omitted."""

    points: np.ndarray  # (n, d)
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[0] == 0:
            raise ValueError("an empirical measure needs a non-empty (n, d) array")
        self.points = points
        if self.weights is not None:
            weights = np.asarray(self.weights, dtype=np.float64)
            if weights.shape != (points.shape[0],):
                raise ValueError("weights must have one entry per point")
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
                raise ValueError("weights must be non-negative and sum to 1")
            self.weights = weights

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    @property
    def is_uniform(self) -> bool:
        return self.weights is None

    def resolved_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.n, 1.0 / self.n)
        return self.weights

    def project(self, direction: np.ndarray) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.points @ direction, self.weights)


@dataclass
class PathWindow:
    """Continuous interpolation sampled on a sub-grid of resolution ``gamma / K``.

    Row ``r`` is one grid step: ``anchors[r]`` is its left grid state and
    ``substates[r, i]`` the interpolation at ``kappa + i gamma / K``.
    Rows may mix chains and steps.
    """

    anchors: np.ndarray  # (m, d)
    substates: np.ndarray  # (m, K, d)
    gamma: float

    @property
    def sub_resolution(self) -> int:
        return self.substates.shape[1]

    @property
    def n_times(self) -> int:
        return self.substates.shape[0] * self.substates.shape[1]


@dataclass
class CrossingRecord:
    """Sub-grid counts of the crossing event; windows merge by adding counts."""

    n_times: int = 0
    n_crossing: int = 0
    per_surface: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def fraction(self) -> float:
        return self.n_crossing / self.n_times if self.n_times else 0.0

    def merge(self, other: "CrossingRecord") -> "CrossingRecord":
        if self.per_surface.size == 0:
            surfaces = other.per_surface.copy()
        elif other.per_surface.size == 0:
            surfaces = self.per_surface.copy()
        else:
            surfaces = self.per_surface + other.per_surface
        return CrossingRecord(
            n_times=self.n_times + other.n_times,
            n_crossing=self.n_crossing + other.n_crossing,
            per_surface=surfaces,
        )
