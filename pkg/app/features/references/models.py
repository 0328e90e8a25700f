from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PiecewiseGaussianMixture:
    """``exp(-beta U)`` for the 1D Laplace-Gaussian posterior, normalized.

    On the ``k + 1`` intervals cut by the breakpoints the l1 term is affine, so
    the target restricted to interval ``i`` is a Gaussian with mean ``means[i]``
    and the common standard deviation ``sd``, truncated to ``(lower[i], upper[i])``.
    Masses are kept in log space.
    """

    breakpoints: np.ndarray  # (k,)
    means: np.ndarray  # (k + 1,)
    sd: float
    log_constants: np.ndarray  # (k + 1,) beta * U - beta * (t - mean)^2 / (2 sigma^2)
    log_masses: np.ndarray  # (k + 1,) log of the unnormalized interval masses
    log_normalizer: float
    beta: float

    @property
    def n_intervals(self) -> int:
        return self.means.size

    @property
    def lower(self) -> np.ndarray:
        return np.r_[-np.inf, self.breakpoints]

    @property
    def upper(self) -> np.ndarray:
        return np.r_[self.breakpoints, np.inf]

    @property
    def alpha(self) -> np.ndarray:
        """Standardized lower truncation points."""
        return (self.lower - self.means) / self.sd

    @property
    def beta_std(self) -> np.ndarray:
        """Standardized upper truncation points."""
        return (self.upper - self.means) / self.sd

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_masses - self.log_normalizer)

    @property
    def normalizer(self) -> float:
        return float(np.exp(self.log_normalizer))

    def interval_of(self, theta: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.breakpoints, theta, side="right")


@dataclass(frozen=True)
class GaussianTarget:
    """``N(center, I / (curvature beta))``, the exact target of the quadratic potential."""

    center: np.ndarray  # (d,)
    sd: float


@dataclass
class ApproximateReference:
    """Terminal states of a long fine-stepsize ULA ensemble."""

    points: np.ndarray  # (n, d)
    gamma: float
    n_steps: int
    seed: int
