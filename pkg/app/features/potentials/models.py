"""Potentials with almost-everywhere gradients and the geometry of their jumps.

A potential ``U`` carries the constants the sampler's guarantees attach to:
strong monotonicity ``mu``, a piecewise Lipschitz constant (when the gradient is
Lipschitz between discontinuity surfaces), and linear growth constants
``|grad U(x)| <= growth_m + growth_L |x|``.
"""

import abc
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Union

import numpy as np

from app.infrastructure.errors import OnDiscontinuity

# Fallback tubular radius when a geometry has no pair of surfaces to separate.
ISOLATED_SURFACE_DELTA = 1.0 / 3.0


class RegularityClass(str, Enum):
    PIECEWISE_LIPSCHITZ = "PiecewiseLipschitz"
    GROWTH_ONLY = "GrowthOnly"


def as_points(x, dimension: int) -> tuple[np.ndarray, bool]:
    """Coerce ``x`` to shape ``(n, dimension)``; the flag says a single point was given."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != dimension:
        raise ValueError(
            f"expected points of dimension {dimension}, got shape {np.shape(x)}"
        )
    return arr, single


# --- Surfaces ---


@dataclass(frozen=True)
class PointSurface:
    """A point ``{y}`` on the real line, enclosing ``M = (-inf, y)``."""

    location: float

    @property
    def curvature_radius(self) -> float:
        return math.inf

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return points[..., 0] - self.location

    def extent(self) -> float:
        return abs(self.location)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.full((n, 1), self.location)

    def separation(self, other: "PointSurface") -> float:
        return abs(self.location - other.location)


@dataclass(frozen=True)
class SphereSurface:
    """Sphere ``|x - center| = radius``, enclosing the open ball."""

    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    @property
    def curvature_radius(self) -> float:
        return self.radius

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - np.asarray(self.center), axis=-1) - self.radius

    def extent(self) -> float:
        return float(np.linalg.norm(self.center)) + self.radius

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        directions = rng.standard_normal((n, len(self.center)))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * directions

    def separation(self, other: "SphereSurface") -> float:
        gap = float(np.linalg.norm(np.subtract(self.center, other.center)))
        if gap >= self.radius + other.radius:
            return gap - self.radius - other.radius
        # nested spheres
        return abs(self.radius - other.radius) - gap


Surface = Union[PointSurface, SphereSurface]


@dataclass(frozen=True)
class RegionGeometry:
    """Discontinuity surfaces, the regions they cut out, and their neighbourhoods."""

    dimension: int
    surfaces: tuple[Surface, ...]
    delta: float
    bounding_radius: float

    @classmethod
    def from_surfaces(
        cls, surfaces: Sequence[Surface], dimension: int
    ) -> "RegionGeometry":
        surfaces = tuple(surfaces)
        if not surfaces:
            raise ValueError("a region geometry needs at least one surface")
        kinds = {type(s) for s in surfaces}
        if len(kinds) > 1:
            raise ValueError("mixing point and sphere surfaces is not supported")
        if isinstance(surfaces[0], PointSurface) and dimension != 1:
            raise ValueError("point surfaces are only hypersurfaces in dimension 1")
        candidates = [s.curvature_radius / 3.0 for s in surfaces]
        for i, first in enumerate(surfaces):
            for second in surfaces[i + 1 :]:
                gap = first.separation(second)
                if gap <= 0:
                    raise ValueError(f"surfaces {first} and {second} intersect")
                candidates.append(gap / 3.0)
        delta = min(candidates)
        if math.isinf(delta):
            delta = ISOLATED_SURFACE_DELTA
        radius = max(s.extent() for s in surfaces) + 2.0 * delta
        return cls(
            dimension=dimension,
            surfaces=surfaces,
            delta=delta,
            bounding_radius=radius,
        )

    @property
    def n_surfaces(self) -> int:
        return len(self.surfaces)

    @property
    def is_interval_partition(self) -> bool:
        return isinstance(self.surfaces[0], PointSurface)

    def signed_distances(self, points: np.ndarray) -> np.ndarray:
        """Array ``(..., n_surfaces)`` of ``rho_j``."""
        return np.stack([s.signed_distance(points) for s in self.surfaces], axis=-1)

    def on_surface(self, points: np.ndarray) -> np.ndarray:
        return np.any(self.signed_distances(points) == 0.0, axis=-1)

    def labels(self, points: np.ndarray) -> np.ndarray:
        """Region index for every point, without checking for surface hits.

        Points on the line are labelled by how many surfaces lie to their left
        (interval ``0..k``). Elsewhere the label is the bitmask of the balls a
        point lies inside.
        """
        rho = self.signed_distances(points)
        if self.is_interval_partition:
            return np.count_nonzero(rho > 0, axis=-1)
        weights = 1 << np.arange(self.n_surfaces, dtype=np.int64)
        return (rho < 0).astype(np.int64) @ weights


# --- Potentials ---


class PotentialSpec(abc.ABC):
    """A potential ``U`` on ``R^d`` with its regularity metadata."""

    kind: str = "custom"

    def __init__(
        self,
        *,
        dimension: int,
        mu: float,
        growth_m: float,
        growth_L: float,
        regularity_class: RegularityClass,
        lipschitz_L: Optional[float] = None,
        beta: float = 1.0,
        geometry: Optional[RegionGeometry] = None,
        name: Optional[str] = None,
    ):
        if dimension < 1:
            raise ValueError("dimension must be a positive integer")
        if mu <= 0 or beta <= 0:
            raise ValueError("mu and beta must be positive")
        if growth_m < 0 or growth_L < 0:
            raise ValueError("growth constants must be non-negative")
        if regularity_class is RegularityClass.PIECEWISE_LIPSCHITZ and not lipschitz_L:
            raise ValueError("piecewise Lipschitz potentials need lipschitz_L")
        if geometry is not None and geometry.dimension != dimension:
            raise ValueError("geometry dimension does not match the potential")
        self.dimension = dimension
        self.mu = float(mu)
        self.growth_m = float(growth_m)
        self.growth_L = float(growth_L)
        self.regularity_class = RegularityClass(regularity_class)
        self.lipschitz_L = None if lipschitz_L is None else float(lipschitz_L)
        self.beta = float(beta)
        self.geometry = geometry
        self.name = name or self.kind

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(name={self.name!r}, d={self.dimension}, "
            f"mu={self.mu:g}, class={self.regularity_class.value})"
        )

    @property
    def guard_constant(self) -> float:
        """The ``L`` entering the stepsize guard ``mu / (2 L^2)``."""
        if self.regularity_class is RegularityClass.PIECEWISE_LIPSCHITZ:
            return self.lipschitz_L
        return self.growth_L

    def on_discontinuity(self, points: np.ndarray) -> np.ndarray:
        if self.geometry is None:
            return np.zeros(points.shape[0], dtype=bool)
        return self.geometry.on_surface(points)

    def gradient(self, x, tie_break: bool = False) -> np.ndarray:
        """``grad U`` at one point ``(d,)`` or a batch ``(n, d)``.

        With ``tie_break`` false, points exactly on a discontinuity raise
        :class:`OnDiscontinuity`; otherwise the bounded convention of
        :meth:`_gradient` (jump terms set to 0) is used.
        """
        points, single = as_points(x, self.dimension)
        if not tie_break:
            hits = self.on_discontinuity(points)
            if np.any(hits):
                raise OnDiscontinuity(
                    f"{self.name}: gradient undefined at {points[np.argmax(hits)]}"
                )
        grad = self._gradient(points)
        return grad[0] if single else grad

    def value(self, x) -> Union[float, np.ndarray]:
        points, single = as_points(x, self.dimension)
        values = self._value(points)
        return float(values[0]) if single else values

    @abc.abstractmethod
    def _gradient(self, points: np.ndarray) -> np.ndarray: ...

    def _value(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{self.name} does not define U itself")


class QuadraticPotential(PotentialSpec):
    """Smooth baseline ``U(x) = curvature * |x - center|^2 / 2``."""

    kind = "quadratic"

    def __init__(
        self,
        dimension: int = 1,
        curvature: float = 1.0,
        center: Optional[Sequence[float]] = None,
        beta: float = 1.0,
        name: Optional[str] = None,
    ):
        self.curvature = float(curvature)
        self.center = np.zeros(dimension) if center is None else np.asarray(center, float)
        self.center.setflags(write=False)
        super().__init__(
            dimension=dimension,
            mu=curvature,
            lipschitz_L=curvature,
            growth_m=curvature * float(np.linalg.norm(self.center)),
            growth_L=curvature,
            regularity_class=RegularityClass.PIECEWISE_LIPSCHITZ,
            beta=beta,
            name=name,
        )

    def _gradient(self, points):
        return self.curvature * (points - self.center)

    def _value(self, points):
        return 0.5 * self.curvature * np.sum((points - self.center) ** 2, axis=-1)


class LaplaceGaussianPosterior1D(PotentialSpec):
    """Posterior of a Gaussian prior under a Laplace likelihood, on the line.

    ``U(t) = w * sum_i |y_i - t| + (t - prior_mean)^2 / (2 prior_sd^2)``. The
    l1 weight ``w`` defaults to ``2 / b``; the displayed posterior density uses
    ``1 / b`` instead, so both readings are reachable through ``l1_weight``.
    """

    kind = "laplace_gaussian_1d"

    def __init__(
        self,
        observations: Sequence[float] = (),
        scale: float = 1.0,
        prior_mean: float = 0.0,
        prior_sd: float = 1.0,
        l1_weight: Optional[float] = None,
        beta: float = 1.0,
        name: Optional[str] = None,
    ):
        if scale <= 0 or prior_sd <= 0:
            raise ValueError("scale and prior_sd must be positive")
        self.observations = np.sort(np.asarray(observations, dtype=np.float64))
        self.observations.setflags(write=False)
        self.scale = float(scale)
        self.prior_mean = float(prior_mean)
        self.prior_sd = float(prior_sd)
        self.l1_weight = 2.0 / scale if l1_weight is None else float(l1_weight)
        precision = prior_sd**-2
        k = self.observations.size
        geometry = None
        if k:
            geometry = RegionGeometry.from_surfaces(
                [PointSurface(float(y)) for y in np.unique(self.observations)], 1
            )
        super().__init__(
            dimension=1,
            mu=precision,
            lipschitz_L=precision,
            growth_m=self.l1_weight * k + precision * abs(self.prior_mean),
            growth_L=precision,
            regularity_class=RegularityClass.PIECEWISE_LIPSCHITZ,
            beta=beta,
            geometry=geometry,
            name=name,
        )

    @property
    def k(self) -> int:
        return self.observations.size

    def _gradient(self, points):
        theta = points[:, 0]
        below = np.searchsorted(self.observations, theta, side="left")
        above = self.k - np.searchsorted(self.observations, theta, side="right")
        signs = (below - above).astype(np.float64)
        grad = self.l1_weight * signs + (theta - self.prior_mean) / self.prior_sd**2
        return grad[:, None]

    def _value(self, points):
        theta = points[:, 0]
        l1 = np.abs(theta[:, None] - self.observations[None, :]).sum(axis=1)
        return self.l1_weight * l1 + 0.5 * (theta - self.prior_mean) ** 2 / self.prior_sd**2


class LaplaceGaussianPosteriorND(PotentialSpec):
    """``d``-dimensional version: Euclidean-norm likelihood, Gaussian prior.

    ``U(t) = w * sum_i |t - y_i| + (t - m)^T P (t - m) / (2 prior_sd^2)`` with
    precision ``P`` (smallest eigenvalue 1 in the canonical setting). The norm
    terms are not Lipschitz near the ``y_i``, so only growth bounds hold.
    """

    kind = "laplace_gaussian_nd"

    def __init__(
        self,
        observations: Sequence[Sequence[float]],
        scale: float = 1.0,
        prior_mean: Optional[Sequence[float]] = None,
        prior_sd: float = 1.0,
        precision: Optional[Sequence[Sequence[float]]] = None,
        l1_weight: Optional[float] = None,
        beta: float = 1.0,
        name: Optional[str] = None,
    ):
        obs = np.asarray(observations, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[0] == 0:
            raise ValueError("observations must be a non-empty (k, d) array")
        if scale <= 0 or prior_sd <= 0:
            raise ValueError("scale and prior_sd must be positive")
        dimension = obs.shape[1]
        self.observations = obs
        self.scale = float(scale)
        self.prior_sd = float(prior_sd)
        self.prior_mean = (
            np.zeros(dimension) if prior_mean is None else np.asarray(prior_mean, float)
        )
        self.precision = (
            np.eye(dimension) if precision is None else np.asarray(precision, float)
        )
        if self.prior_mean.shape != (dimension,):
            raise ValueError("prior_mean must have the observations' dimension")
        if self.precision.shape != (dimension, dimension):
            raise ValueError("precision must be a d x d matrix")
        if not np.allclose(self.precision, self.precision.T):
            raise ValueError("precision matrix must be symmetric")
        eigenvalues = np.linalg.eigvalsh(self.precision)
        if eigenvalues[0] <= 0:
            raise ValueError("precision matrix must be positive definite")
        for arr in (self.observations, self.prior_mean, self.precision):
            arr.setflags(write=False)
        self.l1_weight = 2.0 / scale if l1_weight is None else float(l1_weight)
        scaled = self.prior_sd**-2
        super().__init__(
            dimension=dimension,
            mu=eigenvalues[0] * scaled,
            growth_m=self.l1_weight * obs.shape[0]
            + scaled * float(np.linalg.norm(self.precision @ self.prior_mean)),
            growth_L=eigenvalues[-1] * scaled,
            regularity_class=RegularityClass.GROWTH_ONLY,
            beta=beta,
            name=name,
        )

    def on_discontinuity(self, points):
        diffs = points[:, None, :] - self.observations[None, :, :]
        return np.any(np.all(diffs == 0.0, axis=-1), axis=-1)

    def _gradient(self, points):
        diffs = points[:, None, :] - self.observations[None, :, :]
        norms = np.linalg.norm(diffs, axis=-1, keepdims=True)
        units = np.divide(diffs, norms, out=np.zeros_like(diffs), where=norms > 0)
        prior = (points - self.prior_mean) @ self.precision.T / self.prior_sd**2
        return self.l1_weight * units.sum(axis=1) + prior

    def _value(self, points):
        diffs = points[:, None, :] - self.observations[None, :, :]
        centred = points - self.prior_mean
        quad = np.einsum("ni,ij,nj->n", centred, self.precision, centred)
        return (
            self.l1_weight * np.linalg.norm(diffs, axis=-1).sum(axis=1)
            + 0.5 * quad / self.prior_sd**2
        )


class BallPenaltyPotential(PotentialSpec):
    """Strongly convex quadratic plus distances to balls.

    ``U(x) = mu |x - x0|^2 / 2 + a * sum_j dist(x, B(c_j, r_j))``. The gradient
    jumps by ``a`` across each sphere and is Lipschitz between them.
    """

    kind = "ball_penalty"

    def __init__(
        self,
        centers: Sequence[Sequence[float]],
        radii: Sequence[float],
        penalty: float = 1.0,
        curvature: float = 1.0,
        anchor: Optional[Sequence[float]] = None,
        beta: float = 1.0,
        name: Optional[str] = None,
    ):
        centers_arr = np.asarray(centers, dtype=np.float64)
        radii_arr = np.asarray(radii, dtype=np.float64)
        if centers_arr.ndim != 2 or centers_arr.shape[0] != radii_arr.size:
            raise ValueError("need one radius per (d,) center")
        if penalty <= 0:
            raise ValueError("penalty must be positive")
        dimension = centers_arr.shape[1]
        self.centers = centers_arr
        self.radii = radii_arr
        self.penalty = float(penalty)
        self.curvature = float(curvature)
        self.anchor = np.zeros(dimension) if anchor is None else np.asarray(anchor, float)
        for arr in (self.centers, self.radii, self.anchor):
            arr.setflags(write=False)
        geometry = RegionGeometry.from_surfaces(
            [
                SphereSurface(tuple(float(c) for c in center), float(radius))
                for center, radius in zip(centers_arr, radii_arr)
            ],
            dimension,
        )
        super().__init__(
            dimension=dimension,
            mu=curvature,
            lipschitz_L=curvature + penalty * float(np.sum(1.0 / radii_arr)),
            growth_m=penalty * radii_arr.size
            + curvature * float(np.linalg.norm(self.anchor)),
            growth_L=curvature,
            regularity_class=RegularityClass.PIECEWISE_LIPSCHITZ,
            beta=beta,
            geometry=geometry,
            name=name,
        )

    def _gradient(self, points):
        diffs = points[:, None, :] - self.centers[None, :, :]
        norms = np.linalg.norm(diffs, axis=-1, keepdims=True)
        outside = norms > self.radii[None, :, None]
        units = np.divide(diffs, norms, out=np.zeros_like(diffs), where=outside)
        return self.curvature * (points - self.anchor) + self.penalty * units.sum(axis=1)

    def _value(self, points):
        norms = np.linalg.norm(points[:, None, :] - self.centers[None, :, :], axis=-1)
        excess = np.maximum(norms - self.radii[None, :], 0.0).sum(axis=1)
        return (
            0.5 * self.curvature * np.sum((points - self.anchor) ** 2, axis=-1)
            + self.penalty * excess
        )


class FunctionPotential(PotentialSpec):
    """A potential given directly by a vectorised gradient callable."""

    def __init__(
        self,
        gradient_fn: Callable[[np.ndarray], np.ndarray],
        *,
        dimension: int,
        mu: float,
        growth_m: float,
        growth_L: float,
        lipschitz_L: Optional[float] = None,
        value_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        geometry: Optional[RegionGeometry] = None,
        beta: float = 1.0,
        name: str = "custom",
    ):
        self.gradient_fn = gradient_fn
        self.value_fn = value_fn
        super().__init__(
            dimension=dimension,
            mu=mu,
            growth_m=growth_m,
            growth_L=growth_L,
            regularity_class=(
                RegularityClass.GROWTH_ONLY
                if lipschitz_L is None
                else RegularityClass.PIECEWISE_LIPSCHITZ
            ),
            lipschitz_L=lipschitz_L,
            beta=beta,
            geometry=geometry,
            name=name,
        )

    def _gradient(self, points):
        return np.asarray(self.gradient_fn(points), dtype=np.float64).reshape(
            points.shape
        )

    def _value(self, points):
        if self.value_fn is None:
            return super()._value(points)
        return np.asarray(self.value_fn(points), dtype=np.float64)
