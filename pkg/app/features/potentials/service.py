import logging
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
from pydantic import TypeAdapter, ValidationError
from tenacity import retry, retry_if_exception_type, stop_after_attempt

from app.features.potentials.models import (
    BallPenaltyPotential,
    LaplaceGaussianPosterior1D,
    LaplaceGaussianPosteriorND,
    PotentialSpec,
    QuadraticPotential,
    RegionGeometry,
    as_points,
)
from app.features.potentials.schemas import (
    BallPenaltyConfig,
    DeclaredConstants,
    GrowthReport,
    LaplaceGaussian1DConfig,
    LaplaceGaussianNDConfig,
    MonotonicityReport,
    PotentialConfig,
    PotentialFile,
    PotentialSummary,
    QuadraticConfig,
    StepsizeGuard,
)
from app.infrastructure.config import read_document
from app.infrastructure.errors import ConfigError, OnDiscontinuity

logger = logging.getLogger(__name__)

BUILTIN_KINDS: Dict[str, str] = {
    "quadratic": "Smooth baseline U(x) = c|x - x0|^2 / 2 (Lipschitz gradient).",
    "laplace_gaussian_1d": (
        "1D posterior: Laplace likelihood, Gaussian prior; gradient jumps at the data."
    ),
    "laplace_gaussian_nd": (
        "d-dim posterior: Euclidean Laplace likelihood, Gaussian prior; growth bound only."
    ),
    "ball_penalty": (
        "Quadratic plus distances to balls; gradient jumps on spheres, Lipschitz between."
    ),
}

RELATIVE_SLACK = 1e-9
MAX_RESAMPLE_ATTEMPTS = 5


def evaluate_gradient(spec: PotentialSpec, x) -> np.ndarray:
    """``grad U(x)``; raises :class:`OnDiscontinuity` on a surface."""
    return spec.gradient(x)


def stepsize_guard(spec: PotentialSpec) -> StepsizeGuard:
    L = spec.guard_constant
    return StepsizeGuard(
        constant_L=L,
        convergence_bound=spec.mu / (2.0 * L**2),
        lipschitz_bound=1.0 / (spec.mu + L),
    )


def within_guard(spec: PotentialSpec, gamma: float) -> bool:
    return gamma < stepsize_guard(spec).convergence_bound


def _uniform_ball(
    rng: np.random.Generator, n: int, dimension: int, radius: float
) -> np.ndarray:
    directions = rng.standard_normal((n, dimension))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = radius * rng.random(n) ** (1.0 / dimension)
    return directions * radii[:, None]


@retry(
    retry=retry_if_exception_type(OnDiscontinuity),
    stop=stop_after_attempt(MAX_RESAMPLE_ATTEMPTS),
    reraise=True,
)
def _draw_off_surface(
    spec: PotentialSpec, rng: np.random.Generator, n: int, radius: float
) -> np.ndarray:
    points = _uniform_ball(rng, n, spec.dimension, radius)
    if np.any(spec.on_discontinuity(points)):
        logger.debug(f"{spec.name}: sampled point on a surface, redrawing")
        raise OnDiscontinuity("sampled point on a discontinuity surface")
    return points


def sampling_radius(spec: PotentialSpec) -> float:
    if spec.geometry is not None:
        return 2.0 * spec.geometry.bounding_radius
    return 10.0


def check_strong_monotonicity(
    spec: PotentialSpec,
    n_pairs: int,
    rng_seed: int,
    radius: Optional[float] = None,
) -> MonotonicityReport:
    """Minimum of ``<grad U(x) - grad U(y), x - y> / |x - y|^2`` over random pairs.

    Half the pairs are independent draws in a ball; the other half are local
    perturbations at log-uniform scales, which straddle the jumps.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    rng = np.random.default_rng(rng_seed)
    radius = radius or sampling_radius(spec)
    x = _draw_off_surface(spec, rng, n_pairs, radius)
    y = _draw_off_surface(spec, rng, n_pairs, radius)
    local = np.arange(n_pairs) % 2 == 1
    if np.any(local):
        scales = 10.0 ** rng.uniform(-3.0, np.log10(radius), size=int(local.sum()))
        y[local] = x[local] + scales[:, None] * rng.standard_normal(
            (int(local.sum()), spec.dimension)
        )
    diff = x - y
    sq = np.sum(diff**2, axis=1)
    keep = sq > 0
    inner = np.sum((spec.gradient(x) - spec.gradient(y, tie_break=True)) * diff, axis=1)
    ratios = inner[keep] / sq[keep]
    min_ratio = float(ratios.min()) if ratios.size else float("inf")
    passed = min_ratio >= spec.mu * (1.0 - RELATIVE_SLACK)
    if not passed:
        logger.warning(
            f"{spec.name}: monotonicity ratio {min_ratio:.6g} below mu={spec.mu:.6g}"
        )
    return MonotonicityReport(
        min_ratio=min_ratio, mu=spec.mu, n_pairs=n_pairs, passed=passed
    )


def check_growth(
    spec: PotentialSpec,
    n_samples: int,
    radius: float,
    rng_seed: int,
    floor: float = 1e-12,
) -> GrowthReport:
    """Largest ``(|grad U(x)| - m) / max(|x|, floor)`` over a ball, against ``growth_L``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(rng_seed)
    points = _draw_off_surface(spec, rng, n_samples, radius)
    grads = spec.gradient(points)
    norms = np.linalg.norm(grads, axis=1)
    all_finite = bool(np.all(np.isfinite(norms)))
    ratios = (norms - spec.growth_m) / np.maximum(np.linalg.norm(points, axis=1), floor)
    max_ratio = float(np.max(ratios)) if all_finite else float("inf")
    bound = spec.growth_L + RELATIVE_SLACK * max(1.0, spec.growth_L)
    passed = all_finite and max_ratio <= bound
    if not passed:
        logger.warning(
            f"{spec.name}: growth ratio {max_ratio:.6g} exceeds L={spec.growth_L:.6g}"
        )
    return GrowthReport(
        max_ratio=max_ratio,
        growth_m=spec.growth_m,
        growth_L=spec.growth_L,
        n_samples=n_samples,
        radius=radius,
        all_finite=all_finite,
        passed=passed,
    )


def classify_region(geom: Optional[RegionGeometry], x) -> Union[int, np.ndarray]:
    """Index of the region containing ``x`` (one point or a batch).

    Without a geometry the whole space is the single region 0.
    """
    if geom is None:
        points, single = as_points(x, np.shape(np.atleast_1d(x))[-1])
        return 0 if single else np.zeros(points.shape[0], dtype=np.int64)
    points, single = as_points(x, geom.dimension)
    if np.any(geom.on_surface(points)):
        raise OnDiscontinuity(f"point on a surface; region undefined: {np.asarray(x)}")
    labels = geom.labels(points)
    return int(labels[0]) if single else labels


def signed_distance(geom: RegionGeometry, j: int, x) -> Union[float, np.ndarray]:
    """``rho_j(x)``: distance to surface ``j``, negative inside the region it encloses.

    Points on the line use ``M_j = (-inf, y_j)``, so ``rho_j(x) = x - y_j``.
    """
    if not 0 <= j < geom.n_surfaces:
        raise IndexError(f"surface index {j} out of range 0..{geom.n_surfaces - 1}")
    points, single = as_points(x, geom.dimension)
    rho = geom.surfaces[j].signed_distance(points)
    return float(rho[0]) if single else rho


# --- Loading ---


_potential_adapter = TypeAdapter(PotentialConfig)


def build_potential(
    config: Union[PotentialConfig, dict], name: Optional[str] = None
) -> PotentialSpec:
    if isinstance(config, dict):
        config = _potential_adapter.validate_python(config)

    if isinstance(config, QuadraticConfig):
        spec = QuadraticPotential(
            dimension=config.dimension,
            curvature=config.curvature,
            center=config.center,
            beta=config.beta,
            name=name,
        )
    elif isinstance(config, LaplaceGaussian1DConfig):
        spec = LaplaceGaussianPosterior1D(
            observations=config.observations,
            scale=config.scale,
            prior_mean=config.prior_mean,
            prior_sd=config.prior_sd,
            l1_weight=config.l1_weight,
            beta=config.beta,
            name=name,
        )
    elif isinstance(config, LaplaceGaussianNDConfig):
        spec = LaplaceGaussianPosteriorND(
            observations=config.observations,
            scale=config.scale,
            prior_mean=config.prior_mean,
            prior_sd=config.prior_sd,
            precision=config.precision,
            l1_weight=config.l1_weight,
            beta=config.beta,
            name=name,
        )
    elif isinstance(config, BallPenaltyConfig):
        spec = BallPenaltyPotential(
            centers=config.centers,
            radii=config.radii,
            penalty=config.penalty,
            curvature=config.curvature,
            anchor=config.anchor,
            beta=config.beta,
            name=name,
        )
    else:
        raise ValueError(f"unknown potential kind {getattr(config, 'kind', config)}")

    if config.declared is not None:
        _apply_declared(spec, config.declared)
    return spec


def _apply_declared(spec: PotentialSpec, declared: DeclaredConstants) -> None:
    """Replace derived constants by declared ones when those are more conservative."""
    checks = [
        ("mu", declared.mu, lambda d, v: d <= v * (1 + RELATIVE_SLACK)),
        ("lipschitz_L", declared.lipschitz_L, lambda d, v: d >= v * (1 - RELATIVE_SLACK)),
        ("growth_m", declared.growth_m, lambda d, v: d >= v * (1 - RELATIVE_SLACK)),
        ("growth_L", declared.growth_L, lambda d, v: d >= v * (1 - RELATIVE_SLACK)),
    ]
    for attr, value, conservative in checks:
        if value is None:
            continue
        derived = getattr(spec, attr)
        if derived is None:
            raise ValueError(f"{spec.name}: {attr} is not defined for {spec.kind}")
        if not conservative(value, derived):
            raise ValueError(
                f"{spec.name}: declared {attr}={value} is not implied by the "
                f"derived value {derived}"
            )
        setattr(spec, attr, float(value))


def load_potential(path: Union[str, Path]) -> PotentialSpec:
    document = read_document(path)
    try:
        parsed = PotentialFile.model_validate(document)
        return build_potential(parsed.potential, name=Path(path).stem)
    except ValidationError as e:
        raise ConfigError(f"{path}: {_format_validation_error(e)}") from e
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e


def _format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item["loc"])
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def summarize(spec: PotentialSpec) -> PotentialSummary:
    geom = spec.geometry
    return PotentialSummary(
        name=spec.name,
        kind=spec.kind,
        dimension=spec.dimension,
        beta=spec.beta,
        mu=spec.mu,
        lipschitz_L=spec.lipschitz_L,
        growth_m=spec.growth_m,
        growth_L=spec.growth_L,
        regularity_class=spec.regularity_class.value,
        n_surfaces=geom.n_surfaces if geom else 0,
        delta=geom.delta if geom else None,
        bounding_radius=geom.bounding_radius if geom else None,
        guard=stepsize_guard(spec),
    )
