import logging
import math
from typing import Callable, Optional, Union

import numpy as np
from scipy import integrate
from scipy.special import log_ndtr, logsumexp, ndtri
from scipy.stats import truncnorm

from app.features.potentials.models import (
    LaplaceGaussianPosterior1D,
    PotentialSpec,
    QuadraticPotential,
)
from app.features.references.models import (
    ApproximateReference,
    GaussianTarget,
    PiecewiseGaussianMixture,
)
from app.features.references.schemas import MixtureSummary
from app.features.sampler.schemas import SamplerConfig
from app.features.sampler.service import run_ensemble
from app.infrastructure.errors import NumericalUnderflow, OutOfDomain
from app.infrastructure.errors import ReferenceUnavailable
from app.infrastructure.noise import NoiseSource, Stream

logger = logging.getLogger(__name__)

# Chains of an approximate reference never share noise with the chains under test.
REFERENCE_CHAIN_OFFSET = 2**40
TAIL_TOLERANCE = 1e-14
SUPPORTED_MOMENTS = (1, 2, 3, 4)

Target = Union[PiecewiseGaussianMixture, GaussianTarget]


def _log_normal_mass(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``log(Phi(b) - Phi(a))`` for standardized ``a < b``, stable in both tails."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    log_hi = log_ndtr(hi)
    with np.errstate(divide="ignore"):
        return log_hi + np.log(-np.expm1(log_ndtr(lo) - log_hi))


def build_mixture(
    post: LaplaceGaussianPosterior1D, beta: Optional[float] = None
) -> PiecewiseGaussianMixture:
    """Exact ``pi_beta`` of the 1D posterior as a truncated-Gaussian mixture.

    On the interval with ``c`` observations below and total ``T_below`` of them,
    ``sum_i |y_i - t| = (2c - k) t + (T - 2 T_below)``; completing the square
    gives mean ``prior_mean - prior_sd^2 w (2c - k)`` and a constant offset.
    """
    beta = post.beta if beta is None else float(beta)
    if beta <= 0 or math.isinf(beta):
        raise ValueError("beta must be positive and finite for a reference density")
    sigma2 = post.prior_sd**2
    w = post.l1_weight
    breakpoints, counts = np.unique(post.observations, return_counts=True)
    below = np.r_[0, np.cumsum(counts)]
    sum_below = np.r_[0.0, np.cumsum(breakpoints * counts)]
    total = float(post.observations.sum())
    slopes = 2.0 * below - post.k
    offsets = total - 2.0 * sum_below

    means = post.prior_mean - sigma2 * w * slopes
    constants = w * offsets + (post.prior_mean**2 - means**2) / (2.0 * sigma2)
    sd = post.prior_sd / math.sqrt(beta)

    lower = np.r_[-np.inf, breakpoints]
    upper = np.r_[breakpoints, np.inf]
    log_masses = (
        -beta * constants
        + math.log(sd)
        + 0.5 * math.log(2.0 * math.pi)
        + _log_normal_mass((lower - means) / sd, (upper - means) / sd)
    )
    log_normalizer = float(logsumexp(log_masses))
    if not np.isfinite(log_normalizer):
        raise NumericalUnderflow(
            f"{post.name}: every interval mass underflows (beta={beta}, w={w})"
        )
    return PiecewiseGaussianMixture(
        breakpoints=breakpoints,
        means=means,
        sd=sd,
        log_constants=beta * constants,
        log_masses=log_masses,
        log_normalizer=log_normalizer,
        beta=beta,
    )


def log_density(mix: PiecewiseGaussianMixture, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return interval_log_density(mix, mix.interval_of(theta), theta)


def interval_log_density(mix: PiecewiseGaussianMixture, interval, theta) -> np.ndarray:
    """Normalized log density using interval ``interval``'s formula, even off it."""
    i = np.asarray(interval)
    return (
        -mix.log_constants[i]
        - 0.5 * ((theta - mix.means[i]) / mix.sd) ** 2
        - mix.log_normalizer
    )


def _interval_distribution(mix: PiecewiseGaussianMixture, i: int):
    return truncnorm(mix.alpha[i], mix.beta_std[i], loc=mix.means[i], scale=mix.sd)


def cdf(mix: PiecewiseGaussianMixture, theta) -> Union[float, np.ndarray]:
    values = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    weights = mix.weights
    before = np.r_[0.0, np.cumsum(weights)[:-1]]
    intervals = mix.interval_of(values)
    out = np.empty_like(values)
    for i in np.unique(intervals):
        mask = intervals == i
        if weights[i] > 0:
            out[mask] = before[i] + weights[i] * _interval_distribution(mix, i).cdf(values[mask])
        else:
            out[mask] = before[i]
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if np.ndim(theta) == 0 else out


def quantile(mix: PiecewiseGaussianMixture, p) -> Union[float, np.ndarray]:
    probs = np.atleast_1d(np.asarray(p, dtype=np.float64))
    if np.any(~(probs > 0.0) | ~(probs < 1.0)):
        raise OutOfDomain("quantile levels must lie in the open interval (0, 1)")
    weights = mix.weights
    cumulative = np.cumsum(weights)
    last = int(np.flatnonzero(weights > 0)[-1])
    intervals = np.minimum(np.searchsorted(cumulative, probs, side="right"), last)
    before = cumulative - weights
    out = np.empty_like(probs)
    for i in np.unique(intervals):
        mask = intervals == i
        local = np.clip((probs[mask] - before[i]) / weights[i], 0.0, 1.0)
        out[mask] = _interval_distribution(mix, i).ppf(local)
    return float(out[0]) if np.ndim(p) == 0 else out


def sample(mix: PiecewiseGaussianMixture, n: int, seed: int) -> np.ndarray:
    """``n`` exact draws by inversion, shape ``(n, 1)``; a pure function of ``seed``."""
    u = NoiseSource(seed, Stream.REFERENCE).uniforms(0, 0, np.arange(n), 1)[:, 0]
    return quantile(mix, u).reshape(n, 1)


def stratified_quantiles(mix: PiecewiseGaussianMixture, n: int) -> np.ndarray:
    """Quantiles at ``(i - 1/2) / n``: a deterministic n-point stand-in for ``pi_beta``."""
    levels = (np.arange(n) + 0.5) / n
    return quantile(mix, levels).reshape(n, 1)


def moments(mix: PiecewiseGaussianMixture, order: int) -> float:
    """Raw moment ``E[theta^order]`` from per-interval truncated-Gaussian moments."""
    if order not in SUPPORTED_MOMENTS:
        raise ValueError(f"order must be one of {SUPPORTED_MOMENTS}")
    weights = mix.weights
    total = 0.0
    for i in np.flatnonzero(weights > 0):
        total += weights[i] * float(_interval_distribution(mix, i).moment(order))
    return total


def mixture_summary(mix: PiecewiseGaussianMixture) -> MixtureSummary:
    return MixtureSummary(
        beta=mix.beta,
        breakpoints=mix.breakpoints.tolist(),
        means=mix.means.tolist(),
        sd=mix.sd,
        weights=mix.weights.tolist(),
        log_normalizer=mix.log_normalizer,
        normalizer=mix.normalizer,
    )


def export_json(mix: PiecewiseGaussianMixture) -> str:
    return mixture_summary(mix).model_dump_json(indent=2)


# --- Quadrature oracle ---


def _shifted_density(post: LaplaceGaussianPosterior1D, beta: float):
    """``exp(-beta (U - U_min))`` with ``U_min`` the smallest value at the anchors."""
    anchors = np.r_[post.prior_mean, post.observations].reshape(-1, 1)
    shift = beta * float(np.min(post.value(anchors)))

    def density(t: float) -> float:
        return math.exp(shift - beta * post.value(np.array([t])))

    return density, shift


def _quadrature_panels(post: LaplaceGaussianPosterior1D, beta: float):
    sd = post.prior_sd / math.sqrt(beta)
    anchors = np.r_[post.prior_mean, post.observations]
    density, shift = _shifted_density(post, beta)
    lo, hi = anchors.min() - 12.0 * sd, anchors.max() + 12.0 * sd
    peak = max(density(a) for a in anchors)
    # widen until the integrand at the ends is negligible next to its peak
    while density(lo) * sd > TAIL_TOLERANCE * peak:
        lo -= 12.0 * sd
    while density(hi) * sd > TAIL_TOLERANCE * peak:
        hi += 12.0 * sd
    return np.r_[lo, np.unique(post.observations), hi], density, shift


def _panel_integral(fn: Callable[[float], float], a: float, b: float) -> float:
    value, _ = integrate.quad(fn, a, b, epsabs=0.0, epsrel=1e-13, limit=200)
    return value


def quadrature_log_masses(
    post: LaplaceGaussianPosterior1D, beta: Optional[float] = None
) -> np.ndarray:
    """Log of ``int exp(-beta U)`` over each interval, by adaptive quadrature."""
    beta = post.beta if beta is None else float(beta)
    edges, density, shift = _quadrature_panels(post, beta)
    masses = [_panel_integral(density, a, b) for a, b in zip(edges[:-1], edges[1:])]
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(masses)) - shift


def quadrature_expectation(
    post: LaplaceGaussianPosterior1D,
    fn: Callable[[float], float],
    beta: Optional[float] = None,
) -> float:
    """``E_pi[fn]`` with both integrals done by quadrature."""
    beta = post.beta if beta is None else float(beta)
    edges, density, _ = _quadrature_panels(post, beta)
    numerator = denominator = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        numerator += _panel_integral(lambda t: fn(t) * density(t), a, b)
        denominator += _panel_integral(density, a, b)
    return numerator / denominator


# --- Targets ---


def exact_target(spec: PotentialSpec, beta: Optional[float] = None) -> Target:
    """Closed-form ``pi_beta`` for potentials that have one."""
    beta = spec.beta if beta is None else float(beta)
    if isinstance(spec, LaplaceGaussianPosterior1D):
        return build_mixture(spec, beta)
    if isinstance(spec, QuadraticPotential):
        return GaussianTarget(
            center=spec.center.copy(), sd=1.0 / math.sqrt(spec.curvature * beta)
        )
    raise ReferenceUnavailable(f"{spec.name} ({spec.kind}) has no exact reference")


def has_exact_target(spec: PotentialSpec) -> bool:
    return isinstance(spec, (LaplaceGaussianPosterior1D, QuadraticPotential))


def reference_points(target: Target, n: int, seed: int, stratified: bool = True) -> np.ndarray:
    """``n`` points representing the target, shape ``(n, d)``.

    One-dimensional targets default to stratified quantiles, which carry no
    sampling noise; otherwise draws come from the reference noise stream.
    """
    if isinstance(target, PiecewiseGaussianMixture):
        return stratified_quantiles(target, n) if stratified else sample(target, n, seed)
    d = target.center.size
    if d == 1 and stratified:
        z = ndtri((np.arange(n) + 0.5) / n).reshape(n, 1)
    else:
        z = NoiseSource(seed, Stream.REFERENCE).normals(0, 0, np.arange(n), d)
    return target.center + target.sd * z


def target_mean(target: Target) -> np.ndarray:
    if isinstance(target, PiecewiseGaussianMixture):
        return np.array([moments(target, 1)])
    return target.center.copy()


def approximate_reference(
    spec: PotentialSpec,
    gamma_min: float,
    n_samples: int,
    n_steps: int,
    seed: int,
    init,
    beta: Optional[float] = None,
) -> ApproximateReference:
    """Stand-in for ``pi_beta`` without a closed form: a ULA run at ``gamma_min / 16``.

    ``n_steps`` is the burn-in in steps of the reference stepsize; callers size
    it with the same policy as the chains under test.
    """
    gamma = gamma_min / 16.0
    config = SamplerConfig(gamma=gamma, n_steps=n_steps, seed=seed, beta=beta)
    logger.info(
        f"{spec.name}: approximate reference with {n_samples} chains, "
        f"gamma={gamma:g}, {n_steps} steps"
    )
    ensemble = run_ensemble(
        spec,
        config,
        init,
        n_chains=n_samples,
        record_every=None,
        chain_ids=REFERENCE_CHAIN_OFFSET + np.arange(n_samples, dtype=np.int64),
    )
    return ApproximateReference(
        points=ensemble.terminal.copy(), gamma=gamma, n_steps=n_steps, seed=seed
    )
