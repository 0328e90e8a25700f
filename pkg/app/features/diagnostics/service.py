import itertools
import logging
import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from app.features.diagnostics.models import CrossingRecord, EmpiricalMeasure, PathWindow
from app.features.diagnostics.schemas import SlopeFit
from app.features.potentials.models import PotentialSpec, RegionGeometry
from app.features.sampler.models import Trajectory
from app.features.sampler.service import trajectory_window
from app.infrastructure.config import settings
from app.infrastructure.errors import DimensionMismatch, MissingCheckpoints
from app.infrastructure.errors import NonPositiveValue

logger = logging.getLogger(__name__)

MIN_SUB_RESOLUTION = 8
MIN_SLOPE_POINTS = 4


def _as_measure(m) -> EmpiricalMeasure:
    return m if isinstance(m, EmpiricalMeasure) else EmpiricalMeasure(np.asarray(m))


# --- Wasserstein ---


def wasserstein_1d(a, b, p: float = 1.0) -> float:
    """``W_p`` between two measures on the line.

    Equal-size uniform samples pair sorted order statistics; otherwise the
    quantile functions are integrated exactly over the merged CDF grid.
    """
    a, b = _as_measure(a), _as_measure(b)
    if a.dimension != 1 or b.dimension != 1:
        raise DimensionMismatch(
            f"wasserstein_1d needs 1-dimensional samples, got d={a.dimension}, d={b.dimension}"
        )
    if p < 1:
        raise ValueError("p must be at least 1")
    x, y = a.points[:, 0], b.points[:, 0]
    if a.is_uniform and b.is_uniform and a.n == b.n:
        cost = np.mean(np.abs(np.sort(x) - np.sort(y)) ** p)
        return float(cost ** (1.0 / p))

    order_a, order_b = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    xs, ys = x[order_a], y[order_b]
    cum_a = np.cumsum(a.resolved_weights()[order_a])
    cum_b = np.cumsum(b.resolved_weights()[order_b])
    cum_a[-1] = cum_b[-1] = 1.0
    levels = np.unique(np.r_[cum_a, cum_b])
    widths = np.diff(np.r_[0.0, levels])
    # left-continuous quantile on each (previous level, level]
    qa = xs[np.minimum(np.searchsorted(cum_a, levels, side="left"), a.n - 1)]
    qb = ys[np.minimum(np.searchsorted(cum_b, levels, side="left"), b.n - 1)]
    cost = np.sum(widths * np.abs(qa - qb) ** p)
    return float(cost ** (1.0 / p))


def wasserstein_permutation(a, b, p: float = 1.0) -> float:
    """``W_p`` of two equal-size samples on the line by minimising over every pairing.

    Exhaustive, so only usable for a handful of points; it checks ``wasserstein_1d``.
    """
    x = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise DimensionMismatch(f"need equal sample sizes, got {x.size} and {y.size}")
    if x.size > 8:
        raise ValueError("exhaustive pairing is limited to 8 points")
    best = min(
        float(np.mean(np.abs(x - y[list(order)]) ** p))
        for order in itertools.permutations(range(y.size))
    )
    return best ** (1.0 / p)


def projection_directions(dimension: int, n_projections: int, seed: int) -> np.ndarray:
    """Quasi-uniform unit vectors from a scrambled Sobol sequence, shape ``(n, d)``."""
    if n_projections < 1:
        raise ValueError("n_projections must be positive")
    sobol = qmc.Sobol(d=dimension, scramble=True, seed=seed)
    points = sobol.random_base2(m=max(0, math.ceil(math.log2(n_projections))))
    points = np.clip(points[:n_projections], 1e-12, 1.0 - 1e-12)
    directions = ndtri(points)
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def wasserstein_sliced(
    a,
    b,
    p: float = 1.0,
    n_projections: int = settings.SLICED_PROJECTIONS,
    seed: int = 0,
) -> float:
    """Mean over projection directions of the 1D ``W_p`` of the projected samples."""
    a, b = _as_measure(a), _as_measure(b)
    if a.dimension != b.dimension:
        raise DimensionMismatch(f"dimensions differ: {a.dimension} vs {b.dimension}")
    if a.dimension < 2:
        raise DimensionMismatch("wasserstein_sliced is for d >= 2; use wasserstein_1d")
    directions = projection_directions(a.dimension, n_projections, seed)
    distances = [wasserstein_1d(a.project(v), b.project(v), p) for v in directions]
    return float(np.mean(distances))


def wasserstein(a, b, p: float = 1.0, seed: int = 0) -> float:
    """``wasserstein_1d`` on the line, the sliced estimate above it."""
    a = _as_measure(a)
    if a.dimension == 1:
        return wasserstein_1d(a, b, p)
    return wasserstein_sliced(a, b, p, seed=seed)


# --- Crossings and occupation ---


def window_from_trajectory(
    trajectory: Trajectory, spec: PotentialSpec, steps: Optional[Sequence[int]] = None
) -> PathWindow:
    """Sub-grid window over ``steps`` (default: every step with dense checkpoints)."""
    steps = sorted(trajectory.dense) if steps is None else list(steps)
    missing = [n for n in steps if n not in trajectory.dense]
    if missing:
        raise MissingCheckpoints(f"no dense checkpoints for steps {missing[:5]}")
    anchors, substates = trajectory_window(trajectory, spec, steps)
    return PathWindow(anchors=anchors, substates=substates, gamma=trajectory.gamma)


def crossing_fraction(window: PathWindow, geom: Optional[RegionGeometry]) -> CrossingRecord:
    """Fraction of sub-grid times whose region differs from the last grid state's."""
    if window.substates is None or window.sub_resolution < MIN_SUB_RESOLUTION:
        raise MissingCheckpoints(
            f"crossing statistics need a sub-grid of at most gamma/{MIN_SUB_RESOLUTION}"
        )
    if geom is None:
        return CrossingRecord(n_times=window.n_times, n_crossing=0)
    anchor_labels = geom.labels(window.anchors)
    sub_labels = geom.labels(window.substates)
    crossed = sub_labels != anchor_labels[:, None]
    anchor_signs = np.signbit(geom.signed_distances(window.anchors))
    sub_signs = np.signbit(geom.signed_distances(window.substates))
    per_surface = np.count_nonzero(sub_signs != anchor_signs[:, None, :], axis=(0, 1))
    return CrossingRecord(
        n_times=window.n_times,
        n_crossing=int(np.count_nonzero(crossed)),
        per_surface=per_surface.astype(np.int64),
    )


def occupation_near_surface(
    window: PathWindow, geom: Optional[RegionGeometry], half_width: float
) -> float:
    """Fraction of sub-grid times spent within ``half_width`` of some surface."""
    if geom is None:
        return 0.0
    if not 0 < half_width <= geom.delta * (1 + 1e-12):
        raise ValueError(f"half_width must lie in (0, delta={geom.delta:g}]")
    rho = np.abs(geom.signed_distances(window.substates))
    near = np.min(rho, axis=-1) < half_width
    return float(np.count_nonzero(near)) / window.n_times


# --- Rates ---


def fit_loglog_slope(
    grid: Sequence[float],
    values: Sequence[float],
    bootstrap_n: int = settings.BOOTSTRAP_SAMPLES,
    seed: int = 0,
    level: float = 0.95,
) -> SlopeFit:
    """Slope of ``log(values)`` on ``log(grid)`` with a pairs-bootstrap interval."""
    x = np.asarray(grid, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("grid and values must be 1-D arrays of equal length")
    if x.size < MIN_SLOPE_POINTS:
        raise ValueError(f"need at least {MIN_SLOPE_POINTS} points, got {x.size}")
    if np.any(~(x > 0)) or np.any(~(y > 0)):
        raise NonPositiveValue("log-log fits need strictly positive grid and values")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)

    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(bootstrap_n, x.size))
    bx, by = lx[idx], ly[idx]
    bx_c = bx - bx.mean(axis=1, keepdims=True)
    by_c = by - by.mean(axis=1, keepdims=True)
    spread = np.sum(bx_c**2, axis=1)
    usable = spread > 1e-300
    slopes = np.sum(bx_c * by_c, axis=1)[usable] / spread[usable]
    tail = (1.0 - level) / 2.0
    if slopes.size:
        lo, hi = np.quantile(slopes, [tail, 1.0 - tail])
    else:
        lo = hi = slope
    return SlopeFit(
        grid=x.tolist(),
        values=y.tolist(),
        slope=float(slope),
        intercept=float(intercept),
        ci_low=float(min(lo, slope)),
        ci_high=float(max(hi, slope)),
        level=level,
        n_bootstrap=bootstrap_n,
    )
