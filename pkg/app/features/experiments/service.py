import asyncio
import hashlib
import json
import logging
import math
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy.stats import linregress
from sqlalchemy import select

from app.features.diagnostics.models import CrossingRecord, PathWindow
from app.features.diagnostics.schemas import MetricRow, SlopeFit
from app.features.diagnostics.service import (
    crossing_fraction,
    fit_loglog_slope,
    occupation_near_surface,
    wasserstein,
    wasserstein_1d,
    wasserstein_permutation,
)
from app.features.experiments.models import ExperimentRun
from app.features.experiments.schemas import (
    BiasReport,
    BurnInPolicy,
    ExperimentPlan,
    ExperimentReport,
    Provenance,
    SuiteConfig,
    SummaryRow,
)
from app.features.potentials.models import (
    LaplaceGaussianPosterior1D,
    PotentialSpec,
    QuadraticPotential,
    RegularityClass,
)
from app.features.potentials.service import (
    _format_validation_error,
    build_potential,
    check_growth,
    check_strong_monotonicity,
    load_potential,
    sampling_radius,
    stepsize_guard,
)
from app.features.references.service import (
    approximate_reference,
    build_mixture,
    exact_target,
    has_exact_target,
    quadrature_log_masses,
    reference_points,
    target_mean,
)
from app.features.sampler.schemas import SamplerConfig
from app.features.sampler.service import (
    EnsembleStepper,
    reference_consistency,
    run_coupled_ensemble,
    run_ensemble,
    run_synchronous_ensemble,
    substep_states,
)
from app.infrastructure.config import read_document, settings
from app.infrastructure.database import AsyncSessionLocal, init_db
from app.infrastructure.errors import (
    ConfigError,
    InsufficientBurnIn,
    ReferenceInconsistent,
    ReferenceUnavailable,
    StepsizeGuardError,
)

logger = logging.getLogger(__name__)

METRIC_COLUMNS = list(MetricRow.model_fields)
SUMMARY_COLUMNS = list(SummaryRow.model_fields)
FITTED_KINDS = {"bias_sweep", "strong_error_sweep", "crossing_scaling", "increment_scaling"}


# --- Plan helpers ---


def experiment_seed(suite_seed: int, plan: ExperimentPlan) -> int:
    """The plan's own seed, else one derived from the suite seed and the plan id."""
    if plan.seed is not None:
        return plan.seed
    digest = hashlib.sha256(f"{suite_seed}:{plan.id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _location(spec: PotentialSpec) -> np.ndarray:
    for attr in ("center", "prior_mean", "anchor"):
        value = getattr(spec, attr, None)
        if value is not None:
            return np.broadcast_to(np.asarray(value, dtype=float), (spec.dimension,)).copy()
    return np.zeros(spec.dimension)


def default_init(spec: PotentialSpec, start: Optional[np.ndarray] = None) -> np.ndarray:
    """``start`` (default the potential's location) nudged off every discontinuity surface."""
    x = _location(spec) if start is None else np.asarray(start, dtype=float).copy()
    nudge = np.zeros(spec.dimension)
    nudge[0] = spec.geometry.delta / 2.0 if spec.geometry is not None else 1e-3
    for _ in range(8):
        if not np.any(spec.on_discontinuity(x[None, :])):
            return x
        x = x + nudge
    raise ValueError(f"{spec.name}: could not find an initial point off the surfaces")


def plan_init(plan: ExperimentPlan, spec: PotentialSpec) -> np.ndarray:
    if plan.init is None:
        return default_init(spec)
    if len(plan.init) != spec.dimension:
        raise ValueError(f"{plan.id}: init has {len(plan.init)} entries, need {spec.dimension}")
    return np.asarray(plan.init, dtype=float)


def expected_rate(spec: PotentialSpec) -> float:
    """Stepsize exponent the error bounds guarantee for this regularity class."""
    return 0.5 if spec.regularity_class is RegularityClass.PIECEWISE_LIPSCHITZ else 0.25


def burn_in_steps(
    policy: BurnInPolicy, spec: PotentialSpec, gamma: float, init: np.ndarray
) -> int:
    """Steps needed before ``D0 exp(-mu gamma n)`` is negligible next to the bias."""
    if policy.mode == "none":
        return 0
    diameter = policy.diameter or (
        float(np.linalg.norm(init - _location(spec)))
        + math.sqrt(spec.dimension / (spec.mu * spec.beta))
    )
    bias = policy.bias_scale or gamma ** expected_rate(spec)
    target = policy.tolerance * bias
    if policy.mode == "fixed":
        residual = diameter * math.exp(-spec.mu * gamma * policy.steps)
        if residual > target:
            raise InsufficientBurnIn(
                f"{spec.name}: {policy.steps} burn-in steps leave a transient of "
                f"{residual:.3g} at gamma={gamma:g}, above {target:.3g}"
            )
        return policy.steps
    steps = max(0, math.ceil(math.log(diameter / target) / (spec.mu * gamma)))
    if steps > policy.max_steps:
        raise InsufficientBurnIn(
            f"{spec.name}: burn-in at gamma={gamma:g} needs {steps} steps, "
            f"more than max_steps={policy.max_steps}"
        )
    return steps


def _batches(n: int, n_batches: int) -> List[np.ndarray]:
    return [b for b in np.array_split(np.arange(n), min(n_batches, n)) if b.size]


def _batch_stderr(values: Sequence[float]) -> float:
    values = np.asarray(values, dtype=float)
    return float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0


@dataclass
class GammaResult:
    gamma: float
    rows: List[MetricRow]
    primary: Optional[float] = None
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ExperimentRunner:
    prepare: Callable[[ExperimentPlan, PotentialSpec, int, np.ndarray], Dict[str, Any]]
    measure: Optional[Callable[..., GammaResult]]  # None for kinds without a stepsize grid
    finish: Callable[..., ExperimentReport]


def _row(plan, gamma, name, value, stderr, n, seed, lag=None) -> MetricRow:
    return MetricRow(
        experiment_id=plan.id,
        gamma=gamma,
        metric_name=name,
        value=float(value),
        stderr=None if stderr is None else float(stderr),
        n_samples=int(n),
        seed=seed,
        lag=lag,
    )


def _no_preparation(plan, spec, seed, init) -> Dict[str, Any]:
    return {}


def _band_verdict(plan: ExperimentPlan, fit: SlopeFit) -> tuple[bool, str]:
    reasons = []
    if plan.slope_min is not None and fit.ci_low < plan.slope_min:
        reasons.append(f"CI lower bound {fit.ci_low:.3f} < {plan.slope_min}")
    if plan.slope_max is not None and fit.slope > plan.slope_max:
        reasons.append(f"slope {fit.slope:.3f} > {plan.slope_max}")
    if plan.exclude_slope is not None and fit.ci_low <= plan.exclude_slope <= fit.ci_high:
        reasons.append(f"CI [{fit.ci_low:.3f}, {fit.ci_high:.3f}] contains {plan.exclude_slope}")
    summary = f"slope {fit.slope:.3f} CI [{fit.ci_low:.3f}, {fit.ci_high:.3f}]"
    if reasons:
        return False, f"{summary}; " + "; ".join(reasons)
    return True, summary


def _fitted_report(
    plan: ExperimentPlan, spec: PotentialSpec, results: List[GammaResult], seed: int
) -> BiasReport:
    rows = [row for result in results for row in result.rows]
    fit = fit_loglog_slope(
        [r.gamma for r in results], [r.primary for r in results], seed=seed
    )
    verdict, detail = _band_verdict(plan, fit)
    return BiasReport(
        experiment_id=plan.id,
        kind=plan.kind,
        potential=plan.potential,
        rows=rows,
        fit=fit,
        slope_min=plan.slope_min,
        slope_max=plan.slope_max,
        verdict=verdict,
        detail=detail,
    )


# --- Bias sweep ---


def _prepare_bias(plan, spec, seed, init) -> Dict[str, Any]:
    if has_exact_target(spec):
        return {"target": exact_target(spec)}
    if not plan.allow_approximate_reference:
        raise ReferenceUnavailable(
            f"{spec.name} has no exact reference and approximate references are disabled"
        )
    gamma_ref = plan.gammas[-1] / 16.0
    steps = max(1, burn_in_steps(plan.burn_in, spec, gamma_ref, init))
    reference = approximate_reference(
        spec, plan.gammas[-1], plan.reference_factor * plan.n_chains, steps, seed, init
    )
    return {"reference": reference.points}


def _reference_batches(shared, batches: List[np.ndarray], seed: int) -> List[np.ndarray]:
    """One reference sample per chain batch; approximate references are split alike."""
    if "target" in shared:
        return [reference_points(shared["target"], b.size, seed) for b in batches]
    return np.array_split(shared["reference"], len(batches))


def _measure_bias(plan, spec, shared, gamma, seed, init) -> GammaResult:
    steps = max(1, burn_in_steps(plan.burn_in, spec, gamma, init))
    logger.debug(f"{plan.id}: gamma={gamma:g}, {steps} steps x {plan.n_chains} chains")
    config = SamplerConfig(gamma=gamma, n_steps=steps, seed=seed)
    ensemble = run_ensemble(spec, config, init, n_chains=plan.n_chains, record_every=None)
    samples = ensemble.terminal
    if "target" in shared:
        reference = reference_points(shared["target"], plan.n_chains, seed)
    else:
        reference = shared["reference"]
    batches = _batches(plan.n_chains, plan.n_batches)
    batch_refs = _reference_batches(shared, batches, seed)
    rows, primary = [], None
    for p in plan.wasserstein_p:
        value = wasserstein(samples, reference, p, seed=seed)
        per_batch = [
            wasserstein(samples[b], ref, p, seed=seed) for b, ref in zip(batches, batch_refs)
        ]
        rows.append(
            _row(plan, gamma, f"w{p:g}", value, _batch_stderr(per_batch), plan.n_chains, seed)
        )
        if primary is None:
            primary = value
    if "target" in shared:
        mean_error = np.linalg.norm(samples.mean(axis=0) - target_mean(shared["target"]))
        rows.append(_row(plan, gamma, "mean_error", mean_error, None, plan.n_chains, seed))
    return GammaResult(gamma=gamma, rows=rows, primary=primary)


def _finish_fitted(plan, spec, shared, results, seed) -> ExperimentReport:
    report = _fitted_report(plan, spec, results, seed)
    if "consistency_ratio" in shared:
        report.rows.append(
            _row(
                plan,
                shared["check_gamma"],
                "reference_consistency",
                shared["consistency_ratio"],
                None,
                plan.n_chains,
                seed,
            )
        )
    return report


# --- Strong error sweep ---


def _strong_metric(plan: ExperimentPlan, stats, pair) -> float:
    return stats.mean_sup(pair) if plan.fit_metric == "mean_sup" else stats.sup_l2(pair)


def _horizon_steps(plan: ExperimentPlan, gamma: float) -> int:
    return max(1, int(round(plan.horizon / gamma)))


def _prepare_strong(plan, spec, seed, init) -> Dict[str, Any]:
    gamma = plan.check_gamma or plan.gammas[0]
    config = SamplerConfig(gamma=gamma, n_steps=_horizon_steps(plan, gamma), seed=seed)
    stats = reference_consistency(
        spec, config, init, plan.n_chains, plan.refinement, plan.check_refinement
    )
    signal = _strong_metric(plan, stats, (1, plan.refinement))
    discrepancy = _strong_metric(plan, stats, (plan.refinement, plan.check_refinement))
    ratio = discrepancy / signal if signal > 0 else 0.0
    logger.info(
        f"{plan.id}: reference M={plan.refinement} vs M={plan.check_refinement} "
        f"at gamma={gamma:g}: ratio {ratio:.3g}"
    )
    if ratio > plan.max_consistency_ratio:
        raise ReferenceInconsistent(
            f"{plan.id}: M={plan.refinement} reference differs from M={plan.check_refinement} "
            f"by {ratio:.3g} of the coarse error (limit {plan.max_consistency_ratio})"
        )
    return {"consistency_ratio": ratio, "check_gamma": gamma}


def _measure_strong(plan, spec, shared, gamma, seed, init) -> GammaResult:
    config = SamplerConfig(gamma=gamma, n_steps=_horizon_steps(plan, gamma), seed=seed)
    pair = (1, plan.refinement)
    stats = run_coupled_ensemble(
        spec, config, init, pair, np.arange(plan.n_chains, dtype=np.int64)
    )
    sup = stats.sup_error[pair]
    mean_sup = stats.mean_sup(pair)
    sup_l2 = stats.sup_l2(pair)
    rows = [
        _row(plan, gamma, "mean_sup", mean_sup, _batch_stderr(sup), plan.n_chains, seed),
        _row(plan, gamma, "sup_l2", sup_l2, None, plan.n_chains, seed),
    ]
    primary = mean_sup if plan.fit_metric == "mean_sup" else sup_l2
    return GammaResult(gamma=gamma, rows=rows, primary=primary)


# --- Contraction ---


def _contraction_inits(plan, spec, init):
    if plan.init_b is not None:
        if len(plan.init_b) != spec.dimension:
            raise ValueError(f"{plan.id}: init_b must have {spec.dimension} entries")
        return init, np.asarray(plan.init_b, dtype=float)
    offset = np.zeros(spec.dimension)
    offset[0] = 4.0
    return init, default_init(spec, start=init + offset)


def _exact_rate(spec: PotentialSpec, gamma: float) -> Optional[float]:
    if isinstance(spec, QuadraticPotential):
        return -math.log(1.0 - gamma * spec.curvature)
    return None


def _measure_contraction(plan, spec, shared, gamma, seed, init) -> GammaResult:
    init_a, init_b = _contraction_inits(plan, spec, init)
    n_steps = max(4, math.ceil(plan.decay / (spec.mu * gamma)))
    config = SamplerConfig(gamma=gamma, n_steps=n_steps, seed=seed)
    distances, _ = run_synchronous_ensemble(
        spec, config, init_a, init_b, np.arange(plan.n_chains, dtype=np.int64)
    )
    mean_distance = distances.mean(axis=0)
    rows = [
        _row(plan, gamma, "final_distance", mean_distance[-1], None, plan.n_chains, seed)
    ]
    if mean_distance[0] == 0.0:
        return GammaResult(gamma=gamma, rows=rows, extra={"skipped": True})
    steps = np.arange(n_steps + 1)
    positive = mean_distance > 0
    slope = np.polyfit(steps[positive], np.log(mean_distance[positive]), 1)[0]
    rate = -float(slope)
    rows.append(_row(plan, gamma, "rate", rate, None, plan.n_chains, seed))
    rows.append(
        _row(plan, gamma, "rate_over_mu_gamma", rate / (spec.mu * gamma), None, plan.n_chains, seed)
    )
    extra = {"rate": rate, "skipped": False}
    exact = _exact_rate(spec, gamma)
    if exact is not None:
        extra["rel_error"] = abs(rate - exact) / exact
        rows.append(
            _row(plan, gamma, "rate_rel_error", extra["rel_error"], None, plan.n_chains, seed)
        )
    return GammaResult(gamma=gamma, rows=rows, primary=rate, extra=extra)


def _finish_contraction(plan, spec, shared, results, seed) -> ExperimentReport:
    rows = [row for result in results for row in result.rows]
    failures, notes = [], []
    for result in results:
        if result.extra.get("skipped"):
            notes.append(f"gamma={result.gamma:g}: identical initial points, rate fit skipped")
            continue
        needed = plan.rate_fraction * spec.mu * result.gamma
        if result.extra["rate"] < needed:
            failures.append(
                f"gamma={result.gamma:g}: rate {result.extra['rate']:.4g} < {needed:.4g}"
            )
        rel = result.extra.get("rel_error")
        if plan.exact_rate_tolerance is not None and rel is not None:
            if rel > plan.exact_rate_tolerance:
                failures.append(f"gamma={result.gamma:g}: relative rate error {rel:.3g}")
    detail = "; ".join(failures or notes or ["all rates above the contraction bound"])
    return ExperimentReport(
        experiment_id=plan.id,
        kind=plan.kind,
        potential=plan.potential,
        rows=rows,
        verdict=not failures,
        detail=detail,
    )


# --- Crossing scaling ---


def _prepare_crossing(plan, spec, seed, init) -> Dict[str, Any]:
    if spec.geometry is None:
        raise ValueError(f"{spec.name}: crossing statistics need explicit region geometry")
    return {}


def _measure_crossing(plan, spec, shared, gamma, seed, init) -> GammaResult:
    geom = spec.geometry
    burn_in = burn_in_steps(plan.burn_in, spec, gamma, init)
    window_steps = max(1, math.ceil(plan.window / gamma))
    stepper = EnsembleStepper(
        spec,
        gamma,
        spec.beta,
        seed,
        np.arange(plan.n_chains, dtype=np.int64),
        init,
        dense_resolution=plan.dense_substeps,
    )
    for _ in range(burn_in):
        stepper.advance()
    batches = _batches(plan.n_chains, plan.n_batches)
    records = [CrossingRecord() for _ in batches]
    near, total = 0.0, 0
    half_width = geom.delta / 2.0
    for _ in range(window_steps):
        record = stepper.advance(dense=True)
        substates = substep_states(record, gamma, spec.beta)
        window = PathWindow(anchors=record.x_prev, substates=substates, gamma=gamma)
        for i, batch in enumerate(batches):
            part = PathWindow(
                anchors=record.x_prev[batch], substates=substates[batch], gamma=gamma
            )
            records[i] = records[i].merge(crossing_fraction(part, geom))
        near += occupation_near_surface(window, geom, half_width) * window.n_times
        total += window.n_times
    merged = CrossingRecord()
    for rec in records:
        merged = merged.merge(rec)
    fractions = [rec.fraction for rec in records]
    rows = [
        _row(
            plan,
            gamma,
            "crossing_fraction",
            merged.fraction,
            _batch_stderr(fractions),
            plan.n_chains,
            seed,
        ),
        _row(plan, gamma, "occupation_half_delta", near / total, None, plan.n_chains, seed),
    ]
    return GammaResult(gamma=gamma, rows=rows, primary=merged.fraction)


# --- Increment scaling ---


def _measure_increments(plan, spec, shared, gamma, seed, init) -> GammaResult:
    burn_in = burn_in_steps(plan.burn_in, spec, gamma, init)
    stepper = EnsembleStepper(
        spec,
        gamma,
        spec.beta,
        seed,
        np.arange(plan.n_chains, dtype=np.int64),
        init,
        dense_resolution=plan.dense_substeps,
    )
    for _ in range(burn_in):
        stepper.advance()
    origin = stepper.x.copy()
    running = np.zeros(plan.n_chains)
    checkpoints = {2**j: None for j in range(plan.n_lags)}
    for step in range(1, max(checkpoints) + 1):
        record = stepper.advance(dense=True)
        substates = substep_states(record, gamma, spec.beta)
        squared = np.sum((substates - origin[:, None, :]) ** 2, axis=2).max(axis=1)
        end = np.sum((stepper.x - origin) ** 2, axis=1)
        running = np.maximum(running, np.maximum(squared, end))
        if step in checkpoints:
            checkpoints[step] = running.copy()
    rows, lags, values = [], [], []
    for steps, sup in checkpoints.items():
        lag = steps * gamma
        mean = float(sup.mean())
        rows.append(
            _row(plan, gamma, "increment_sq", mean, _batch_stderr(sup), plan.n_chains, seed, lag)
        )
        lags.append(lag)
        values.append(mean)
    fit = fit_loglog_slope(lags, values, seed=seed)
    return GammaResult(gamma=gamma, rows=rows, primary=fit.slope, extra={"fit": fit})


def _finish_increments(plan, spec, shared, results, seed) -> ExperimentReport:
    rows = [row for result in results for row in result.rows]
    verdicts = [_band_verdict(plan, result.extra["fit"]) for result in results]
    detail = "; ".join(
        f"gamma={result.gamma:g}: {text}" for result, (_, text) in zip(results, verdicts)
    )
    return BiasReport(
        experiment_id=plan.id,
        kind=plan.kind,
        potential=plan.potential,
        rows=rows,
        fit=results[0].extra["fit"],
        slope_min=plan.slope_min,
        slope_max=plan.slope_max,
        verdict=all(ok for ok, _ in verdicts),
        detail=detail,
    )


# --- Moment stability ---


def _measure_moments(plan, spec, shared, gamma, seed, init) -> GammaResult:
    burn_in = max(1, burn_in_steps(plan.burn_in, spec, gamma, init))
    horizon = max(plan.n_windows, math.ceil(plan.horizon_factor * burn_in))
    stepper = EnsembleStepper(
        spec, gamma, spec.beta, seed, np.arange(plan.n_chains, dtype=np.int64), init
    )
    for _ in range(burn_in):
        stepper.advance()
    edges = np.linspace(0, horizon, plan.n_windows + 1).round().astype(int)
    window_means = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        total = 0.0
        for _ in range(hi - lo):
            stepper.advance()
            total += float(np.mean(np.sum(stepper.x**2, axis=1)))
        window_means.append(total / max(hi - lo, 1))
    trend = linregress(np.arange(plan.n_windows), window_means)
    one_sided = trend.pvalue / 2.0 if trend.slope > 0 else 1.0 - trend.pvalue / 2.0
    upward = trend.slope > 0 and one_sided < plan.trend_significance
    rows = [
        _row(
            plan,
            gamma,
            "second_moment",
            np.mean(window_means),
            _batch_stderr(window_means),
            plan.n_chains,
            seed,
        ),
        _row(plan, gamma, "trend_slope", trend.slope, trend.stderr, plan.n_chains, seed),
        _row(plan, gamma, "trend_p_upward", one_sided, None, plan.n_chains, seed),
    ]
    return GammaResult(gamma=gamma, rows=rows, extra={"upward": upward, "slope": trend.slope})


def _finish_moments(plan, spec, shared, results, seed) -> ExperimentReport:
    rows = [row for result in results for row in result.rows]
    rising = [r for r in results if r.extra["upward"]]
    if rising:
        detail = "; ".join(
            f"gamma={r.gamma:g}: significant upward trend {r.extra['slope']:.3g}/window"
            for r in rising
        )
    else:
        detail = "no significant upward trend in the second moment"
    return ExperimentReport(
        experiment_id=plan.id,
        kind=plan.kind,
        potential=plan.potential,
        rows=rows,
        verdict=not rising,
        detail=detail,
    )


# --- Oracle checks ---


def _random_instance(rng: np.random.Generator, max_points: int):
    n = int(rng.integers(1, max_points + 1))
    scale = 10.0 ** rng.uniform(-2.0, 2.0)
    a = scale * rng.standard_normal(n)
    b = scale * rng.standard_normal(n) + rng.normal(0.0, scale)
    # ties exercise the stable sort path
    if n > 1 and rng.random() < 0.25:
        b[rng.integers(n)] = a[rng.integers(n)]
    return a, b


def _pairing_gap(plan: ExperimentPlan, seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(plan.n_instances):
        a, b = _random_instance(rng, plan.max_points)
        for p in (1.0, 2.0):
            exact = wasserstein_permutation(a, b, p)
            gap = abs(wasserstein_1d(a, b, p) - exact)
            worst = max(worst, gap / max(1.0, exact))
    return worst


def _normalizer_gap(spec: LaplaceGaussianPosterior1D) -> float:
    mix = build_mixture(spec)
    oracle = quadrature_log_masses(spec)
    return float(np.max(np.abs(np.expm1(mix.log_masses - oracle))))


def _prepare_oracles(plan, spec, seed, init) -> Dict[str, Any]:
    mono = check_strong_monotonicity(spec, plan.n_samples, seed)
    growth = check_growth(spec, plan.n_samples, sampling_radius(spec), seed)
    rows = [
        _row(plan, None, "monotonicity_min_ratio", mono.min_ratio, None, plan.n_samples, seed),
        _row(plan, None, "growth_max_ratio", growth.max_ratio, None, plan.n_samples, seed),
    ]
    failures = []
    if not mono.passed:
        failures.append(f"monotonicity ratio {mono.min_ratio:.6g} < mu={spec.mu:g}")
    if not growth.passed:
        failures.append(f"growth ratio {growth.max_ratio:.6g} > L={spec.growth_L:g}")

    if isinstance(spec, LaplaceGaussianPosterior1D) and spec.k and not math.isinf(spec.beta):
        gap = _normalizer_gap(spec)
        rows.append(_row(plan, None, "normalizer_rel_error", gap, None, spec.k + 1, seed))
        if not gap <= plan.normalizer_tolerance:
            failures.append(f"interval masses off quadrature by {gap:.3g}")

    gap = _pairing_gap(plan, seed)
    rows.append(_row(plan, None, "pairing_gap", gap, None, plan.n_instances, seed))
    if not gap <= plan.pairing_tolerance:
        failures.append(f"wasserstein_1d off the exhaustive pairing by {gap:.3g}")
    return {"rows": rows, "failures": failures}


def _finish_oracles(plan, spec, shared, results, seed) -> ExperimentReport:
    failures = shared["failures"]
    return ExperimentReport(
        experiment_id=plan.id,
        kind=plan.kind,
        potential=plan.potential,
        rows=shared["rows"],
        verdict=not failures,
        detail="; ".join(failures) or "all oracle checks agree",
    )


RUNNERS: Dict[str, ExperimentRunner] = {
    "bias_sweep": ExperimentRunner(_prepare_bias, _measure_bias, _finish_fitted),
    "strong_error_sweep": ExperimentRunner(_prepare_strong, _measure_strong, _finish_fitted),
    "contraction": ExperimentRunner(_no_preparation, _measure_contraction, _finish_contraction),
    "crossing_scaling": ExperimentRunner(_prepare_crossing, _measure_crossing, _finish_fitted),
    "increment_scaling": ExperimentRunner(_no_preparation, _measure_increments, _finish_increments),
    "moment_stability": ExperimentRunner(_no_preparation, _measure_moments, _finish_moments),
    "oracle_checks": ExperimentRunner(_prepare_oracles, None, _finish_oracles),
}


def run_plan(
    plan: ExperimentPlan, spec: PotentialSpec, seed: Optional[int] = None
) -> ExperimentReport:
    """Run one plan serially in the calling thread."""
    seed = experiment_seed(settings.DEFAULT_SEED, plan) if seed is None else seed
    init = plan_init(plan, spec)
    runner = RUNNERS[plan.kind]
    shared = runner.prepare(plan, spec, seed, init)
    results = [runner.measure(plan, spec, shared, g, seed, init) for g in plan.gammas]
    return runner.finish(plan, spec, shared, results, seed)


def _require(plan: ExperimentPlan, kind: str) -> None:
    if plan.kind != kind:
        raise ValueError(f"plan {plan.id} is a {plan.kind} plan, not {kind}")


def run_bias_sweep(plan, spec, seed=None) -> BiasReport:
    _require(plan, "bias_sweep")
    return run_plan(plan, spec, seed)


def run_strong_error_sweep(plan, spec, seed=None) -> BiasReport:
    _require(plan, "strong_error_sweep")
    return run_plan(plan, spec, seed)


def run_contraction(plan, spec, seed=None) -> ExperimentReport:
    _require(plan, "contraction")
    return run_plan(plan, spec, seed)


def run_crossing_scaling(plan, spec, seed=None) -> BiasReport:
    _require(plan, "crossing_scaling")
    return run_plan(plan, spec, seed)


def run_increment_scaling(plan, spec, seed=None) -> BiasReport:
    _require(plan, "increment_scaling")
    return run_plan(plan, spec, seed)


def run_moment_stability(plan, spec, seed=None) -> ExperimentReport:
    _require(plan, "moment_stability")
    return run_plan(plan, spec, seed)


def run_oracle_checks(plan, spec, seed=None) -> ExperimentReport:
    _require(plan, "oracle_checks")
    return run_plan(plan, spec, seed)


# --- Suite loading and validation ---


@dataclass
class LoadedExperiment:
    plan: ExperimentPlan
    spec: PotentialSpec
    potential_document: Dict[str, Any]
    seed: int


@dataclass
class LoadedSuite:
    path: Path
    suite: SuiteConfig
    experiments: List[LoadedExperiment]


def _resolve_potential(
    suite: SuiteConfig, name: str, base_dir: Path, cache: Dict[str, tuple]
) -> tuple:
    if name in cache:
        return cache[name]
    if name in suite.potentials:
        config = suite.potentials[name]
        resolved = (build_potential(config, name=name), config.model_dump(mode="json"))
    else:
        path = base_dir / name
        if not path.is_file():
            raise ConfigError(f"unknown potential {name!r}: not in [potentials] and no file {path}")
        resolved = (load_potential(path), read_document(path))
    cache[name] = resolved
    return resolved


def load_suite(path: Union[str, Path], seed: Optional[int] = None) -> LoadedSuite:
    """Parse and validate a suite config, building every referenced potential."""
    path = Path(path)
    document = read_document(path)
    try:
        suite = SuiteConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"{path}: {_format_validation_error(e)}") from e
    if seed is not None:
        suite = suite.model_copy(update={"seed": seed})
    cache: Dict[str, tuple] = {}
    experiments = []
    for plan in suite.experiments:
        try:
            spec, potential_document = _resolve_potential(suite, plan.potential, path.parent, cache)
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"{path}: potential {plan.potential!r}: {e}") from e
        experiments.append(
            LoadedExperiment(
                plan=plan,
                spec=spec,
                potential_document=potential_document,
                seed=experiment_seed(suite.seed, plan),
            )
        )
    return LoadedSuite(path=path, suite=suite, experiments=experiments)


def check_stepsize_guards(loaded: LoadedSuite, override: bool = False) -> List[str]:
    """Refuse any stepsize at or above ``mu / (2 L^2)`` unless overridden.

    Returns warnings for overridden violations.
    """
    warnings = []
    for item in loaded.experiments:
        guard = stepsize_guard(item.spec)
        offending = [g for g in item.plan.gammas if g >= guard.convergence_bound]
        if not offending:
            continue
        message = (
            f"experiment {item.plan.id}: gamma {offending} not below mu/(2L^2) = "
            f"{item.spec.mu:g}/(2*{guard.constant_L:g}^2) = {guard.convergence_bound:.6g}"
        )
        if not (override or item.plan.override_stepsize_guard):
            raise StepsizeGuardError(
                f"{message}; set override_stepsize_guard or pass --override-stepsize-guard"
            )
        logger.warning(f"{message} (override in effect)")
        warnings.append(message)
    return warnings


def input_hash(item: LoadedExperiment) -> str:
    data = {
        "plan": item.plan.model_dump(mode="json"),
        "potential": item.potential_document,
        "seed": item.seed,
    }
    serialized = json.dumps(data, sort_keys=True)
    return hashlib.sha256(serialized.encode("utf-8")).hexdigest()


def _commit() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _report_model(kind: str):
    return BiasReport if kind in FITTED_KINDS else ExperimentReport


# --- Orchestration ---


class Orchestrator:
    def __init__(
        self,
        db_session_factory=AsyncSessionLocal,
        max_workers: int = settings.MAX_WORKERS,
        use_cache: bool = True,
    ):
        self.db_session_factory = db_session_factory
        self.semaphore = asyncio.Semaphore(max_workers)
        self.use_cache = use_cache
        self.commit = _commit()

    async def run_suite(self, loaded: LoadedSuite) -> List[ExperimentReport]:
        tasks = [self.run_experiment(item) for item in loaded.experiments]
        # gather keeps submission order, so outputs do not depend on scheduling
        return list(await asyncio.gather(*tasks))

    async def run_experiment(self, item: LoadedExperiment) -> ExperimentReport:
        plan = item.plan
        digest = input_hash(item)
        if self.use_cache:
            cached = await self._find_completed(digest)
            if cached is not None:
                logger.info(f"Reusing stored report for {plan.id} ({digest[:12]})")
                report = _report_model(plan.kind).model_validate_json(cached.report_json)
                report.provenance = report.provenance.model_copy(update={"cached": True})
                return report

        run_id = await self._record_start(plan, digest)
        logger.info(f"Experiment {plan.id} ({plan.kind}) started on {item.spec.name}")
        started = time.perf_counter()
        error = None
        try:
            runner = RUNNERS[plan.kind]
            init = plan_init(plan, item.spec)
            shared = await self._offload(runner.prepare, plan, item.spec, item.seed, init)
            results = await asyncio.gather(
                *[
                    self._offload(runner.measure, plan, item.spec, shared, g, item.seed, init)
                    for g in plan.gammas
                ]
            )
            report = runner.finish(plan, item.spec, shared, list(results), item.seed)
        except Exception as e:
            logger.exception(f"Experiment {plan.id} failed: {e}")
            error = f"{type(e).__name__}: {e}"
            report = ExperimentReport(
                experiment_id=plan.id,
                kind=plan.kind,
                potential=plan.potential,
                rows=[],
                verdict=False,
                detail=error,
            )
        report.provenance = Provenance(
            seed=item.seed,
            n_chains=plan.n_chains,
            commit=self.commit,
            wall_time_s=time.perf_counter() - started,
            input_hash=digest,
        )
        await self._record_finish(run_id, report, error)
        logger.info(
            f"Experiment {plan.id} finished: {'PASS' if report.verdict else 'FAIL'} ({report.detail})"
        )
        return report

    async def _offload(self, fn, *args):
        async with self.semaphore:
            return await asyncio.to_thread(fn, *args)

    async def _find_completed(self, digest: str) -> Optional[ExperimentRun]:
        async with self.db_session_factory() as session:
            stmt = (
                select(ExperimentRun)
                .where(
                    ExperimentRun.input_hash == digest,
                    ExperimentRun.status == "completed",
                )
                .order_by(ExperimentRun.created_at.desc())
            )
            result = await session.execute(stmt)
            return result.scalars().first()

    async def _record_start(self, plan: ExperimentPlan, digest: str):
        async with self.db_session_factory() as session:
            run = ExperimentRun(
                experiment_id=plan.id, kind=plan.kind, input_hash=digest, status="running"
            )
            session.add(run)
            await session.commit()
            return run.id

    async def _record_finish(self, run_id, report: ExperimentReport, error: Optional[str]):
        async with self.db_session_factory() as session:
            run = await session.get(ExperimentRun, run_id)
            run.status = "failed" if error else "completed"
            run.error = error
            run.report_json = report.model_dump_json()
            await session.commit()


# --- Outputs ---


def write_reports(reports: List[ExperimentReport], out_dir: Union[str, Path]) -> List[SummaryRow]:
    """Per-experiment CSVs, ``summary.csv`` and ``verdicts.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for report in reports:
        frame = pd.DataFrame([row.model_dump() for row in report.rows], columns=METRIC_COLUMNS)
        frame.to_csv(out_dir / f"{report.experiment_id}.csv", index=False, float_format="%.17g")
        fit = report.fit
        summary.append(
            SummaryRow(
                experiment_id=report.experiment_id,
                kind=report.kind,
                potential=report.potential,
                slope=fit.slope if fit else None,
                ci_low=fit.ci_low if fit else None,
                ci_high=fit.ci_high if fit else None,
                slope_min=report.slope_min,
                slope_max=report.slope_max,
                verdict=report.verdict,
                detail=report.detail,
            )
        )
    pd.DataFrame([row.model_dump() for row in summary], columns=SUMMARY_COLUMNS).to_csv(
        out_dir / "summary.csv", index=False, float_format="%.17g"
    )
    verdicts = {
        "all_passed": all(r.verdict for r in reports),
        "experiments": {
            r.experiment_id: {
                "kind": r.kind,
                "verdict": r.verdict,
                "detail": r.detail,
                "provenance": r.provenance.model_dump() if r.provenance else None,
            }
            for r in reports
        },
    }
    (out_dir / "verdicts.json").write_text(json.dumps(verdicts, indent=2), encoding="utf-8")
    return summary


@dataclass
class SuiteOutcome:
    exit_code: int
    summary: List[SummaryRow]
    out_dir: Path


async def run_all(
    config_path: Union[str, Path],
    out_dir: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    override_stepsize_guard: bool = False,
    use_cache: bool = True,
) -> SuiteOutcome:
    """Run every plan of a suite and write its outputs; exit code 0 iff all pass.

    Config and guard errors propagate to the caller.
    """
    loaded = load_suite(config_path, seed=seed)
    check_stepsize_guards(loaded, override=override_stepsize_guard)
    await init_db()
    orchestrator = Orchestrator(
        max_workers=threads or settings.MAX_WORKERS, use_cache=use_cache
    )
    reports = await orchestrator.run_suite(loaded)
    target = Path(out_dir or settings.OUTPUT_DIR)
    summary = write_reports(reports, target)
    exit_code = 0 if all(r.verdict for r in reports) else 1
    logger.info(
        f"Suite {loaded.path.name}: {sum(r.verdict for r in reports)}/{len(reports)} passed"
    )
    return SuiteOutcome(exit_code=exit_code, summary=summary, out_dir=target)
