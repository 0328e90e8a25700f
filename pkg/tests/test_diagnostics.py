import itertools
import math

import numpy as np
import pytest
from scipy.stats import wasserstein_distance

from app.features.diagnostics.models import CrossingRecord, EmpiricalMeasure, PathWindow
from app.features.diagnostics.service import (
    crossing_fraction,
    fit_loglog_slope,
    occupation_near_surface,
    projection_directions,
    wasserstein,
    wasserstein_1d,
    wasserstein_permutation,
    wasserstein_sliced,
    window_from_trajectory,
)
from app.features.sampler.schemas import SamplerConfig
from app.features.references.service import build_mixture, cdf, stratified_quantiles
from app.features.sampler.service import EnsembleStepper, run_chain, substep_states
from app.infrastructure.errors import DimensionMismatch, MissingCheckpoints, NonPositiveValue


def test_w2_two_point_example():
    assert wasserstein_1d([0.0, 1.0], [0.0, 2.0], p=2) == pytest.approx(math.sqrt(0.5))


def test_w1_identical_samples_is_zero(rng):
    a = rng.normal(size=300)
    assert wasserstein_1d(a, a.copy(), p=1) == 0.0


def test_w1_unequal_sizes_matches_scipy(rng):
    a = rng.normal(size=300)
    b = rng.normal(0.5, 1.2, size=170)
    assert wasserstein_1d(a, b, p=1) == pytest.approx(wasserstein_distance(a, b), rel=1e-10)


def test_weighted_measure_matches_scipy(rng):
    a = rng.normal(size=50)
    b = rng.normal(size=40)
    wa = rng.random(50)
    wa /= wa.sum()
    measure = EmpiricalMeasure(a, wa)
    expected = wasserstein_distance(a, b, u_weights=wa)
    assert wasserstein_1d(measure, b) == pytest.approx(expected, rel=1e-9)


def test_w1_translation():
    a = np.linspace(-1.0, 1.0, 101)
    assert wasserstein_1d(a, a + 0.3, p=1) == pytest.approx(0.3)
    assert wasserstein_1d(a, a + 0.3, p=2) == pytest.approx(0.3)


def _exhaustive_w1(a, b):
    return min(
        np.mean(np.abs(a - b[list(order)])) for order in itertools.permutations(range(b.size))
    )


def test_w1_matches_exhaustive_pairing():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        a = rng.normal(0.0, 3.0, size=n)
        b = rng.normal(rng.normal(), 3.0, size=n)
        if n > 1 and rng.random() < 0.25:
            b[0] = a[-1]
        assert abs(wasserstein_1d(a, b, p=1) - _exhaustive_w1(a, b)) < 1e-12


def test_w1_unequal_sizes_matches_exhaustive_pairing():
    # uniform measures on 2 and 3 points equal their 6-point replications
    rng = np.random.default_rng(7)
    for _ in range(50):
        a = rng.normal(size=2)
        b = rng.normal(size=3)
        expected = _exhaustive_w1(np.repeat(a, 3), np.repeat(b, 2))
        assert wasserstein_1d(a, b, p=1) == pytest.approx(expected, abs=1e-12)


def test_wasserstein_permutation_oracle():
    assert wasserstein_permutation([0.0, 1.0], [0.0, 2.0], p=2) == pytest.approx(math.sqrt(0.5))
    assert wasserstein_permutation([3.0, -1.0], [-1.0, 3.0]) == 0.0
    with pytest.raises(DimensionMismatch):
        wasserstein_permutation([0.0], [0.0, 1.0])


def test_w1_metric_axioms():
    rng = np.random.default_rng(99)
    for _ in range(300):
        a, b, c = (
            rng.normal(rng.normal(), 1.0 + rng.random(), size=int(rng.integers(1, 40)))
            for _ in range(3)
        )
        ab = wasserstein_1d(a, b)
        assert ab == pytest.approx(wasserstein_1d(b, a), abs=1e-12)
        assert wasserstein_1d(a, a.copy()) == 0.0
        assert ab >= 0.0
        assert wasserstein_1d(a, c) <= ab + wasserstein_1d(b, c) + 1e-12


def test_wasserstein_1d_rejects_higher_dimension(rng):
    with pytest.raises(DimensionMismatch):
        wasserstein_1d(rng.normal(size=(10, 2)), rng.normal(size=(10, 2)))


def test_empirical_measure_validation():
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.empty((0, 1)))
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros(3), np.array([0.5, 0.5, 0.5]))


def test_projection_directions_are_unit():
    directions = projection_directions(3, 128, seed=0)
    assert directions.shape == (128, 3)
    np.testing.assert_allclose(np.linalg.norm(directions, axis=1), 1.0)


def test_sliced_translation_bounds(rng):
    a = rng.normal(size=(2000, 2))
    v = np.array([0.6, 0.8])
    directions = projection_directions(2, 128, seed=0)
    oracle = float(np.mean(np.abs(directions @ v)))
    estimate = wasserstein_sliced(a, a + v, p=1, seed=0)
    assert estimate == pytest.approx(oracle, rel=1e-10)
    assert estimate <= 1.0


def test_sliced_rotation_invariance(rng):
    a = rng.normal(size=(3000, 2))
    b = rng.normal(size=(3000, 2)) * np.array([1.5, 1.5])
    angle = 0.7
    rotation = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    plain = wasserstein_sliced(a, b, seed=1)
    rotated = wasserstein_sliced(a @ rotation.T, b @ rotation.T, seed=1)
    assert rotated == pytest.approx(plain, rel=0.05)


def test_wasserstein_dispatch(rng):
    a = rng.normal(size=(100, 1))
    assert wasserstein(a, a + 1.0) == pytest.approx(1.0)
    with pytest.raises(DimensionMismatch):
        wasserstein_sliced(a, a)


def _window(posterior_1d, init, gamma=0.01, steps=20, seed=0, beta=1.0):
    config = SamplerConfig(gamma=gamma, n_steps=steps, seed=seed, beta=beta)
    trajectory = run_chain(posterior_1d, config, [init], dense_steps=range(steps))
    return window_from_trajectory(trajectory, posterior_1d)


def test_crossing_fraction_zero_inside_one_region(posterior_1d):
    window = _window(posterior_1d, 0.0, beta=float("inf"))
    record = crossing_fraction(window, posterior_1d.geometry)
    assert record.n_crossing == 0
    assert record.fraction == 0.0
    assert record.n_times == 20 * 8


def test_crossing_fraction_counts_a_deterministic_crossing(posterior_1d):
    # noiseless descent from just right of y=1 moves left through it
    window = _window(posterior_1d, 1.02, gamma=0.01, steps=1, beta=float("inf"))
    record = crossing_fraction(window, posterior_1d.geometry)
    # drift -(4 + 1.02) puts sub-steps 4..7 on the left of y=1
    assert record.n_crossing > 0
    assert record.per_surface.tolist() == [0, record.n_crossing]


def test_crossing_needs_fine_sub_grid(posterior_1d):
    config = SamplerConfig(gamma=0.01, n_steps=3, seed=0)
    trajectory = run_chain(posterior_1d, config, [0.0], dense_steps=range(3), dense_resolution=4)
    window = window_from_trajectory(trajectory, posterior_1d)
    with pytest.raises(MissingCheckpoints):
        crossing_fraction(window, posterior_1d.geometry)


def test_window_requires_dense_steps(posterior_1d):
    config = SamplerConfig(gamma=0.01, n_steps=3, seed=0)
    trajectory = run_chain(posterior_1d, config, [0.0])
    with pytest.raises(MissingCheckpoints):
        window_from_trajectory(trajectory, posterior_1d)
    with pytest.raises(MissingCheckpoints):
        window_from_trajectory(trajectory, posterior_1d, steps=[1])


def test_crossing_records_merge():
    a = CrossingRecord(n_times=10, n_crossing=2, per_surface=np.array([1, 1]))
    b = CrossingRecord(n_times=30, n_crossing=1, per_surface=np.array([0, 1]))
    merged = CrossingRecord().merge(a).merge(b)
    assert merged.fraction == pytest.approx(3 / 40)
    assert merged.per_surface.tolist() == [1, 2]


def test_occupation_far_from_surfaces_is_zero(posterior_1d):
    anchors = np.full((4, 1), 5.0)
    window = PathWindow(anchors=anchors, substates=np.full((4, 8, 1), 5.0), gamma=0.01)
    assert occupation_near_surface(window, posterior_1d.geometry, 0.1) == 0.0


def test_occupation_band_limits(posterior_1d):
    delta = posterior_1d.geometry.delta
    substates = np.linspace(-2.0, 2.0, 800).reshape(100, 8, 1)
    window = PathWindow(anchors=substates[:, 0, :], substates=substates, gamma=0.01)
    tiny = occupation_near_surface(window, posterior_1d.geometry, 1e-9)
    half = occupation_near_surface(window, posterior_1d.geometry, delta / 2)
    assert tiny == 0.0
    # two bands of width delta on an evenly spaced grid over [-2, 2]
    assert half == pytest.approx(2 * delta / 4.0, abs=0.01)
    with pytest.raises(ValueError):
        occupation_near_surface(window, posterior_1d.geometry, 2 * delta)
    with pytest.raises(ValueError):
        occupation_near_surface(window, posterior_1d.geometry, 0.0)


def test_equilibrium_occupation_matches_band_mass(posterior_1d):
    mix = build_mixture(posterior_1d)
    geom = posterior_1d.geometry
    gamma = 0.005
    stepper = EnsembleStepper(
        posterior_1d, gamma, 1.0, 17, np.arange(4000), stratified_quantiles(mix, 4000),
        dense_resolution=8,
    )
    widths = (geom.delta / 4, geom.delta / 2, geom.delta)
    near = np.zeros(len(widths))
    total = 0
    for _ in range(20):
        record = stepper.advance(dense=True)
        window = PathWindow(
            anchors=record.x_prev, substates=substep_states(record, gamma, 1.0), gamma=gamma
        )
        near += [occupation_near_surface(window, geom, a) * window.n_times for a in widths]
        total += window.n_times
    for a, measured in zip(widths, near / total):
        band = sum(cdf(mix, y + a) - cdf(mix, y - a) for y in (-1.0, 1.0))
        assert measured == pytest.approx(band, rel=0.1)


def test_slope_exact_power_laws():
    grid = np.geomspace(1e-4, 1e-1, 8)
    fit = fit_loglog_slope(grid, grid, bootstrap_n=500)
    assert fit.slope == pytest.approx(1.0, abs=1e-12)
    assert fit.ci_width < 1e-9
    half = fit_loglog_slope(grid, 3.0 * np.sqrt(grid), bootstrap_n=500)
    assert half.slope == pytest.approx(0.5, abs=1e-12)


def test_slope_is_scale_invariant(rng):
    grid = np.geomspace(1e-3, 1e-1, 6)
    values = np.sqrt(grid) * (1 + 0.05 * rng.standard_normal(6))
    a = fit_loglog_slope(grid, values, seed=2)
    b = fit_loglog_slope(grid, 7.5 * values, seed=2)
    assert a.slope == pytest.approx(b.slope, abs=1e-12)


def test_slope_with_noise_recovers_half(rng):
    grid = np.geomspace(1e-4, 1e-2, 8)
    hits = 0
    for _ in range(200):
        values = np.sqrt(grid) * (1 + 0.05 * rng.standard_normal(8))
        slope = fit_loglog_slope(grid, values, bootstrap_n=50).slope
        hits += 0.4 <= slope <= 0.6
    assert hits >= 190


def test_slope_rejects_bad_input():
    with pytest.raises(NonPositiveValue):
        fit_loglog_slope([1.0, 2.0, 3.0, 4.0], [1.0, 0.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        fit_loglog_slope([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
