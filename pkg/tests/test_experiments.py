import hashlib
import json
import math

import numpy as np
import pandas as pd
import pytest

from app.features.diagnostics.schemas import MetricRow
from app.features.experiments.schemas import BurnInPolicy, ExperimentPlan, ExperimentReport
from app.features.experiments.service import (
    burn_in_steps,
    check_stepsize_guards,
    default_init,
    expected_rate,
    experiment_seed,
    input_hash,
    load_suite,
    run_bias_sweep,
    run_contraction,
    run_crossing_scaling,
    run_increment_scaling,
    run_moment_stability,
    run_oracle_checks,
    run_plan,
    run_strong_error_sweep,
    write_reports,
)
from app.features.potentials.models import (
    FunctionPotential,
    LaplaceGaussianPosterior1D,
    QuadraticPotential,
)
from app.infrastructure.config import settings
from app.infrastructure.errors import (
    ConfigError,
    InsufficientBurnIn,
    ReferenceInconsistent,
    ReferenceUnavailable,
    StepsizeGuardError,
)


def _plan(**fields) -> ExperimentPlan:
    base = {"id": "t", "potential": "p", "gammas": [0.1]}
    base.update(fields)
    return ExperimentPlan(**base)


# --- Plan helpers ---


def test_experiment_seed():
    assert experiment_seed(1, _plan(kind="contraction", seed=5)) == 5
    derived = experiment_seed(1, _plan(id="a", kind="contraction"))
    digest = hashlib.sha256(b"1:a").digest()
    assert derived == int.from_bytes(digest[:8], "little")
    assert derived != experiment_seed(1, _plan(id="b", kind="contraction"))
    assert derived != experiment_seed(2, _plan(id="a", kind="contraction"))


def test_plan_validation():
    with pytest.raises(ValueError, match="strictly decreasing"):
        _plan(kind="bias_sweep", gammas=[0.1, 0.1])
    with pytest.raises(ValueError, match="dense_substeps"):
        _plan(kind="crossing_scaling", dense_substeps=4)
    with pytest.raises(ValueError, match="check_refinement"):
        _plan(kind="strong_error_sweep", refinement=64, check_refinement=64)
    with pytest.raises(ValueError, match="steps"):
        BurnInPolicy(mode="fixed")


def test_expected_rate(quadratic, posterior_2d):
    assert expected_rate(quadratic) == 0.5
    assert expected_rate(posterior_2d) == 0.25


def test_burn_in_auto(quadratic):
    policy = BurnInPolicy(diameter=1.0)
    # log(1 / (1e-4 * 0.01**0.5)) / 0.01
    assert burn_in_steps(policy, quadratic, 0.01, np.zeros(1)) == 1152
    assert burn_in_steps(BurnInPolicy(mode="none"), quadratic, 0.01, np.zeros(1)) == 0


def test_burn_in_default_diameter(quadratic):
    steps = burn_in_steps(BurnInPolicy(), quadratic, 0.01, np.array([3.0]))
    expected = math.ceil(math.log(4.0 / (1e-4 * 0.1)) / 0.01)
    assert steps == expected


def test_burn_in_fixed_and_limits(quadratic):
    policy = BurnInPolicy(mode="fixed", steps=2000, diameter=1.0)
    assert burn_in_steps(policy, quadratic, 0.01, np.zeros(1)) == 2000
    with pytest.raises(InsufficientBurnIn):
        burn_in_steps(
            BurnInPolicy(mode="fixed", steps=10, diameter=1.0), quadratic, 0.01, np.zeros(1)
        )
    with pytest.raises(InsufficientBurnIn, match="max_steps"):
        burn_in_steps(BurnInPolicy(max_steps=100), quadratic, 0.01, np.zeros(1))


def test_default_init_moves_off_surfaces(posterior_1d):
    assert default_init(posterior_1d).tolist() == [0.0]
    # prior mean on an observation is shifted by half the surface separation
    on_surface = LaplaceGaussianPosterior1D(observations=[0.0, 2.0])
    assert default_init(on_surface)[0] == pytest.approx(on_surface.geometry.delta / 2)
    assert not on_surface.on_discontinuity(default_init(on_surface)[None, :]).any()


# --- Runners ---


def test_contraction_quadratic_exact_rate(quadratic):
    plan = _plan(
        kind="contraction",
        gammas=[0.1, 0.05],
        n_chains=2,
        init=[0.0],
        init_b=[2.0],
        exact_rate_tolerance=1e-8,
    )
    report = run_contraction(plan, quadratic, seed=3)
    assert report.verdict
    rates = {r.gamma: r.value for r in report.rows if r.metric_name == "rate"}
    for gamma, rate in rates.items():
        assert rate == pytest.approx(-math.log(1 - gamma), rel=1e-9)
    assert all(r.seed == 3 and r.n_samples == 2 for r in report.rows)


def test_contraction_identical_inits_is_skipped(quadratic):
    plan = _plan(kind="contraction", n_chains=2, init=[0.5], init_b=[0.5])
    report = run_contraction(plan, quadratic, seed=0)
    assert report.verdict
    assert "skipped" in report.detail
    assert [r.metric_name for r in report.rows] == ["final_distance"]
    assert report.rows[0].value == 0.0


def test_contraction_posterior_rate(posterior_1d):
    plan = _plan(
        kind="contraction", gammas=[0.01], n_chains=100, init=[-2.5], init_b=[2.5]
    )
    report = run_contraction(plan, posterior_1d, seed=1)
    assert report.verdict, report.detail


def test_runner_rejects_other_kinds(quadratic):
    with pytest.raises(ValueError, match="not bias_sweep"):
        run_bias_sweep(_plan(kind="contraction"), quadratic)


def test_bias_sweep_rows_and_determinism(quadratic):
    plan = _plan(kind="bias_sweep", gammas=[0.2, 0.1, 0.05, 0.025], n_chains=200)
    report = run_bias_sweep(plan, quadratic, seed=11)
    names = [r.metric_name for r in report.rows]
    assert names == ["w1", "w2", "mean_error"] * 4
    assert all(r.value >= 0.0 for r in report.rows)
    assert report.fit.grid == [0.2, 0.1, 0.05, 0.025]
    assert report.verdict
    again = run_bias_sweep(plan, quadratic, seed=11)
    assert again.rows == report.rows


def test_bias_sweep_band_failure_is_reported(quadratic):
    plan = _plan(
        kind="bias_sweep", gammas=[0.2, 0.1, 0.05, 0.025], n_chains=200, slope_min=5.0
    )
    report = run_bias_sweep(plan, quadratic, seed=11)
    assert not report.verdict
    assert "< 5.0" in report.detail


def test_bias_sweep_without_reference(posterior_2d):
    plan = _plan(kind="bias_sweep", allow_approximate_reference=False)
    with pytest.raises(ReferenceUnavailable):
        run_bias_sweep(plan, posterior_2d, seed=0)


def test_strong_sweep_noiseless_quadratic_has_slope_one():
    spec = QuadraticPotential(beta=float("inf"))
    plan = _plan(
        kind="strong_error_sweep",
        gammas=[0.1, 0.05, 0.025, 0.0125],
        n_chains=2,
        init=[1.0],
        refinement=16,
        check_refinement=64,
    )
    report = run_strong_error_sweep(plan, spec, seed=0)
    assert report.fit.slope == pytest.approx(1.0, abs=0.1)
    consistency = [r for r in report.rows if r.metric_name == "reference_consistency"]
    assert len(consistency) == 1
    # (1/16 - 1/64) / (1 - 1/16) to first order
    assert consistency[0].value == pytest.approx(0.05, rel=0.2)


def test_strong_sweep_coarse_reference_is_inconsistent():
    spec = QuadraticPotential(beta=float("inf"))
    plan = _plan(
        kind="strong_error_sweep",
        gammas=[0.1],
        n_chains=2,
        init=[1.0],
        refinement=2,
        check_refinement=4,
    )
    with pytest.raises(ReferenceInconsistent):
        run_strong_error_sweep(plan, spec, seed=0)


def test_crossing_scaling_posterior(posterior_1d):
    plan = _plan(
        kind="crossing_scaling",
        gammas=[0.04, 0.02, 0.01, 0.005, 0.0025],
        n_chains=1000,
        burn_in={"mode": "none"},
        slope_min=0.4,
        slope_max=0.75,
    )
    report = run_crossing_scaling(plan, posterior_1d, seed=4)
    fractions = [r.value for r in report.rows if r.metric_name == "crossing_fraction"]
    assert len(fractions) == 5
    assert all(f > 0 for f in fractions)
    assert plan.slope_min <= report.fit.slope <= plan.slope_max


def test_crossing_scaling_needs_geometry(quadratic):
    plan = _plan(kind="crossing_scaling", n_chains=10)
    with pytest.raises(ValueError, match="geometry"):
        run_crossing_scaling(plan, quadratic, seed=0)


def test_increment_scaling_is_linear_in_lag(posterior_1d):
    plan = _plan(
        kind="increment_scaling", gammas=[0.01], n_chains=200, burn_in={"mode": "none"}
    )
    report = run_increment_scaling(plan, posterior_1d, seed=9)
    lags = [r.lag for r in report.rows]
    assert lags == pytest.approx([0.01, 0.02, 0.04, 0.08, 0.16])
    assert 0.85 < report.fit.slope < 1.15


def test_moment_stability_quadratic(quadratic):
    plan = _plan(kind="moment_stability", gammas=[0.1], n_chains=200)
    report = run_moment_stability(plan, quadratic, seed=2)
    assert report.verdict, report.detail
    second = next(r for r in report.rows if r.metric_name == "second_moment")
    # stationary variance of the discretized chain is 1 / (1 - gamma / 2)
    assert second.value == pytest.approx(1.0 / 0.95, rel=0.1)


def test_plan_gammas_by_kind():
    with pytest.raises(ValueError, match="at least one stepsize"):
        _plan(kind="contraction", gammas=[])
    with pytest.raises(ValueError, match="take no"):
        _plan(kind="oracle_checks", gammas=[0.1])
    assert _plan(kind="oracle_checks", gammas=[]).gammas == []


def test_oracle_checks_on_posterior(posterior_1d):
    plan = _plan(kind="oracle_checks", gammas=[], n_samples=20_000, n_instances=200)
    report = run_oracle_checks(plan, posterior_1d, seed=8)
    assert report.verdict, report.detail
    values = {r.metric_name: r.value for r in report.rows}
    assert set(values) == {
        "monotonicity_min_ratio",
        "growth_max_ratio",
        "normalizer_rel_error",
        "pairing_gap",
    }
    assert values["monotonicity_min_ratio"] >= posterior_1d.mu * (1 - 1e-9)
    assert values["normalizer_rel_error"] < 1e-8
    assert values["pairing_gap"] < 1e-12
    assert all(r.gamma is None for r in report.rows)


def test_oracle_checks_without_closed_form(posterior_2d):
    plan = _plan(kind="oracle_checks", gammas=[], n_samples=5000, n_instances=50)
    report = run_oracle_checks(plan, posterior_2d, seed=8)
    assert report.verdict, report.detail
    assert "normalizer_rel_error" not in {r.metric_name for r in report.rows}


def test_oracle_checks_flag_overstated_mu():
    spec = FunctionPotential(
        lambda x: 0.5 * x, dimension=1, mu=1.0, growth_m=0.0, growth_L=0.5, lipschitz_L=0.5
    )
    plan = _plan(kind="oracle_checks", gammas=[], n_samples=1000, n_instances=10)
    report = run_oracle_checks(plan, spec, seed=0)
    assert not report.verdict
    assert "monotonicity" in report.detail


def test_run_plan_uses_derived_seed(quadratic):
    plan = _plan(kind="contraction", n_chains=2, init=[0.0], init_b=[1.0])
    report = run_plan(plan, quadratic)
    assert report.rows[0].seed == experiment_seed(settings.DEFAULT_SEED, plan)


# --- Suite loading ---


SUITE = """
seed = 3

[potentials.post]
kind = "laplace_gaussian_1d"
observations = [-1.0, 1.0]

[[experiments]]
id = "c1"
kind = "contraction"
potential = "post"
gammas = [0.01]
n_chains = 10
"""


def test_load_suite(tmp_path):
    path = tmp_path / "suite.toml"
    path.write_text(SUITE)
    loaded = load_suite(path)
    assert len(loaded.experiments) == 1
    item = loaded.experiments[0]
    assert item.spec.name == "post"
    assert item.seed == experiment_seed(3, item.plan)
    assert load_suite(path, seed=4).experiments[0].seed == experiment_seed(4, item.plan)


def test_load_suite_potential_file(tmp_path):
    (tmp_path / "quad.json").write_text(json.dumps({"potential": {"kind": "quadratic"}}))
    suite = {
        "experiments": [
            {"id": "c", "kind": "contraction", "potential": "quad.json", "gammas": [0.1]}
        ]
    }
    path = tmp_path / "suite.json"
    path.write_text(json.dumps(suite))
    loaded = load_suite(path)
    assert loaded.experiments[0].spec.kind == "quadratic"


def test_load_suite_errors(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text(SUITE.replace("gammas = [0.01]", "gammas = [0.01, 0.02]"))
    with pytest.raises(ConfigError, match="experiments.0"):
        load_suite(path)
    duplicate = SUITE.split("[[experiments]]")[1]
    path.write_text(SUITE + "\n[[experiments]]" + duplicate)
    with pytest.raises(ConfigError, match="duplicate"):
        load_suite(path)
    path.write_text(SUITE.replace('potential = "post"', 'potential = "missing"'))
    with pytest.raises(ConfigError, match="missing"):
        load_suite(path)


def test_stepsize_guard_refusal_and_override(tmp_path):
    path = tmp_path / "suite.toml"
    path.write_text(SUITE.replace("gammas = [0.01]", "gammas = [0.6]"))
    loaded = load_suite(path)
    with pytest.raises(StepsizeGuardError, match=r"mu/\(2L\^2\)"):
        check_stepsize_guards(loaded)
    warnings = check_stepsize_guards(loaded, override=True)
    assert len(warnings) == 1
    assert "0.5" in warnings[0]


def test_input_hash_tracks_inputs(tmp_path):
    path = tmp_path / "suite.toml"
    path.write_text(SUITE)
    first = input_hash(load_suite(path).experiments[0])
    assert first == input_hash(load_suite(path).experiments[0])
    assert first != input_hash(load_suite(path, seed=99).experiments[0])
    path.write_text(SUITE.replace("n_chains = 10", "n_chains = 11"))
    assert first != input_hash(load_suite(path).experiments[0])


# --- Outputs ---


def test_write_reports(tmp_path):
    rows = [
        MetricRow(experiment_id="a", gamma=0.1, metric_name="rate", value=0.105, n_samples=2, seed=1)
    ]
    reports = [
        ExperimentReport(
            experiment_id="a", kind="contraction", potential="q", rows=rows, verdict=True, detail="ok"
        ),
        ExperimentReport(
            experiment_id="b", kind="contraction", potential="q", rows=[], verdict=False, detail="no"
        ),
    ]
    summary = write_reports(reports, tmp_path / "out")
    assert [s.verdict for s in summary] == [True, False]
    frame = pd.read_csv(tmp_path / "out" / "a.csv")
    assert list(frame.columns) == list(MetricRow.model_fields)
    assert frame["value"].iloc[0] == 0.105
    assert pd.read_csv(tmp_path / "out" / "b.csv").empty
    assert len(pd.read_csv(tmp_path / "out" / "summary.csv")) == 2
    verdicts = json.loads((tmp_path / "out" / "verdicts.json").read_text())
    assert verdicts["all_passed"] is False
    assert verdicts["experiments"]["a"]["verdict"] is True
