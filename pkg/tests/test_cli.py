import json

import numpy as np
import pandas as pd
import pytest

from app.main import EXIT_CONFIG_ERROR, EXIT_OK, build_parser, main

SUITE = {
    "potentials": {"post": {"kind": "laplace_gaussian_1d", "observations": [-1.0, 1.0]}},
    "experiments": [
        {
            "id": "quick",
            "kind": "contraction",
            "potential": "post",
            "gammas": [0.05],
            "n_chains": 4,
            "init": [-2.5],
            "init_b": [2.5],
            "rate_fraction": 0.5,
        }
    ],
}


@pytest.fixture
def suite_path(tmp_path):
    path = tmp_path / "suite.json"
    path.write_text(json.dumps(SUITE))
    return path


def test_parser_accepts_global_flags():
    args = build_parser().parse_args(
        ["run", "c.toml", "--seed", "3", "--threads", "2", "--override-stepsize-guard"]
    )
    assert args.command == "run"
    assert args.seed == 3
    assert args.threads == 2
    assert args.override_stepsize_guard
    assert not args.no_cache


def test_list_potentials(capsys):
    assert main(["list-potentials"]) == EXIT_OK
    out = capsys.readouterr().out
    for kind in ("quadratic", "laplace_gaussian_1d", "laplace_gaussian_nd", "ball_penalty"):
        assert kind in out


def test_list_potentials_of_a_suite(suite_path, capsys):
    assert main(["list-potentials", "--config", str(suite_path)]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[0])
    assert summary["regularity_class"] == "PiecewiseLipschitz"


def test_validate(suite_path, capsys):
    assert main(["validate", str(suite_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "monotonicity ok" in out
    assert "1 experiment(s)" in out


def test_validate_refuses_large_stepsize(tmp_path):
    document = json.loads(json.dumps(SUITE))
    document["experiments"][0]["gammas"] = [0.9]
    path = tmp_path / "big.json"
    path.write_text(json.dumps(document))
    assert main(["validate", str(path)]) == EXIT_CONFIG_ERROR
    assert main(["validate", str(path), "--override-stepsize-guard"]) == EXIT_OK


def test_malformed_config_exits_two(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"experiments": [}')
    assert main(["validate", str(path)]) == EXIT_CONFIG_ERROR
    assert main(["run", str(tmp_path / "absent.toml")]) == EXIT_CONFIG_ERROR


def test_run_end_to_end(suite_path, tmp_path, capsys):
    out_dir = tmp_path / "results"
    code = main(["run", str(suite_path), "--out-dir", str(out_dir), "--no-cache"])
    assert code == EXIT_OK
    assert "quick" in capsys.readouterr().out
    assert (out_dir / "quick.csv").is_file()
    assert json.loads((out_dir / "verdicts.json").read_text())["all_passed"] is True


def test_slope_on_wide_csv(tmp_path, capsys):
    gamma = np.geomspace(1e-3, 1e-1, 6)
    path = tmp_path / "wide.csv"
    pd.DataFrame({"gamma": gamma, "w1": 2.0 * np.sqrt(gamma)}).to_csv(path, index=False)
    assert main(["slope", str(path), "--y", "w1"]) == EXIT_OK
    assert "slope 0.5000" in capsys.readouterr().out


def test_slope_on_results_csv(tmp_path, capsys):
    gamma = np.geomspace(1e-3, 1e-1, 5)
    frame = pd.DataFrame(
        {
            "gamma": np.r_[gamma, gamma],
            "metric_name": ["w1"] * 5 + ["w2"] * 5,
            "value": np.r_[gamma, gamma**0.25],
        }
    )
    path = tmp_path / "long.csv"
    frame.to_csv(path, index=False)
    assert main(["slope", str(path), "--y", "w2"]) == EXIT_OK
    assert "slope 0.2500" in capsys.readouterr().out
    assert main(["slope", str(path), "--metric", "w1"]) == EXIT_OK
    assert "slope 1.0000" in capsys.readouterr().out


def test_slope_unknown_column(tmp_path):
    path = tmp_path / "x.csv"
    pd.DataFrame({"gamma": [0.1, 0.2, 0.3, 0.4], "v": [1, 2, 3, 4]}).to_csv(path, index=False)
    assert main(["slope", str(path), "--y", "nope"]) == EXIT_CONFIG_ERROR
