import csv
import json

import numpy as np
import pytest

import app
from estimators.adversarial import AdversarialConfig
from harness.config import DEFAULTS, ESTIMATOR_NAMES, apply_env_overrides, load_config, with_defaults
from harness.experiment_runner import REPORT_SCHEMA, run_ablation, run_experiment, stability_census
from harness.registry import ESTIMATORS, make_estimator
from harness.report import build_report, load_reports, merge_reports
from harness.search import MAX_SETTINGS, SearchSpec, hyperparam_search
from tools.env import make_chain_mdp
from tools.errors import ConfigError, SearchError, SolverError

SMALL_ENV = {"n_states": 10, "p_advance": 0.5, "discount": 0.9}


def small_config(tmp_path, name="lstd_q", params=None, **extra):
    config = {
        "env": dict(SMALL_ENV),
        "dataset": {"n_transitions": 400},
        "estimator": {"name": name, "params": params if params is not None else {"features": "tabular"}},
        "n_seeds": 2,
        "output": str(tmp_path / "run"),
    }
    config.update(extra)
    return config


def write_json(path, payload):
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def test_defaults_follow_the_protocol():
    config = with_defaults({"estimator": {"name": "fqe"}})
    assert config["dataset"]["split_ratio"] == 0.9
    assert config["env"] == DEFAULTS["env"]
    assert config["estimator"]["params"] == {}
    assert with_defaults(config) == config


def test_partial_sections_are_merged():
    config = with_defaults({"estimator": {"name": "fqe"}, "env": {"n_states": 30}})
    assert config["env"]["n_states"] == 30 and config["env"]["p_advance"] == 0.5


@pytest.mark.parametrize("config, where", [
    ({"estimator": {"name": "fqe"}, "bogus": 1}, "<root>"),
    ({"estimator": {"name": "nope"}}, "estimator/name"),
    ({"estimator": {"name": "fqe"}, "env": {"p_advance": 0.0}}, "env/p_advance"),
    ({"estimator": {"name": "fqe"}, "dataset": {"n_transitions": 1}}, "dataset/n_transitions"),
])
def test_schema_errors_name_the_field(config, where):
    with pytest.raises(ConfigError) as info:
        with_defaults(config)
    assert info.value.details["path"] == where


def test_bad_json_reports_the_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n"estimator": ,\n}', encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_config(str(path))
    assert info.value.details["line"] == 2


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(str(tmp_path / "absent.json"))


def test_step_scale_environment_override(tmp_path, monkeypatch):
    path = write_json(tmp_path / "cfg.json", {"estimator": {"name": "fqe"}, "step_scale": 0.5})
    monkeypatch.setenv("IVOPE_STEP_SCALE", "0.5")
    assert load_config(path)["step_scale"] == 0.25
    monkeypatch.delenv("IVOPE_STEP_SCALE")
    assert load_config(path)["step_scale"] == 0.5


@pytest.mark.parametrize("value", ["abc", "0", "-1"])
def test_bad_step_scale_environment(monkeypatch, value):
    monkeypatch.setenv("IVOPE_STEP_SCALE", value)
    with pytest.raises(ConfigError):
        apply_env_overrides(with_defaults({"estimator": {"name": "fqe"}}))


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

def test_registry_matches_schema_names():
    assert set(ESTIMATORS) == set(ESTIMATOR_NAMES)
    assert len(ESTIMATOR_NAMES) == 11


@pytest.mark.parametrize("key", ["seed", "discount"])
def test_experiment_owned_params_are_rejected(key):
    with pytest.raises(ConfigError) as info:
        make_estimator("fqe", {key: 1})
    assert info.value.details["key"] == key


def test_unknown_estimator():
    with pytest.raises(ConfigError):
        make_estimator("sarsa")


def test_adversarial_name_sets_the_method():
    estimator = make_estimator("asem", {})
    assert isinstance(estimator.config, AdversarialConfig)
    assert estimator.config.method == "asem" and estimator.name == "asem"
    with pytest.raises(ConfigError):
        make_estimator("agmm", {"method": "asem"})


def test_experiment_fills_seed_discount_and_scale():
    mdp = make_chain_mdp(10, 0.5, discount=0.9)
    estimator = make_estimator("fqe", {}, mdp, seed=7, step_scale=0.01)
    assert estimator.config.seed == 7 and estimator.config.discount == 0.9
    assert estimator.config.n_steps == 1000
    assert make_estimator("deep_iv", {}, mdp).config.n_states == 10


def test_linear_config_rejects_unknown_features():
    with pytest.raises(ConfigError):
        make_estimator("lstd_q", {"features": "wavelet"})


def test_kiv_adapter_fits_the_chain(chain, chain_split, chain_policy):
    train, valid = chain_split
    estimator = make_estimator("kiv", {"n_features": 64, "instrument_features": 64}, chain, seed=1)
    fitted = estimator.fit(train, valid, chain_policy)
    assert np.isfinite(estimator.validation_metric(fitted, valid, chain_policy))


def test_linear_fqe_adapter_records_each_iteration(chain, chain_split, chain_policy):
    train, valid = chain_split
    estimator = make_estimator("linear_fqe", {"features": "tabular", "n_iters": 15}, chain,
                               value_probe=lambda fitted: 0.0)
    fitted = estimator.fit(train, valid, chain_policy)
    assert [p.step for p in fitted.curve] == list(range(1, 16))
    assert all(p.q_s0 == 0.0 for p in fitted.curve)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def test_run_experiment_writes_a_deterministic_report(tmp_path):
    config = small_config(tmp_path)
    report = run_experiment(config)
    path = tmp_path / "run" / "report.json"
    first = path.read_bytes()
    run_experiment(config)
    assert path.read_bytes() == first

    assert report["schema"] == REPORT_SCHEMA
    assert [r["seed"] for r in report["seeds"]] == [0, 1]
    assert report["aggregate"]["n_seeds"] == 2
    assert len(report["oracle"]["q_star"]) == 10
    for row in report["seeds"]:
        assert "wall_time_sec" not in row
        assert row["abs_error"] >= 0 and row["projected_rmse"] >= 0
        assert len(row["q_hat"]) == 10

    with open(tmp_path / "run" / "timings.csv", encoding="utf-8") as f:
        timings = list(csv.DictReader(f))
    assert [t["seed"] for t in timings] == ["0", "1"]


def test_run_writes_relative_curve_paths(tmp_path):
    config = small_config(tmp_path, "linear_fqe", {"features": "tabular", "n_iters": 10}, n_seeds=1)
    report = run_experiment(config)
    curve_path = report["seeds"][0]["curve_path"]
    assert curve_path == "curves/linear_fqe_seed0.csv"
    assert (tmp_path / "run" / curve_path).exists()


def test_parallel_seeds_match_sequential(tmp_path):
    sequential = run_experiment(small_config(tmp_path, n_workers=1), write=False)
    parallel = run_experiment(small_config(tmp_path, n_workers=2), write=False)
    assert parallel["seeds"] == sequential["seeds"]


def test_solver_failure_names_the_seed(tmp_path):
    config = small_config(tmp_path, params={"features": "grid", "n_features": 200})
    with pytest.raises(SolverError) as info:
        run_experiment(config, write=False)
    assert info.value.details["seed_index"] == 0


def test_ablation_writes_one_row_per_value_and_seed(tmp_path):
    config = small_config(tmp_path, n_seeds=1)
    reports, rows = run_ablation(config, "dataset_size", [300, 600])
    assert len(reports) == 2
    assert [r["value"] for r in rows] == [300, 600]
    with open(tmp_path / "run" / "ablation.csv", encoding="utf-8") as f:
        assert len(list(csv.DictReader(f))) == 2


def test_ablation_rejects_unknown_axis(tmp_path):
    with pytest.raises(ConfigError):
        run_ablation(small_config(tmp_path), "learning_rate", [1e-3])


def test_stability_census():
    reports = [
        {"estimator": "deepgmm", "seeds": [{"q_s0": 1.0}, {"q_s0": 3.0}]},
        {"estimator": "agmm", "seeds": [{"q_s0": 2.0}, {"q_s0": 2.0}]},
    ]
    assert stability_census(reports) == {"deepgmm": 1.0, "agmm": 0.0}


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

def test_kiv_grid_smaller_than_budget_is_exhausted():
    spec = SearchSpec.default("kiv")
    settings = spec.settings()
    assert spec.grid_size == 64 and len(settings) == 64
    assert len({json.dumps(s, sort_keys=True) for s in settings}) == 64


def test_large_grid_draws_distinct_settings():
    spec = SearchSpec.default("agmm", seed=3)
    settings = spec.settings()
    assert len(settings) == MAX_SETTINGS == 100
    assert len({json.dumps(s, sort_keys=True) for s in settings}) == 100
    assert settings == SearchSpec.default("agmm", seed=3).settings()


def test_decode_varies_the_last_key_fastest():
    spec = SearchSpec.default("kiv")
    assert spec.decode(0) == {"instrument_features": 128, "lambda1": 1e-8, "lambda2": 1e-8, "n_features": 128}
    assert spec.decode(1)["n_features"] == 256 and spec.decode(1)["instrument_features"] == 256
    assert spec.decode(4)["lambda2"] == 1e-6


def test_single_point_grid():
    assert SearchSpec("lstd_q", {"ridge": [0.0]}).settings() == [{"ridge": 0.0}]


def test_search_spec_validation():
    with pytest.raises(ConfigError):
        SearchSpec("lstd_q", {"ridge": []})
    with pytest.raises(ConfigError):
        SearchSpec("lstd_q", {"ridge": [0.0]}, max_settings=0)
    with pytest.raises(ConfigError):
        SearchSpec.default("nope")


def test_search_reports_aborted_settings_and_picks_the_best(tmp_path):
    config = small_config(tmp_path, params={"features": "grid", "n_features": 200})
    spec = SearchSpec("lstd_q", {"ridge": [0.0, 1e-4]})
    result = hyperparam_search(spec, config)
    statuses = {r["setting"]["ridge"]: r["status"] for r in result["ledger"]}
    assert statuses == {0.0: "aborted", 1e-4: "ok"}
    assert result["best"] == {"ridge": 1e-4}
    best_config = json.loads((tmp_path / "run" / "best_config.json").read_text(encoding="utf-8"))
    assert best_config["estimator"]["params"] == {"features": "grid", "n_features": 200, "ridge": 1e-4}
    with open(tmp_path / "run" / "search_ledger.csv", encoding="utf-8") as f:
        assert len(list(csv.DictReader(f))) == 2


def test_search_where_everything_aborts(tmp_path):
    config = small_config(tmp_path, params={"features": "grid", "n_features": 200})
    with pytest.raises(SearchError):
        hyperparam_search(SearchSpec("lstd_q", {"ridge": [0.0]}), config, write=False)


def test_deep_iv_search_runs_stage_by_stage(tmp_path):
    config = small_config(tmp_path, "deep_iv", {}, step_scale=1e-4)
    spec = SearchSpec("deep_iv", {"stage1_learning_rate": [1e-3, 1e-2], "n_components": [1, 3],
                                  "learning_rate": [1e-3]})
    result = hyperparam_search(spec, config, write=False)
    stages = [r["stage"] for r in result["ledger"]]
    assert stages == ["stage1", "stage1", "stage2"]
    assert set(result["best"]) == {"stage1_learning_rate", "learning_rate"}


def test_deep_iv_ledger_caps_each_stage_separately(tmp_path):
    config = small_config(tmp_path, "deep_iv", {}, step_scale=1e-4)
    spec = SearchSpec("deep_iv", {"stage1_learning_rate": [1e-3, 3e-3, 1e-2], "n_components": [1, 3],
                                  "learning_rate": [1e-3, 3e-3, 1e-2]}, max_settings=2)
    result = hyperparam_search(spec, config)
    stages = [r["stage"] for r in result["ledger"]]
    assert stages == ["stage1", "stage1", "stage2", "stage2"]
    with open(tmp_path / "run" / "search_ledger.csv", encoding="utf-8") as f:
        assert len(list(csv.DictReader(f))) == 4


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def test_merge_pools_identical_experiments(tmp_path):
    report = run_experiment(small_config(tmp_path), write=False)
    merged = merge_reports([report, report])
    assert len(merged) == 1
    assert merged[0]["n_reports"] == 2
    assert merged[0]["aggregate"]["n_seeds"] == 4


def test_merge_needs_input():
    with pytest.raises(ConfigError):
        merge_reports([])
    with pytest.raises(ConfigError):
        load_reports([])


def test_load_rejects_foreign_json(tmp_path):
    with pytest.raises(ConfigError):
        load_reports([write_json(tmp_path / "other.json", {"schema": "something/else"})])


def test_build_report_writes_summary_and_curves(tmp_path):
    run_experiment(small_config(tmp_path, "linear_fqe", {"features": "tabular", "n_iters": 5}))
    summary = build_report([str(tmp_path / "run")], str(tmp_path / "summary"))
    assert summary["n_inputs"] == 1
    with open(tmp_path / "summary" / "q_curves.csv", encoding="utf-8") as f:
        assert len(list(csv.DictReader(f))) == 2 * 10
    with open(tmp_path / "summary" / "error_curves.csv", encoding="utf-8") as f:
        assert len(list(csv.DictReader(f))) == 2 * 5
    assert (tmp_path / "summary" / "summary.json").exists()


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def test_cli_run_succeeds(tmp_path, capsys):
    config = small_config(tmp_path, n_seeds=1)
    path = write_json(tmp_path / "cfg.json", config)
    assert app.main(["run", "--config", path, "--output", str(tmp_path / "cli")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["estimator"] == "lstd_q"
    assert (tmp_path / "cli" / "report.json").exists()


def test_cli_config_error_exit_code(tmp_path, capsys):
    path = write_json(tmp_path / "cfg.json", {"estimator": {"name": "nope"}})
    assert app.main(["run", "--config", path]) == 2
    assert json.loads(capsys.readouterr().out)["error"] == "ConfigError"


def test_cli_missing_file_exit_code(tmp_path):
    assert app.main(["run", "--config", str(tmp_path / "absent.json")]) == 2


def test_cli_gen_data(tmp_path, capsys):
    path = write_json(tmp_path / "cfg.json", small_config(tmp_path))
    assert app.main(["gen-data", "--config", path, "--out", str(tmp_path / "data.csv"), "--seed", "4"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["rows"] == 400 and out["seed"] == 4


# ---------------------------------------------------------------------------
# Chain reproductions (full-size default chain, 5 seeds)
# ---------------------------------------------------------------------------

def mean_error(rows, value):
    return float(np.mean([r["q_s0_error"] for r in rows if r["value"] == value]))


@pytest.mark.slow
def test_ablation_trends_on_the_chain(tmp_path):
    base = {"estimator": {"name": "lstd_q"}, "n_seeds": 5, "output": str(tmp_path / "ablate")}

    _, rows = run_ablation(base, "dataset_size", [1_000, 10_000, 100_000])
    by_size = [mean_error(rows, n) for n in (1_000, 10_000, 100_000)]
    assert by_size[0] >= by_size[1] >= by_size[2]

    _, rows = run_ablation(base, "n_features", [10, 90])
    assert mean_error(rows, 10) > mean_error(rows, 90)

    _, rows = run_ablation(base, "p_advance", [1.0, 0.8, 0.6], ["linear_dbrm"])
    by_p = [mean_error(rows, p) for p in (1.0, 0.8, 0.6)]
    assert by_p[0] < by_p[1] < by_p[2]


# Step budgets for the nonlinear chain, as fractions of the default budgets.
# Five worker processes keep the three runs within 15 minutes.
NONLINEAR_STEP_SCALE = {"fqe": 0.6, "dfiv": 0.03, "agmm": 0.15}


def steps_to_threshold(report, output, seed_row, threshold=0.1):
    q_star = report["oracle"]["q_star"][0]
    with open(f"{output}/{seed_row['curve_path']}", encoding="utf-8") as f:
        for point in csv.DictReader(f):
            if abs(float(point["q_s0"]) - q_star) / abs(q_star) < threshold:
                return int(point["step"])
    return None


@pytest.mark.slow
def test_nonlinear_estimators_reach_the_chain_value(tmp_path):
    reached = {}
    for name, scale in NONLINEAR_STEP_SCALE.items():
        output = str(tmp_path / name)
        report = run_experiment({"estimator": {"name": name}, "n_seeds": 5, "n_workers": 5,
                                 "step_scale": scale, "output": output})
        q_star = report["oracle"]["q_star"][0]
        reached[name] = [steps_to_threshold(report, output, row) for row in report["seeds"]]
        assert all(step is not None for step in reached[name]), name
        final = np.mean([row["q_s0_error"] for row in report["seeds"]]) / abs(q_star)
        assert final < 0.1, name

    faster = sum(d < f for d, f in zip(reached["dfiv"], reached["fqe"]))
    assert faster >= 3
