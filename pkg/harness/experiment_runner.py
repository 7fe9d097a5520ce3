# harness/experiment_runner.py

import copy
import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from estimators.adversarial import projected_rmse
from estimators.neural_estimators import write_curve
from harness import __version__
from harness.config import with_defaults
from harness.registry import make_estimator
from tools.data import TransitionDataset, generate_chain_dataset, resample_shifted, save_dataset, split
from tools.env import (
    TabularMdp,
    TabularPolicy,
    exact_q,
    make_chain_mdp,
    perturb_discrete_actions,
    single_action_policy,
)
from tools.errors import ConfigError, IvopeError
from tools.evaluation import chain_value_range, estimate_policy_value, q_table, score
from tools.utils import log, log_warning

REPORT_SCHEMA = "ivope.report/1"
ABLATION_AXES = ("dataset_size", "n_features", "p_advance", "alpha")


def build_environment(config: Dict) -> Tuple[TabularMdp, TabularPolicy]:
    env = config["env"]
    mdp = make_chain_mdp(env["n_states"], env["p_advance"], env["discount"])
    if env["p_random"]:
        mdp = perturb_discrete_actions(mdp, env["p_random"])
    return mdp, single_action_policy(mdp)


def make_dataset(config: Dict, mdp: TabularMdp, seed: int) -> TransitionDataset:
    spec = config["dataset"]
    if spec["alpha"] is None:
        return generate_chain_dataset(mdp, spec["n_transitions"], seed)
    return resample_shifted(mdp, spec["alpha"], spec["n_transitions"], seed)


def generate_data(config: Dict, path: str, seed: Optional[int] = None) -> TransitionDataset:
    """The dataset `run_experiment` would build for `seed`, written as CSV."""
    config = with_defaults(config)
    mdp, _ = build_environment(config)
    data = make_dataset(config, mdp, config["seed"] if seed is None else seed)
    save_dataset(data, path)
    log(f"Dataset written to: {path}")
    return data


def _q_at_start(fitted, mdp: TabularMdp) -> float:
    s0 = int(np.argmax(mdp.initial_dist))
    return float(fitted.q(np.array([[float(s0)]]), np.array([0]))[0])


def run_seed(config: Dict, seed_index: int) -> Dict:
    """One (dataset, fit, evaluation) run. Module-level so worker processes can pickle it."""
    mdp, policy = build_environment(config)
    seed = config["seed"] + seed_index
    name = config["estimator"]["name"]
    q_star = exact_q(mdp, policy)
    rho_true = float(mdp.initial_dist @ np.sum(policy.probs * q_star, axis=1))
    rho_min, rho_max = chain_value_range(mdp)

    start = time.time()
    try:
        train, valid = split(make_dataset(config, mdp, seed), config["dataset"]["split_ratio"], seed)
        estimator = make_estimator(
            name,
            config["estimator"]["params"],
            mdp,
            seed,
            config["step_scale"],
            value_probe=lambda fitted: _q_at_start(fitted, mdp),
        )
        fitted = estimator.fit(train, valid, policy)
        valid_metric = float(estimator.validation_metric(fitted, valid, policy))
    except IvopeError as e:
        e.details["seed_index"] = seed_index
        raise
    wall_time = time.time() - start

    rho_hat = estimate_policy_value(fitted, mdp, policy)
    q_hat = q_table(fitted, mdp)
    q_s0 = _q_at_start(fitted, mdp)
    s0 = int(np.argmax(mdp.initial_dist))
    scored = score(rho_hat, rho_true, rho_min, rho_max)

    curve_path = None
    curve = getattr(fitted, "curve", ())
    if curve:
        curve_dir = os.path.join(config["output"], "curves")
        os.makedirs(curve_dir, exist_ok=True)
        curve_path = os.path.join("curves", f"{name}_seed{seed}.csv")
        write_curve(curve, os.path.join(config["output"], curve_path))

    log(f"[{name}] seed {seed}: rho_hat={rho_hat:.6g} rho_true={rho_true:.6g} "
        f"abs_error={scored.normalized_error:.4g} ({wall_time:.1f}s)")
    return {
        "seed_index": seed_index,
        "seed": seed,
        "rho_hat": scored.rho_hat,
        "rho_true": scored.rho_true,
        "abs_error": scored.normalized_error,
        "q_s0": q_s0,
        "q_s0_error": abs(q_s0 - float(q_star[s0, 0])),
        "projected_rmse": projected_rmse(fitted, mdp, policy, q_star),
        "valid_metric": valid_metric,
        "q_hat": [float(v) for v in q_hat[:, 0]],
        "curve_path": curve_path,
        "wall_time_sec": wall_time,
    }


def aggregate(rows: Sequence[Dict]) -> Dict:
    """Mean and (population) std of the per-seed scalars."""
    out = {"n_seeds": len(rows)}
    for key in ("rho_hat", "abs_error", "q_s0_error", "projected_rmse", "valid_metric"):
        values = np.array([r[key] for r in rows], dtype=float)
        out[key] = {"mean": float(values.mean()), "std": float(values.std())}
    return out


def _run_all_seeds(config: Dict) -> List[Dict]:
    n_seeds, n_workers = config["n_seeds"], config["n_workers"]
    if n_workers <= 1 or n_seeds == 1:
        return [run_seed(config, i) for i in range(n_seeds)]

    rows = {}
    with ProcessPoolExecutor(max_workers=min(n_workers, n_seeds)) as executor:
        futures = {executor.submit(run_seed, config, i): i for i in range(n_seeds)}
        for future in as_completed(futures):
            try:
                rows[futures[future]] = future.result()
            except Exception:
                for other in futures:
                    other.cancel()
                raise
    return [rows[i] for i in range(n_seeds)]


def _write_timings(rows: Sequence[Dict], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["seed_index", "seed", "wall_time_sec"])
        for r in rows:
            writer.writerow([r["seed_index"], r["seed"], f"{r['wall_time_sec']:.3f}"])


def write_report(report: Dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    log(f"Report written to: {path}")


def run_experiment(config: Dict, write: bool = True) -> Dict:
    """
    env -> dataset -> 9:1 split -> fit -> evaluate against the DP oracle, once
    per seed. Writes report.json (deterministic) and timings.csv under
    config["output"].
    """
    config = with_defaults(config)
    mdp, policy = build_environment(config)
    name = config["estimator"]["name"]

    # Surface hyperparameter errors before any data is generated.
    make_estimator(name, config["estimator"]["params"], mdp, config["seed"], config["step_scale"])

    q_star = exact_q(mdp, policy)
    rho_min, rho_max = chain_value_range(mdp)
    os.makedirs(config["output"], exist_ok=True)
    log(f"Running {name} for {config['n_seeds']} seed(s) on chain "
        f"(n={mdp.n_states}, p={config['env']['p_advance']}, discount={mdp.discount})")

    rows = _run_all_seeds(config)
    timings = [{k: r[k] for k in ("seed_index", "seed", "wall_time_sec")} for r in rows]
    for r in rows:
        del r["wall_time_sec"]

    report = {
        "schema": REPORT_SCHEMA,
        "code_version": __version__,
        "estimator": name,
        "config": config,
        "oracle": {
            "q_star": [float(v) for v in q_star[:, 0]],
            "rho_true": rows[0]["rho_true"],
            "rho_min": rho_min,
            "rho_max": rho_max,
        },
        "seeds": rows,
        "aggregate": aggregate(rows),
    }
    if write:
        write_report(report, os.path.join(config["output"], "report.json"))
        _write_timings(timings, os.path.join(config["output"], "timings.csv"))
    return report


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

def _with_axis(config: Dict, axis: str, value) -> Dict:
    out = copy.deepcopy(config)
    if axis == "dataset_size":
        out["dataset"]["n_transitions"] = int(value)
    elif axis == "n_features":
        out["estimator"]["params"]["n_features"] = int(value)
    elif axis == "p_advance":
        out["env"]["p_advance"] = float(value)
    elif axis == "alpha":
        out["dataset"]["alpha"] = None if value is None else float(value)
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {list(ABLATION_AXES)}")
    return out


def run_ablation(
    base_config: Dict,
    axis: str,
    values: Sequence,
    estimator_names: Optional[Sequence[str]] = None,
) -> Tuple[List[Dict], List[Dict]]:
    """
    One experiment per (value, estimator). Returns the reports and the rows
    of ablation.csv: |Q_hat(s0) - Q*(s0)| per (axis value, estimator, seed).
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {list(ABLATION_AXES)}")
    if not values:
        raise ConfigError("ablation needs at least one axis value")
    base = with_defaults(base_config)
    names = list(estimator_names or [base["estimator"]["name"]])

    reports, rows = [], []
    for value in values:
        for name in names:
            config = copy.deepcopy(base)
            if name != config["estimator"]["name"]:
                config["estimator"] = {"name": name, "params": {}}
            config = _with_axis(config, axis, value)
            config["output"] = os.path.join(base["output"], f"{axis}={value}", name)
            log(f"Ablation {axis}={value}: {name}")
            report = run_experiment(config)
            reports.append(report)
            for r in report["seeds"]:
                rows.append({
                    "axis": axis,
                    "value": value,
                    "estimator": name,
                    "seed": r["seed"],
                    "q_s0_error": r["q_s0_error"],
                    "abs_error": r["abs_error"],
                })

    os.makedirs(base["output"], exist_ok=True)
    path = os.path.join(base["output"], "ablation.csv")
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["axis", "value", "estimator", "seed", "q_s0_error", "abs_error"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    log(f"Ablation table written to: {path}")
    return reports, rows


def stability_census(reports: Sequence[Dict]) -> Dict[str, float]:
    """
    Std of Q_hat(s0) across seeds per estimator. Logs a warning (never
    raises) when DeepGMM does not come out less stable than AGMM.
    """
    spread = {}
    for report in reports:
        values = [r["q_s0"] for r in report["seeds"]]
        spread.setdefault(report["estimator"], []).extend(values)
    stds = {name: float(np.std(values)) for name, values in spread.items()}
    if "deepgmm" in stds and "agmm" in stds:
        if stds["deepgmm"] <= stds["agmm"]:
            log_warning(f"stability census: DeepGMM std {stds['deepgmm']:.4g} does not exceed "
                        f"AGMM std {stds['agmm']:.4g}")
        else:
            log(f"stability census: DeepGMM std {stds['deepgmm']:.4g} > AGMM std {stds['agmm']:.4g}")
    return stds
