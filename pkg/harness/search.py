"""
Random hyperparameter search.

Up to `max_settings` points are drawn without replacement from the product
of the candidate grids, each is trained on the 90% split and scored with the
estimator's own validation metric on the held-out 10%. Deep IV is searched
stage by stage: treatment-model settings by validation log-likelihood first,
then value-network settings by regression loss with that model fixed.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from harness.config import save_config, with_defaults
from harness.experiment_runner import build_environment, make_dataset
from harness.registry import make_estimator
from tools.data import split
from tools.errors import ConfigError, SearchError, SolverError, TrainingAborted
from tools.utils import log, rng_stream

GridKey = Union[str, Tuple[str, ...]]

MAX_SETTINGS = 100

REGULARIZERS = [1e-8, 1e-6, 1e-4, 1e-2]
NET_LEARNING_RATES = [1e-5, 3e-5, 1e-4, 3e-4, 1e-3]
DEEP_IV_LEARNING_RATES = [1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3]
HIDDEN_UNITS = [(50, 50), (100, 100), (150, 150)]
LR_MULTIPLIERS = [1, 5, 10, 50]
OADAM_BETAS = [(0.0, 0.01), (0.5, 0.9)]

# A tuple key sets several hyperparameters from one candidate tuple.
SEARCH_SPACES: Dict[str, Dict[GridKey, list]] = {
    "lstd_q": {"ridge": [0.0, 1e-8, 1e-6, 1e-4]},
    "linear_dbrm": {"ridge": [0.0, 1e-8, 1e-6, 1e-4]},
    "linear_fqe": {"ridge": [0.0, 1e-8, 1e-6, 1e-4]},
    "kiv": {
        "lambda1": REGULARIZERS,
        "lambda2": REGULARIZERS,
        ("n_features", "instrument_features"): [(128, 128), (256, 256), (512, 512), (1024, 1024)],
    },
    "dbrm": {"learning_rate": NET_LEARNING_RATES},
    "fqe": {"learning_rate": NET_LEARNING_RATES, "target_update_period": [10, 100, 1000]},
    "dfiv": {
        "lambda1": REGULARIZERS,
        "lambda2": REGULARIZERS,
        "value_reg": REGULARIZERS,
        "instrument_reg": REGULARIZERS,
        "learning_rate": NET_LEARNING_RATES,
        "instrument_learning_rate": NET_LEARNING_RATES,
        "instrument_hidden": HIDDEN_UNITS,
    },
    "deepgmm": {
        "g_hidden": HIDDEN_UNITS,
        "learning_rate": NET_LEARNING_RATES,
        "lr_multiplier": LR_MULTIPLIERS,
        ("beta1", "beta2"): OADAM_BETAS,
    },
    "agmm": {
        "g_hidden": HIDDEN_UNITS,
        "learning_rate": NET_LEARNING_RATES,
        "lr_multiplier": LR_MULTIPLIERS,
        ("beta1", "beta2"): OADAM_BETAS,
        "q_reg": [1e-10, 1e-8, 1e-6, 1e-4, 1e-2],
        "g_reg": [1e-10, 1e-8, 1e-6, 1e-4, 1e-2],
    },
    "asem": {
        "g_hidden": HIDDEN_UNITS,
        "learning_rate": NET_LEARNING_RATES,
        "lr_multiplier": LR_MULTIPLIERS,
        ("beta1", "beta2"): OADAM_BETAS,
        "q_reg": REGULARIZERS,
        "g_reg": REGULARIZERS,
        "alpha": REGULARIZERS,
    },
}

DEEP_IV_STAGE1_SPACE: Dict[GridKey, list] = {
    "stage1_hidden": [(32, 32), (64, 64), (128, 128)],
    "n_components": [1, 3, 10],
    "stage1_learning_rate": DEEP_IV_LEARNING_RATES,
}
DEEP_IV_STAGE2_SPACE: Dict[GridKey, list] = {
    "n_mc_samples": [1, 3, 10],
    "learning_rate": DEEP_IV_LEARNING_RATES,
}


@dataclass(frozen=True)
class SearchSpec:
    estimator: str
    grid: Dict[GridKey, list] = field(default_factory=dict)
    max_settings: int = MAX_SETTINGS
    seed: int = 0

    def __post_init__(self):
        if self.max_settings < 1:
            raise ConfigError("max_settings must be >= 1")
        for key, candidates in self.grid.items():
            if not candidates:
                raise ConfigError(f"empty candidate list for {key!r}")

    @classmethod
    def default(cls, estimator: str, max_settings: int = MAX_SETTINGS, seed: int = 0) -> "SearchSpec":
        if estimator == "deep_iv":
            grid = {**DEEP_IV_STAGE1_SPACE, **DEEP_IV_STAGE2_SPACE}
        elif estimator in SEARCH_SPACES:
            grid = SEARCH_SPACES[estimator]
        else:
            raise ConfigError(f"no search space registered for {estimator!r}")
        return cls(estimator, dict(grid), max_settings, seed)

    @property
    def grid_size(self) -> int:
        return math.prod(len(c) for c in self.grid.values())

    def restricted(self, keys) -> "SearchSpec":
        return SearchSpec(self.estimator, {k: v for k, v in self.grid.items() if k in keys},
                          self.max_settings, self.seed)

    def decode(self, index: int) -> Dict:
        """Mixed-radix decode of a flat grid index; the first key varies slowest."""
        setting = {}
        for key, candidates in reversed(list(self.grid.items())):
            index, digit = divmod(index, len(candidates))
            value = candidates[digit]
            if isinstance(key, tuple):
                setting.update(zip(key, value))
            else:
                setting[key] = value
        return {k: setting[k] for k in sorted(setting)}

    def settings(self) -> List[Dict]:
        """min(max_settings, grid size) distinct settings, drawn uniformly without replacement."""
        size = self.grid_size
        n = min(self.max_settings, size)
        rng = rng_stream(self.seed, "search")
        if n == size:
            indices = rng.permutation(size)
        else:
            indices = rng.choice(size, size=n, replace=False)
        return [self.decode(int(i)) for i in indices]


# ---------------------------------------------------------------------------
# Evaluating one setting
# ---------------------------------------------------------------------------

def _prepare(config: Dict):
    mdp, policy = build_environment(config)
    seed = config["seed"]
    train, valid = split(make_dataset(config, mdp, seed), config["dataset"]["split_ratio"], seed)
    return mdp, policy, train, valid


def evaluate_setting(config: Dict, params: Dict, prepared=None, transition_model=None) -> Dict:
    """
    Fit one setting and score it. Aborted fits are reported, not raised;
    configuration errors still raise.
    """
    mdp, policy, train, valid = prepared or _prepare(config)
    name = config["estimator"]["name"]
    estimator = make_estimator(name, params, mdp, config["seed"], config["step_scale"],
                               transition_model=transition_model)
    try:
        fitted = estimator.fit(train, valid, policy)
        metric = float(estimator.validation_metric(fitted, valid, policy))
    except (TrainingAborted, SolverError) as e:
        log(f"[search] {name} setting aborted: {e}")
        return {"status": "aborted", "metric": None, "reason": type(e).__name__}
    if not np.isfinite(metric):
        return {"status": "aborted", "metric": None, "reason": "non-finite validation metric"}
    return {"status": "ok", "metric": metric, "reason": ""}


def _evaluate_stage1(config: Dict, params: Dict, prepared) -> Tuple[Dict, object]:
    mdp, policy, train, valid = prepared
    estimator = make_estimator("deep_iv", params, mdp, config["seed"], config["step_scale"])
    try:
        model, log_likelihood = estimator.fit_stage1(train, valid, policy)
    except (TrainingAborted, SolverError) as e:
        log(f"[search] deep_iv stage-1 setting aborted: {e}")
        return {"status": "aborted", "metric": None, "reason": type(e).__name__}, None
    metric = estimator.stage1_metric(log_likelihood)
    if not np.isfinite(metric):
        return {"status": "aborted", "metric": None, "reason": "non-finite log-likelihood"}, None
    return {"status": "ok", "metric": float(metric), "reason": ""}, model


def _evaluate_in_worker(args) -> Dict:
    config, params = args
    return evaluate_setting(config, params)


# ---------------------------------------------------------------------------
# Search driver
# ---------------------------------------------------------------------------

def _best(rows: List[Dict]) -> Optional[Dict]:
    ok = [r for r in rows if r["status"] == "ok"]
    return min(ok, key=lambda r: r["metric"]) if ok else None


def _census(rows: List[Dict]) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for r in rows:
        if r["status"] != "ok":
            counts[r["reason"]] = counts.get(r["reason"], 0) + 1
    return counts


def _run_stage(config: Dict, spec: SearchSpec, stage: str, base: Dict, prepared,
               transition_model=None) -> List[Dict]:
    settings = spec.settings()
    log(f"[search] {spec.estimator} {stage}: {len(settings)} of {spec.grid_size} settings")
    if config["n_workers"] > 1 and transition_model is None and stage == "all":
        jobs = [(config, {**base, **s}) for s in settings]
        with ProcessPoolExecutor(max_workers=config["n_workers"]) as executor:
            results = list(executor.map(_evaluate_in_worker, jobs))
    else:
        results = [evaluate_setting(config, {**base, **s}, prepared, transition_model) for s in settings]
    return [{"stage": stage, "index": i, "setting": s, **res} for i, (s, res) in enumerate(zip(settings, results))]


def _search_deep_iv(config: Dict, spec: SearchSpec, base: Dict, prepared) -> Tuple[List[Dict], Dict]:
    stage1_keys = set(DEEP_IV_STAGE1_SPACE)
    if base.get("model", "categorical") == "categorical":
        stage1_keys.discard("n_components")
    stage1 = spec.restricted(stage1_keys)
    stage2 = spec.restricted(set(DEEP_IV_STAGE2_SPACE))

    rows, models = [], []
    settings = stage1.settings()
    log(f"[search] deep_iv stage 1: {len(settings)} of {stage1.grid_size} settings")
    for i, s in enumerate(settings):
        res, model = _evaluate_stage1(config, {**base, **s}, prepared)
        rows.append({"stage": "stage1", "index": i, "setting": s, **res})
        models.append(model)
    best1 = _best(rows)
    if best1 is None:
        raise SearchError("every Deep IV stage-1 setting aborted", census=_census(rows))
    model = models[best1["index"]]
    chosen = {**base, **best1["setting"]}

    rows2 = _run_stage(config, stage2, "stage2", chosen, prepared, transition_model=model)
    rows.extend(rows2)
    best2 = _best(rows2)
    if best2 is None:
        raise SearchError("every Deep IV stage-2 setting aborted", census=_census(rows2))
    return rows, {**best1["setting"], **best2["setting"]}


def write_ledger(rows: List[Dict], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["stage", "index", "setting", "status", "metric", "reason"])
        for r in rows:
            metric = "" if r["metric"] is None else repr(float(r["metric"]))
            writer.writerow([r["stage"], r["index"], json.dumps(r["setting"], sort_keys=True),
                             r["status"], metric, r["reason"]])
    log(f"Search ledger written to: {path}")


def hyperparam_search(search: SearchSpec, config: Dict, write: bool = True) -> Dict:
    """
    Returns {"best": setting, "metric": value, "ledger": rows, "config": runnable config}.
    Writes search_ledger.csv and best_config.json under config["output"].
    """
    config = with_defaults(config)
    if search.estimator != config["estimator"]["name"]:
        config = copy.deepcopy(config)
        config["estimator"] = {"name": search.estimator, "params": {}}
    base = dict(config["estimator"]["params"])
    prepared = _prepare(config) if config["n_workers"] <= 1 or search.estimator == "deep_iv" else None

    if search.estimator == "deep_iv":
        rows, best_setting = _search_deep_iv(config, search, base, prepared)
        best_metric = _best([r for r in rows if r["stage"] == "stage2"])["metric"]
    else:
        rows = _run_stage(config, search, "all", base, prepared)
        best = _best(rows)
        if best is None:
            raise SearchError(f"every {search.estimator} setting aborted", census=_census(rows))
        best_setting, best_metric = best["setting"], best["metric"]

    best_config = copy.deepcopy(config)
    best_config["estimator"]["params"] = {**base, **{k: list(v) if isinstance(v, tuple) else v
                                                      for k, v in best_setting.items()}}
    log(f"[search] best {search.estimator} setting {best_setting} (metric {best_metric:.6g})")
    if write:
        os.makedirs(config["output"], exist_ok=True)
        write_ledger(rows, os.path.join(config["output"], "search_ledger.csv"))
        save_config(best_config, os.path.join(config["output"], "best_config.json"))
    return {"best": best_setting, "metric": best_metric, "ledger": rows, "config": best_config}
