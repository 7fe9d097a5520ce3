# harness/report.py

import csv
import json
import os
from typing import Dict, List, Sequence, Tuple

from harness.experiment_runner import REPORT_SCHEMA, aggregate
from tools.errors import ConfigError
from tools.utils import log

LoadedReport = Tuple[str, Dict]


def load_reports(paths: Sequence[str]) -> List[LoadedReport]:
    """(path, report) pairs; a directory stands for its report.json."""
    if not paths:
        raise ConfigError("report needs at least one input report")
    loaded = []
    for path in paths:
        if os.path.isdir(path):
            path = os.path.join(path, "report.json")
        if not os.path.exists(path):
            raise FileNotFoundError(f"Report not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                report = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path} is not valid JSON: {e}", path=path)
        schema = report.get("schema") if isinstance(report, dict) else None
        if schema != REPORT_SCHEMA:
            raise ConfigError(f"{path} has schema {schema!r}, expected {REPORT_SCHEMA!r}", path=path)
        loaded.append((path, report))
    return loaded


def _group_key(report: Dict) -> str:
    config = report["config"]
    return json.dumps(
        {"estimator": report["estimator"], "env": config["env"], "dataset": config["dataset"],
         "params": config["estimator"]["params"]},
        sort_keys=True,
    )


def merge_reports(reports: Sequence[Dict]) -> List[Dict]:
    """
    Reports describing the same experiment (estimator, env, dataset and
    hyperparameters) are pooled: their seed rows are concatenated and the
    aggregate recomputed from them.
    """
    if not reports:
        raise ConfigError("nothing to merge")
    groups: Dict[str, Dict] = {}
    for report in reports:
        key = _group_key(report)
        if key not in groups:
            config = report["config"]
            groups[key] = {
                "estimator": report["estimator"],
                "env": config["env"],
                "dataset": config["dataset"],
                "params": config["estimator"]["params"],
                "n_reports": 0,
                "seeds": [],
            }
        groups[key]["n_reports"] += 1
        groups[key]["seeds"].extend(report["seeds"])
    merged = []
    for key in sorted(groups):
        group = groups[key]
        group["aggregate"] = aggregate(group["seeds"])
        merged.append(group)
    return merged


def _write_csv(path: str, header: List[str], rows: List[List]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    log(f"CSV written to: {path}")


def q_curve_rows(loaded: Sequence[LoadedReport]) -> List[List]:
    """Fitted Q over the states next to the oracle: one row per state per method per seed."""
    rows = []
    for _, report in loaded:
        q_star = report["oracle"]["q_star"]
        for seed_row in report["seeds"]:
            for state, (q_hat, q_true) in enumerate(zip(seed_row["q_hat"], q_star)):
                rows.append([report["estimator"], seed_row["seed"], state, repr(q_hat), repr(q_true)])
    return rows


def error_curve_rows(loaded: Sequence[LoadedReport]) -> List[List]:
    """|Q_hat(s0) - Q*(s0)| against training step (or FQE iteration), read from the curve files."""
    rows = []
    for path, report in loaded:
        base = os.path.dirname(path)
        q_star_s0 = report["oracle"]["q_star"][0]
        for seed_row in report["seeds"]:
            if not seed_row.get("curve_path"):
                continue
            curve_file = os.path.join(base, seed_row["curve_path"])
            if not os.path.exists(curve_file):
                raise FileNotFoundError(f"Training curve not found: {curve_file}")
            with open(curve_file, "r", encoding="utf-8", newline="") as f:
                for point in csv.DictReader(f):
                    q_s0 = float(point["q_s0"])
                    rows.append([report["estimator"], seed_row["seed"], int(point["step"]),
                                 repr(q_s0), repr(abs(q_s0 - q_star_s0)), point["valid_metric"]])
    return rows


def ablation_rows(loaded: Sequence[LoadedReport]) -> List[List]:
    rows = []
    for _, report in loaded:
        config = report["config"]
        n_features = config["estimator"]["params"].get("n_features", "")
        for seed_row in report["seeds"]:
            rows.append([
                report["estimator"],
                config["dataset"]["n_transitions"],
                n_features,
                config["env"]["p_advance"],
                "" if config["dataset"]["alpha"] is None else config["dataset"]["alpha"],
                seed_row["seed"],
                repr(seed_row["q_s0_error"]),
            ])
    return rows


def build_report(paths: Sequence[str], output: str) -> Dict:
    """Merge reports and write summary.json plus the curve and ablation CSVs into `output`."""
    loaded = load_reports(paths)
    merged = merge_reports([r for _, r in loaded])
    os.makedirs(output, exist_ok=True)

    _write_csv(os.path.join(output, "q_curves.csv"),
               ["estimator", "seed", "state", "q_hat", "q_star"], q_curve_rows(loaded))
    _write_csv(os.path.join(output, "error_curves.csv"),
               ["estimator", "seed", "step", "q_s0", "q_s0_error", "valid_metric"], error_curve_rows(loaded))
    _write_csv(os.path.join(output, "ablation_summary.csv"),
               ["estimator", "n_transitions", "n_features", "p_advance", "alpha", "seed", "q_s0_error"],
               ablation_rows(loaded))

    summary = {"schema": REPORT_SCHEMA, "n_inputs": len(loaded), "experiments": merged}
    summary_path = os.path.join(output, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    log(f"Summary written to: {summary_path}")
    return summary
