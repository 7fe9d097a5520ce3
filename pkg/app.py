# app.py
"""
ivope command line.

    python app.py gen-data --config cfg.json --out data.csv
    python app.py run --config cfg.json
    python app.py ablate --config cfg.json --axis dataset_size --values 1000 10000 100000
    python app.py search --config cfg.json [--max-settings 100]
    python app.py report results/a results/b --out results/summary

On failure a JSON error object is printed and the exit code is 2 for
configuration errors, 1 otherwise.
"""

import argparse
import json
import sys

from harness.config import load_config
from harness.experiment_runner import ABLATION_AXES, generate_data, run_ablation, run_experiment, stability_census
from harness.report import build_report
from harness.search import MAX_SETTINGS, SearchSpec, hyperparam_search
from tools.errors import ConfigError, IvopeError


def _axis_value(text: str):
    if text.lower() in ("none", "null"):
        return None
    value = float(text)
    return int(value) if value.is_integer() and "." not in text and "e" not in text.lower() else value


def cmd_gen_data(args) -> dict:
    config = load_config(args.config)
    data = generate_data(config, args.out, args.seed)
    return {"path": args.out, "rows": len(data), "seed": data.seed, "source": data.source}


def cmd_run(args) -> dict:
    config = load_config(args.config)
    if args.output:
        config["output"] = args.output
    report = run_experiment(config)
    return {"output": config["output"], "estimator": report["estimator"], "aggregate": report["aggregate"]}


def cmd_ablate(args) -> dict:
    config = load_config(args.config)
    if args.output:
        config["output"] = args.output
    values = [_axis_value(v) for v in args.values]
    reports, rows = run_ablation(config, args.axis, values, args.estimators)
    return {"output": config["output"], "n_runs": len(reports), "n_rows": len(rows),
            "stability": stability_census(reports)}


def cmd_search(args) -> dict:
    config = load_config(args.config)
    if args.output:
        config["output"] = args.output
    spec = SearchSpec.default(config["estimator"]["name"], args.max_settings, config["seed"])
    result = hyperparam_search(spec, config)
    return {"output": config["output"], "best": result["best"], "metric": result["metric"],
            "n_evaluated": len(result["ledger"])}


def cmd_report(args) -> dict:
    summary = build_report(args.reports, args.out)
    return {"output": args.out, "n_inputs": summary["n_inputs"], "n_experiments": len(summary["experiments"])}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivope", description="Offline policy evaluation as IV regression")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset CSV")
    p.add_argument("--config", "-c", required=True)
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="fit one estimator over n_seeds and write report.json")
    p.add_argument("--config", "-c", required=True)
    p.add_argument("--output", "-o", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="sweep one axis and write ablation.csv")
    p.add_argument("--config", "-c", required=True)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--values", required=True, nargs="+")
    p.add_argument("--estimators", nargs="+", default=None)
    p.add_argument("--output", "-o", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("search", help="random hyperparameter search on the validation split")
    p.add_argument("--config", "-c", required=True)
    p.add_argument("--max-settings", type=int, default=MAX_SETTINGS)
    p.add_argument("--output", "-o", default=None)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("report", help="merge reports into summary.json and figure CSVs")
    p.add_argument("reports", nargs="*")
    p.add_argument("--out", "-o", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except IvopeError as e:
        print(json.dumps(e.to_dict(), sort_keys=True))
        return 2 if isinstance(e, ConfigError) else 1
    except FileNotFoundError as e:
        print(json.dumps({"error": "FileNotFoundError", "message": str(e)}, sort_keys=True))
        return 2
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
