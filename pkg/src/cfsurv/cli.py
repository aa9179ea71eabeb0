"""Command-line entry point.

Subcommands: simulate, fit-weights, train, evaluate, experiment, ablate,
sweep-feedback, predict. Exit codes: 0 success, 2 config error, 3 data
error, 4 numerical failure.
"""

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import SchemaError, TimeGrid, build_grid, load_cohort, save_cohort
from .experiment import (DEFAULT_SWEEP_BETAS, evaluate_model,
                         load_experiment_config, predict_cohort_curves,
                         run_ablation, run_experiment, run_feedback_sweep)
from .model import ModelParams
from .simulate import DgpConfig, simulate
from .training import train
from .weights import (SeparationError, fit_propensity, load_weight_table,
                      save_weight_table, stabilized_weights, trim_weights,
                      weight_diagnostics)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _cmd_simulate(args):
    cfg = DgpConfig(n=args.n, K=args.k, d=args.d, feedback=args.feedback,
                    confounding=args.confounding, nonlinear=args.nonlinear,
                    censor_rate=args.censor_rate, seed=args.seed)
    cohort = simulate(cfg)
    save_cohort(cohort, args.out, fmt="jsonl")
    print(f"wrote {len(cohort)} trajectories to {args.out}")


def _cmd_fit_weights(args):
    cohort = load_cohort(args.data, fmt="jsonl")
    model = fit_propensity(cohort, pooled=args.pooled, l2=args.l2)
    lo, hi = (float(v) for v in args.trim.split(","))
    table = trim_weights(stabilized_weights(cohort, model), lo, hi)
    save_weight_table(table, args.out)
    diag_path = Path(args.out).with_suffix(".diagnostics.json")
    with open(diag_path, "w", encoding="utf-8") as fh:
        json.dump(weight_diagnostics(table), fh, indent=2, sort_keys=True)
    print(f"wrote weights to {args.out} and diagnostics to {diag_path}")


def _cmd_train(args):
    cfg = load_experiment_config(args.config)
    cohort = load_cohort(args.data, fmt="jsonl")
    cfg.model.d, cfg.model.K = cohort.d, cohort.K
    grid = build_grid(cohort, cfg.grid_m, cfg.grid_strategy)
    if args.weights:
        table = load_weight_table(args.weights)
    else:
        prop = fit_propensity(cohort, pooled=cfg.propensity_pooled,
                              l2=cfg.propensity_l2)
        table = trim_weights(stabilized_weights(cohort, prop),
                             cfg.trim_lower, cfg.trim_upper)
    params, reports = train(cohort, grid, cfg.model, cfg.train, table)
    params.save(args.out, extra={"grid": grid.boundaries.tolist()})
    epochs_path = Path(args.out).with_suffix(".epochs.jsonl")
    with open(epochs_path, "w", encoding="utf-8") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
    print(f"wrote checkpoint to {args.out}; epoch log to {epochs_path}")


def _cmd_evaluate(args):
    cfg = load_experiment_config(args.config)
    cohort = load_cohort(args.data, fmt="jsonl")
    params, extra = ModelParams.load(args.checkpoint)
    if "grid" not in extra:
        raise ValueError("checkpoint has no stored grid; retrain with `train`")
    grid = TimeGrid(np.asarray(extra["grid"]))
    dgp = replace(cfg.dgp, n=len(cohort), K=cohort.K, d=cohort.d)
    report = evaluate_model(params, cohort, grid, dgp)
    report.to_json(args.out)
    print(f"wrote evaluation report to {args.out}")


def _cmd_experiment(args):
    cfg = load_experiment_config(args.config)
    out = args.out or cfg.out_dir
    summary, _ = run_experiment(cfg, out_dir=out)
    print(f"wrote experiment outputs to {out}")
    _print_summary(summary)


def _cmd_ablate(args):
    cfg = load_experiment_config(args.config)
    out = args.out or cfg.out_dir
    summary, _ = run_ablation(cfg, out_dir=out)
    print(f"wrote ablation outputs to {out}")
    _print_summary(summary)


def _cmd_sweep_feedback(args):
    cfg = load_experiment_config(args.config)
    betas = ([float(b) for b in args.betas.split(",")] if args.betas
             else list(DEFAULT_SWEEP_BETAS))
    out = args.out or cfg.out_dir
    summary, _ = run_feedback_sweep(cfg, betas=betas, out_dir=out)
    print(f"wrote feedback sweep outputs to {out}")
    _print_summary(summary)


def _cmd_predict(args):
    cohort = load_cohort(args.data, fmt="jsonl")
    params, extra = ModelParams.load(args.checkpoint)
    if "grid" not in extra:
        raise ValueError("checkpoint has no stored grid; retrain with `train`")
    grid = TimeGrid(np.asarray(extra["grid"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seq_str in args.sequence:
        seq = np.array([int(c) for c in seq_str], dtype=np.int64)
        if seq.size != cohort.K + 1 or not np.isin(seq, (0, 1)).all():
            raise ValueError(f"sequence {seq_str!r} must be {cohort.K + 1} bits")
        curves = predict_cohort_curves(params, cohort, seq)
        mean_curve = curves.mean(axis=0)
        path = out / f"curves_{seq_str}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "survival"])
            w.writerow([0.0, 1.0])
            for tau, s in zip(grid.boundaries[1:], mean_curve):
                w.writerow([tau, s])
        print(f"wrote cohort-mean counterfactual curve to {path}")


def _print_summary(summary):
    for entry in summary:
        label = " ".join(f"{k}={entry[k]}" for k in entry
                         if not k.endswith(("_mean", "_std")))
        stats = " ".join(
            f"{m}={entry[f'{m}_mean']:.4f}±{entry[f'{m}_std']:.4f}"
            for m in ("tv_pehe", "c_index", "ibs", "irmse")
        )
        print(f"  {label}: {stats}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cfsurv",
        description="Counterfactual survival under time-varying treatments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic cohort")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--feedback", type=float, default=0.5)
    p.add_argument("--confounding", type=float, default=1.0)
    p.add_argument("--nonlinear", action="store_true")
    p.add_argument("--censor-rate", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit-weights", help="fit propensity models and weights")
    p.add_argument("--data", required=True)
    p.add_argument("--pooled", action="store_true", default=True)
    p.add_argument("--per-step", dest="pooled", action="store_false")
    p.add_argument("--l2", type=float, default=1e-3)
    p.add_argument("--trim", default="0.01,0.99")
    p.add_argument("--out", default="weights.csv")
    p.set_defaults(func=_cmd_fit_weights)

    p = sub.add_parser("train", help="train a model on a cohort")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", help="weights CSV from fit-weights")
    p.add_argument("--out", default="checkpoint.json")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a cohort")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="eval.json")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("experiment", help="simulate/fit/train/evaluate replicates")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("ablate", help="run the six-variant ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep-feedback", help="sweep the feedback strength")
    p.add_argument("--config", required=True)
    p.add_argument("--betas", help="comma-separated feedback values")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_sweep_feedback)

    p = sub.add_parser("predict", help="emit counterfactual curves")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sequence", action="append", required=True,
                   help="treatment sequence bits, e.g. 011011011; repeatable")
    p.add_argument("--out", default="curves")
    p.set_defaults(func=_cmd_predict)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (FileNotFoundError, SchemaError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (SeparationError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
