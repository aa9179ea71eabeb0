"""End-to-end experiment harness: simulate, fit weights, train, evaluate.

Replicates draw fresh cohorts from seeds derived from the master seed and run
in a process pool capped by the TVSURV_THREADS environment variable. Outputs
under the configured directory: summary.csv, replicate_*.json,
epochs_*.jsonl, weights.csv. Reruns with identical configs are byte-identical
apart from the timestamp field in meta.json.
"""

import csv
import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import build_grid, seq_key
from .metrics import (EvalReport, brier_by_horizon, c_index, integrated_brier,
                      irmse, tv_pehe)
from .model import ModelConfig, encode, predict_survival, represent
from .simulate import DgpConfig, dgp_constants, simulate, true_survival_batch
from .training import TrainConfig, train
from .weights import (fit_propensity, stabilized_weights, trim_weights,
                      weight_diagnostics)

ABLATION_VARIANTS = ("full", "no_balancing", "flattened_history",
                     "unit_weights", "unstabilized_weights", "fixed_representation")
DEFAULT_SWEEP_BETAS = (0.1, 0.25, 0.5, 0.75, 1.0)
METRIC_NAMES = ("tv_pehe", "c_index", "ibs", "irmse")


@dataclass
class ExperimentConfig:
    dgp: DgpConfig
    model: ModelConfig
    train: TrainConfig
    grid_m: int = 20
    grid_strategy: str = "quantile"
    contrast: str = ""  # "111...,000..." ; empty = all-treat vs never-treat
    replications: int = 10
    out_dir: str = "runs/experiment"
    master_seed: int = 0
    propensity_pooled: bool = True
    propensity_l2: float = 1e-3
    trim_lower: float = 0.01
    trim_upper: float = 0.99

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def to_dict(self):
        d = dataclasses.asdict(self)
        return d


DEFAULTS = ExperimentConfig(
    dgp=DgpConfig(n=5000, K=8, d=10, feedback=0.5, confounding=2.0,
                  nonlinear=True, censor_rate=0.2, seed=0),
    model=ModelConfig(d=10, K=8, hidden=32, repr_dim=16, head_hidden=32, m=20),
    train=TrainConfig(),
)


def _coerce(value):
    low = value.strip()
    if low.lower() in ("true", "false"):
        return low.lower() == "true"
    for cast in (int, float):
        try:
            return cast(low)
        except ValueError:
            pass
    return low


def parse_config_file(path):
    """Flat key = value file with dotted sections (dgp.n, train.alpha, ...)."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            values[key.strip()] = _coerce(val)
    return values


def experiment_config_from_dict(values):
    cfg = replace(DEFAULTS, dgp=replace(DEFAULTS.dgp),
                  model=replace(DEFAULTS.model), train=replace(DEFAULTS.train))
    sections = {"dgp": cfg.dgp, "model": cfg.model, "train": cfg.train}
    for key, val in values.items():
        if "." in key:
            section, _, fieldname = key.partition(".")
            if section not in sections or not hasattr(sections[section], fieldname):
                raise ValueError(f"unknown config key {key!r}")
            setattr(sections[section], fieldname, val)
        else:
            target = {"out": "out_dir", "seed": "master_seed"}.get(key, key)
            if not hasattr(cfg, target):
                raise ValueError(f"unknown config key {key!r}")
            setattr(cfg, target, val)
    # keep dependent dimensions in sync with the DGP
    cfg.model.d = cfg.dgp.d
    cfg.model.K = cfg.dgp.K
    cfg.model.m = cfg.grid_m
    return cfg


def load_experiment_config(path):
    return experiment_config_from_dict(parse_config_file(path))


def contrast_sequences(K, spec=""):
    """The two treatment sequences whose effect curves are compared.

    spec: "bits,bits" (e.g. "110,000"); empty means all-treat vs never-treat.
    """
    if not spec:
        return np.ones(K + 1, dtype=np.int64), np.zeros(K + 1, dtype=np.int64)
    parts = spec.split(",")
    if len(parts) != 2:
        raise ValueError(f"contrast must be two comma-separated sequences, "
                         f"got {spec!r}")
    seqs = []
    for part in parts:
        if len(part) != K + 1 or set(part) - {"0", "1"}:
            raise ValueError(f"contrast sequence {part!r} must be {K + 1} bits")
        seqs.append(np.array([int(c) for c in part], dtype=np.int64))
    return tuple(seqs)


def predict_cohort_curves(params, cohort, sequence=None):
    """Survival curves (n, m) under one target sequence, or the factual
    sequences when sequence is None. Batched to bound graph size."""
    out = []
    for start in range(0, len(cohort), 1024):
        batch = cohort.trajectories[start:start + 1024]
        z = represent(params, encode(params, batch))
        if sequence is None:
            seqs = np.stack([tr.treatments for tr in batch])
        else:
            seqs = np.broadcast_to(np.asarray(sequence, dtype=np.int64),
                                   (len(batch), cohort.K + 1))
        _, surv = predict_survival(params, z, seqs)
        out.append(surv.value)
    return np.concatenate(out, axis=0)


def evaluate_model(params, cohort, grid, dgp_config, contrast=""):
    """EvalReport for a trained model on a simulated cohort."""
    seq_hi, seq_lo = contrast_sequences(cohort.K, contrast)
    X = np.stack([tr.covariates for tr in cohort.trajectories])
    _, h0, _ = dgp_constants(dgp_config)
    true_hi = true_survival_batch(dgp_config, X, seq_hi, grid, h0=h0)
    true_lo = true_survival_batch(dgp_config, X, seq_lo, grid, h0=h0)
    pred_hi = predict_cohort_curves(params, cohort, seq_hi)
    pred_lo = predict_cohort_curves(params, cohort, seq_lo)
    pred_fact = predict_cohort_curves(params, cohort, None)

    times = cohort.observed_times
    events = cohort.events
    mid = int(np.ceil(grid.m / 2)) - 1
    risk = 1.0 - pred_fact[:, mid]
    report = EvalReport(
        tv_pehe=tv_pehe(pred_hi - pred_lo, true_hi - true_lo, grid),
        c_index=c_index(risk, times, events),
        ibs=integrated_brier(pred_fact, times, events, grid),
        irmse=irmse(np.concatenate([pred_hi, pred_lo]),
                    np.concatenate([true_hi, true_lo]), grid),
        brier_by_horizon=brier_by_horizon(pred_fact, times, events, grid),
        metadata={
            "n": len(cohort),
            "grid": grid.boundaries.tolist(),
            "contrast": [seq_key(seq_hi), seq_key(seq_lo)],
        },
    )
    return report


def variant_overrides(variant, cfg):
    """(model_config, train_config, mode) for one ablation variant."""
    model_cfg = replace(cfg.model)
    train_cfg = replace(cfg.train)
    if variant == "full":
        pass
    elif variant == "no_balancing":
        train_cfg.alpha = 0.0
        train_cfg.alpha_burnin = 0.0
    elif variant == "flattened_history":
        model_cfg.encoder = "flatten"
    elif variant == "unit_weights":
        train_cfg.weights_mode = "unit"
    elif variant == "unstabilized_weights":
        train_cfg.weights_mode = "unstabilized"
    elif variant == "fixed_representation":
        pass  # handled by the two-stage path in run_replicate
    else:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return model_cfg, train_cfg


def run_replicate(cfg, replicate, variant="full"):
    """One simulate/fit/train/evaluate pass. Returns (EvalReport, reports)."""
    seed = cfg.master_seed + replicate
    dgp = replace(cfg.dgp, seed=seed)
    cohort = simulate(dgp)
    grid = build_grid(cohort, cfg.grid_m, cfg.grid_strategy)
    prop = fit_propensity(cohort, pooled=cfg.propensity_pooled,
                          l2=cfg.propensity_l2)
    table = trim_weights(stabilized_weights(cohort, prop),
                         cfg.trim_lower, cfg.trim_upper)
    model_cfg, train_cfg = variant_overrides(variant, cfg)
    model_cfg = replace(model_cfg, seed=seed)
    train_cfg = replace(train_cfg, seed=seed)
    if variant == "fixed_representation":
        stage1 = replace(train_cfg, alpha=0.0, alpha_burnin=0.0,
                         epochs=max(1, train_cfg.epochs // 2))
        params, reports = train(cohort, grid, model_cfg, stage1, table)
        stage2 = replace(train_cfg, alpha=0.0, alpha_burnin=0.0,
                         epochs=max(1, train_cfg.epochs - stage1.epochs),
                         seed=seed + 10000)
        params, reports2 = train(
            cohort, grid, model_cfg, stage2, table,
            frozen_prefixes=("enc_", "phi_", "embed_treat", "flat_"),
            params=params)
        reports = reports + reports2
    else:
        params, reports = train(cohort, grid, model_cfg, train_cfg, table)
    report = evaluate_model(params, cohort, grid, dgp, cfg.contrast)
    report.metadata["replicate"] = replicate
    report.metadata["variant"] = variant
    report.metadata["seed"] = seed
    report.metadata["weight_diagnostics"] = weight_diagnostics(table)
    return report, reports, table, params


def _worker(args):
    cfg_dict, replicate, variant = args
    cfg = _config_from_plain_dict(cfg_dict)
    try:
        report, epochs, table, _ = run_replicate(cfg, replicate, variant)
        return {
            "replicate": replicate,
            "variant": variant,
            "report": report.to_dict(),
            "epochs": [r.to_dict() for r in epochs],
        }
    except Exception as err:  # recorded in the summary; other replicates go on
        return {"replicate": replicate, "variant": variant,
                "error": f"{type(err).__name__}: {err}"}


def _config_from_plain_dict(d):
    return ExperimentConfig(
        dgp=DgpConfig(**d["dgp"]),
        model=ModelConfig(**d["model"]),
        train=TrainConfig(**d["train"]),
        **{k: v for k, v in d.items() if k not in ("dgp", "model", "train")},
    )


def _pool_width(njobs):
    cap = os.environ.get("TVSURV_THREADS")
    width = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(width, njobs))


def _run_jobs(cfg, jobs):
    """jobs: list of (replicate, variant); returns results in job order."""
    args = [(cfg.to_dict(), rep, variant) for rep, variant in jobs]
    width = _pool_width(len(jobs))
    if width == 1:
        return [_worker(a) for a in args]
    with ProcessPoolExecutor(max_workers=width) as pool:
        return list(pool.map(_worker, args))


def _write_outputs(cfg, results, out_dir, sweep_key=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    rows = []
    for res in results:
        tag = f"{res['variant']}_{res['replicate']}"
        if sweep_key is not None:
            tag = f"{sweep_key}_{tag}"
        if "error" in res:
            rows.append({"variant": res["variant"], "replicate": res["replicate"],
                         "error": res["error"]})
            continue
        res["report"]["metadata"]["config_hash"] = chash
        res["report"]["metadata"]["master_seed"] = cfg.master_seed
        with open(out / f"replicate_{tag}.json", "w", encoding="utf-8") as fh:
            json.dump(res["report"], fh, indent=2, sort_keys=True)
        with open(out / f"epochs_{tag}.jsonl", "w", encoding="utf-8") as fh:
            for er in res["epochs"]:
                line = {"config_hash": chash, "master_seed": cfg.master_seed,
                        **er}
                fh.write(json.dumps(line, sort_keys=True) + "\n")
        row = {"variant": res["variant"], "replicate": res["replicate"]}
        for metric in METRIC_NAMES:
            row[metric] = res["report"][metric]
        if sweep_key is not None:
            row["feedback"] = sweep_key
        rows.append(row)
    return rows, chash


def _summarize(rows, group_cols):
    """Mean and std per (group, metric) over successful replicates."""
    groups = {}
    for row in rows:
        if "error" in row:
            continue
        key = tuple(row[c] for c in group_cols)
        groups.setdefault(key, []).append(row)
    summary = []
    for key in sorted(groups, key=repr):
        entry = dict(zip(group_cols, key))
        entry["n_replicates"] = len(groups[key])
        for metric in METRIC_NAMES:
            vals = np.array([r[metric] for r in groups[key]])
            entry[f"{metric}_mean"] = float(vals.mean())
            entry[f"{metric}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        summary.append(entry)
    return summary


def _write_summary_csv(path, summary, failures, chash, master_seed, group_cols):
    fields = (["config_hash", "master_seed"] + group_cols + ["n_replicates"]
              + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for entry in summary:
            row = {"config_hash": chash, "master_seed": master_seed, **entry}
            w.writerow(row)
    if failures:
        with open(str(path) + ".failures.json", "w", encoding="utf-8") as fh:
            json.dump(failures, fh, indent=2, sort_keys=True)


def _write_meta(out_dir, cfg, chash):
    with open(Path(out_dir) / "meta.json", "w", encoding="utf-8") as fh:
        json.dump({"config_hash": chash, "master_seed": cfg.master_seed,
                   "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
                   "config": cfg.to_dict()}, fh, indent=2, sort_keys=True)


def _dump_weights_csv(cfg, out_dir, chash):
    dgp = replace(cfg.dgp, seed=cfg.master_seed)
    cohort = simulate(dgp)
    prop = fit_propensity(cohort, pooled=cfg.propensity_pooled,
                          l2=cfg.propensity_l2)
    table = trim_weights(stabilized_weights(cohort, prop),
                         cfg.trim_lower, cfg.trim_upper)
    with open(Path(out_dir) / "weights.csv", "w", encoding="utf-8",
              newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "w_raw", "w_trimmed", "config_hash", "master_seed"])
        for i, tid in enumerate(table.ids):
            w.writerow([tid, repr(float(table.stabilized[i])),
                        repr(float(table.trimmed[i])), chash, cfg.master_seed])


def run_experiment(cfg, variants=("full",), out_dir=None):
    out_dir = out_dir or cfg.out_dir
    jobs = [(rep, variant) for variant in variants
            for rep in range(cfg.replications)]
    results = _run_jobs(cfg, jobs)
    rows, chash = _write_outputs(cfg, results, out_dir)
    ok = [r for r in rows if "error" not in r]
    failures = [r for r in rows if "error" in r]
    summary = _summarize(ok, ["variant"])
    _write_summary_csv(Path(out_dir) / "summary.csv", summary, failures, chash,
                       cfg.master_seed, ["variant"])
    _write_meta(out_dir, cfg, chash)
    _dump_weights_csv(cfg, out_dir, chash)
    return summary, rows


def run_ablation(cfg, out_dir=None):
    return run_experiment(cfg, variants=ABLATION_VARIANTS, out_dir=out_dir)


def run_feedback_sweep(cfg, betas=DEFAULT_SWEEP_BETAS, out_dir=None,
                       variants=("full", "no_balancing")):
    out_dir = out_dir or cfg.out_dir
    all_rows, summaries = [], []
    chash = cfg.config_hash()
    for beta in betas:
        sub = replace(cfg, dgp=replace(cfg.dgp, feedback=float(beta)))
        jobs = [(rep, variant) for variant in variants
                for rep in range(cfg.replications)]
        results = _run_jobs(sub, jobs)
        rows, _ = _write_outputs(sub, results, out_dir,
                                 sweep_key=f"beta{beta}")
        for row in rows:
            row["feedback"] = beta
        all_rows.extend(rows)
    ok = [r for r in all_rows if "error" not in r]
    failures = [r for r in all_rows if "error" in r]
    summaries = _summarize(ok, ["feedback", "variant"])
    _write_summary_csv(Path(out_dir) / "summary.csv", summaries, failures,
                       chash, cfg.master_seed, ["feedback", "variant"])
    _write_meta(out_dir, cfg, chash)
    return summaries, all_rows
