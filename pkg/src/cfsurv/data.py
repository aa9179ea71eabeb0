"""Longitudinal cohort data model, (de)serialization and time discretization.

One Trajectory = one individual: covariate vectors X(0..K), binary treatments
T(0..K), right-censored outcome time and event indicator. Cohorts are balanced
panels: every individual shares the same covariate dimension d and last time
index K.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np


class SchemaError(ValueError):
    """Raised when an input file or record violates the cohort schema."""


@dataclass
class Trajectory:
    id: str
    covariates: np.ndarray  # (K+1, d)
    treatments: np.ndarray  # (K+1,) in {0,1}
    observed_time: float
    event: int

    def __post_init__(self):
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        self.treatments = np.asarray(self.treatments, dtype=np.int64)
        if self.covariates.ndim != 2:
            raise SchemaError(f"id={self.id}: covariates must be 2-D (K+1, d)")
        if self.treatments.shape[0] != self.covariates.shape[0]:
            raise SchemaError(f"id={self.id}: treatment/covariate length mismatch")
        if not np.isin(self.treatments, (0, 1)).all():
            raise SchemaError(f"id={self.id}: treatments must be 0 or 1")
        if self.observed_time < 0:
            raise SchemaError(f"id={self.id}: negative observed_time")
        if self.event not in (0, 1):
            raise SchemaError(f"id={self.id}: event must be 0 or 1")

    @property
    def K(self):
        return self.covariates.shape[0] - 1

    @property
    def d(self):
        return self.covariates.shape[1]


@dataclass
class Cohort:
    trajectories: list
    d: int
    K: int
    # (id, "0110...") -> array of true potential survival probabilities
    ground_truth: dict = field(default_factory=dict)

    def __post_init__(self):
        for tr in self.trajectories:
            if tr.d != self.d or tr.K != self.K:
                raise SchemaError(
                    f"id={tr.id}: expected d={self.d}, K={self.K}, "
                    f"got d={tr.d}, K={tr.K}"
                )

    def __len__(self):
        return len(self.trajectories)

    @property
    def observed_times(self):
        return np.array([tr.observed_time for tr in self.trajectories])

    @property
    def events(self):
        return np.array([tr.event for tr in self.trajectories], dtype=np.int64)

    def subset(self, indices):
        return Cohort(
            [self.trajectories[i] for i in indices], self.d, self.K,
            self.ground_truth,
        )


@dataclass
class TimeGrid:
    boundaries: np.ndarray  # tau_0 = 0 < tau_1 < ... < tau_m

    def __post_init__(self):
        self.boundaries = np.asarray(self.boundaries, dtype=np.float64)
        if self.boundaries.size < 3:
            raise SchemaError("TimeGrid needs m >= 2 intervals")
        if self.boundaries[0] != 0.0:
            raise SchemaError("TimeGrid must start at 0")
        if not (np.diff(self.boundaries) > 0).all():
            raise SchemaError("TimeGrid boundaries must be strictly increasing")

    @property
    def m(self):
        return self.boundaries.size - 1

    @property
    def horizon(self):
        return float(self.boundaries[-1])


def seq_key(sequence):
    """Canonical string key for a treatment sequence, e.g. (0,1,1) -> '011'."""
    return "".join(str(int(t)) for t in sequence)


def build_grid(cohort, m, strategy="quantile"):
    """Discretize observed time into m intervals.

    quantile: boundaries at empirical j/m-quantiles (ties nudged by +1e-9);
    uniform: evenly spaced on [0, max time]. The last boundary is the maximum
    observed time under both strategies.
    """
    if m < 2:
        raise ValueError("build_grid: m must be >= 2")
    if len(cohort) == 0:
        raise ValueError("build_grid: empty cohort")
    times = cohort.observed_times
    tmax = float(times.max())
    if strategy == "uniform":
        bounds = np.linspace(0.0, tmax, m + 1)
    elif strategy == "quantile":
        if np.unique(times).size < m:
            raise ValueError(
                f"build_grid: m={m} exceeds the {np.unique(times).size} distinct "
                "observed times; use strategy='uniform'"
            )
        # empirical (inverse-CDF) quantiles: order statistics, not interpolated
        qs = np.quantile(times, np.arange(1, m + 1) / m, method="inverted_cdf")
        qs = qs.astype(np.float64)
        for j in range(1, len(qs)):
            if qs[j] <= qs[j - 1]:
                qs[j] = qs[j - 1] + 1e-9
        qs[-1] = max(qs[-1], tmax)
        bounds = np.concatenate([[0.0], qs])
    else:
        raise ValueError(f"build_grid: unknown strategy {strategy!r}")
    return TimeGrid(bounds)


def interval_index(grid, t):
    """Index j in 1..m with tau_{j-1} <= t < tau_j; t == tau_m maps to m."""
    b = grid.boundaries
    if t < 0 or t > b[-1]:
        raise ValueError(f"interval_index: t={t} outside [0, {b[-1]}]")
    if t == b[-1]:
        return grid.m
    return int(np.searchsorted(b, t, side="right"))


def interval_indices(grid, times):
    return np.array([interval_index(grid, float(t)) for t in times], dtype=np.int64)


def _traj_to_record(tr, truth_entries):
    rec = {
        "id": tr.id,
        "x": tr.covariates.tolist(),
        "t": tr.treatments.tolist(),
        "time": tr.observed_time,
        "event": int(tr.event),
    }
    if truth_entries:
        rec["truth"] = {k: np.asarray(v).tolist() for k, v in truth_entries.items()}
    return rec


def save_cohort(cohort, path, fmt="jsonl"):
    """Write a cohort in jsonl (one object per individual) or csv long format."""
    path = str(path)
    if fmt == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for tr in cohort.trajectories:
                truth = {
                    seq: curve
                    for (tid, seq), curve in cohort.ground_truth.items()
                    if tid == tr.id
                }
                fh.write(json.dumps(_traj_to_record(tr, truth)) + "\n")
    elif fmt == "csv":
        # long format: id,k,x_0..x_{d-1},t plus a sibling outcomes file
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "k"] + [f"x_{j}" for j in range(cohort.d)] + ["t"])
            for tr in cohort.trajectories:
                for k in range(cohort.K + 1):
                    w.writerow([tr.id, k] + [repr(float(v)) for v in tr.covariates[k]]
                               + [int(tr.treatments[k])])
        with open(_outcomes_path(path), "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "time", "event"])
            for tr in cohort.trajectories:
                w.writerow([tr.id, repr(float(tr.observed_time)), int(tr.event)])
    else:
        raise ValueError(f"save_cohort: unknown format {fmt!r}")


def _outcomes_path(path):
    stem, dot, ext = path.rpartition(".")
    return f"{stem}_outcomes.{ext}" if dot else f"{path}_outcomes"


def load_cohort(path, fmt="jsonl"):
    """Load a cohort written by save_cohort (or matching the documented schema)."""
    path = str(path)
    if fmt == "jsonl":
        return _load_jsonl(path)
    if fmt == "csv":
        return _load_csv(path)
    raise ValueError(f"load_cohort: unknown format {fmt!r}")


def _load_jsonl(path):
    trajectories, truth = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise SchemaError(f"line {lineno}: invalid JSON ({err})")
            for fieldname in ("id", "x", "t", "time", "event"):
                if fieldname not in rec:
                    raise SchemaError(f"line {lineno}: missing field {fieldname!r}")
            tr = Trajectory(str(rec["id"]), rec["x"], rec["t"],
                            float(rec["time"]), int(rec["event"]))
            trajectories.append(tr)
            for seq, curve in rec.get("truth", {}).items():
                truth[(tr.id, seq)] = np.asarray(curve, dtype=np.float64)
    if not trajectories:
        raise SchemaError(f"{path}: no records")
    d, K = trajectories[0].d, trajectories[0].K
    return Cohort(trajectories, d, K, truth)


def _load_csv(path):
    rows = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "id" not in reader.fieldnames:
            raise SchemaError(f"{path}: missing header or 'id' column")
        xcols = sorted(
            (c for c in reader.fieldnames if c.startswith("x_")),
            key=lambda c: int(c.split("_")[1]),
        )
        if not xcols or "k" not in reader.fieldnames or "t" not in reader.fieldnames:
            raise SchemaError(f"{path}: expected columns id, k, x_0.., t")
        for rowno, rec in enumerate(reader, start=2):
            try:
                k = int(rec["k"])
                x = [float(rec[c]) for c in xcols]
                t = int(rec["t"])
            except (TypeError, ValueError) as err:
                raise SchemaError(f"{path} row {rowno}: {err}")
            if t not in (0, 1):
                raise SchemaError(f"{path} row {rowno}: non-binary treatment {t}")
            rows.setdefault(str(rec["id"]), []).append((k, x, t))
    outcomes = {}
    opath = _outcomes_path(path)
    with open(opath, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for rowno, rec in enumerate(reader, start=2):
            time = float(rec["time"])
            if time < 0:
                raise SchemaError(f"{opath} row {rowno}: negative time")
            outcomes[str(rec["id"])] = (time, int(rec["event"]))
    trajectories = []
    for tid, steps in rows.items():
        steps.sort(key=lambda s: s[0])
        if tid not in outcomes:
            raise SchemaError(f"{path}: id {tid} missing from outcomes file")
        time, event = outcomes[tid]
        trajectories.append(Trajectory(
            tid,
            np.array([s[1] for s in steps]),
            np.array([s[2] for s in steps]),
            time, event,
        ))
    if not trajectories:
        raise SchemaError(f"{path}: no records")
    d, K = trajectories[0].d, trajectories[0].K
    return Cohort(trajectories, d, K)
