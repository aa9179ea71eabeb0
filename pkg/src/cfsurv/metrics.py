"""Evaluation metrics: effect-estimation error, concordance, IPCW Brier
score, and integrated RMSE against ground-truth survival curves.

Curves are evaluated at grid boundaries tau_1..tau_m. Integrals extend the
first value constantly back to tau = 0 and use the trapezoidal rule, so a
constant pointwise error eps integrates to eps^2 * tau_m.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    tv_pehe: float
    c_index: float
    ibs: float
    irmse: float
    brier_by_horizon: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "tv_pehe": self.tv_pehe,
            "c_index": self.c_index,
            "ibs": self.ibs,
            "irmse": self.irmse,
            "brier_by_horizon": self.brier_by_horizon,
            "metadata": self.metadata,
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _integrate_sq(err, grid, weight_fn=None):
    """Trapezoidal integral of err^2 over [0, tau_m] per row.

    err: (n, m) pointwise errors at tau_1..tau_m, extended constantly to 0.
    """
    taus = np.concatenate([[0.0], grid.boundaries[1:]])
    vals = np.concatenate([err[:, :1], err], axis=1) ** 2
    if weight_fn is not None:
        vals = vals * np.array([weight_fn(t) for t in taus])
    return np.trapezoid(vals, taus, axis=1)


def tv_pehe(predicted_effects, true_effects, grid, weight_fn=None, root=True):
    """Mean integrated squared error of effect curves; root form by default."""
    pred = np.asarray(predicted_effects, dtype=np.float64)
    true = np.asarray(true_effects, dtype=np.float64)
    if pred.shape != true.shape or pred.shape[1] != grid.m:
        raise ValueError(
            f"tv_pehe: curve shapes {pred.shape} vs {true.shape} must match "
            f"and align with the {grid.m}-interval grid"
        )
    value = float(_integrate_sq(pred - true, grid, weight_fn).mean())
    return float(np.sqrt(value)) if root else value


def irmse(predicted_curves, true_curves, grid):
    """Root mean integrated squared survival-curve error, normalized by the
    horizon so values are comparable across grids."""
    pred = np.asarray(predicted_curves, dtype=np.float64)
    true = np.asarray(true_curves, dtype=np.float64)
    if pred.shape != true.shape or pred.shape[1] != grid.m:
        raise ValueError(
            f"irmse: curve shapes {pred.shape} vs {true.shape} must match "
            f"and align with the {grid.m}-interval grid"
        )
    value = _integrate_sq(pred - true, grid).mean() / grid.horizon
    return float(np.sqrt(value))


def c_index(risk_scores, observed_times, events):
    """Harrell's concordance: comparable pairs are (i, j) with an observed
    event for i strictly before j's time; risk ties count one half."""
    risk = np.asarray(risk_scores, dtype=np.float64)
    times = np.asarray(observed_times, dtype=np.float64)
    ev = np.asarray(events, dtype=np.int64)
    n = risk.size
    if n < 2:
        raise ValueError("c_index: need at least two individuals")
    concordant = comparable = 0.0
    chunk = 512
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        comp = (times[sl, None] < times[None, :]) & (ev[sl, None] == 1)
        rs = risk[sl, None]
        concordant += (comp & (rs > risk[None, :])).sum()
        concordant += 0.5 * (comp & (rs == risk[None, :])).sum()
        comparable += comp.sum()
    if comparable == 0:
        raise ValueError("c_index: no comparable pairs")
    return float(concordant / comparable)


def censoring_km(observed_times, events):
    """Kaplan-Meier estimate of the censoring survival function G.

    Returns a callable G(t); censorings are the "events" here.
    """
    times = np.asarray(observed_times, dtype=np.float64)
    cens = 1 - np.asarray(events, dtype=np.int64)
    order = np.argsort(times, kind="stable")
    uniq = np.unique(times[cens == 1])
    surv = []
    g = 1.0
    n = times.size
    for t in uniq:
        at_risk = np.sum(times >= t)
        d = np.sum((times == t) & (cens == 1))
        if at_risk > 0:
            g *= 1.0 - d / at_risk
        surv.append(g)
    surv = np.array(surv)

    def G(t, before=False):
        t = np.asarray(t, dtype=np.float64)
        side = "left" if before else "right"
        idx = np.searchsorted(uniq, t, side=side)
        vals = np.concatenate([[1.0], surv])
        return vals[idx]

    return G


def brier(predicted_survival, observed_times, events, tau, censor_km_fn):
    """IPCW Brier score at horizon tau (Graf construction).

    Individuals whose IPCW weight is undefined (G = 0) are excluded and
    counted in the log.
    """
    s = np.asarray(predicted_survival, dtype=np.float64)
    times = np.asarray(observed_times, dtype=np.float64)
    ev = np.asarray(events, dtype=np.int64)
    g_at_event = censor_km_fn(times, before=True)
    g_at_tau = float(censor_km_fn(tau))
    died = (times <= tau) & (ev == 1)
    alive = times > tau
    contrib = np.zeros(times.size)
    excluded = 0
    for i in range(times.size):
        if died[i]:
            if g_at_event[i] <= 0:
                excluded += 1
                continue
            contrib[i] = s[i] ** 2 / g_at_event[i]
        elif alive[i]:
            if g_at_tau <= 0:
                excluded += 1
                continue
            contrib[i] = (1.0 - s[i]) ** 2 / g_at_tau
        # censored before tau: weight 0
    if excluded:
        log.warning("brier: excluded %d individuals with zero censoring weight",
                    excluded)
    n_used = times.size - excluded
    if n_used == 0:
        raise ValueError("brier: all individuals excluded")
    return float(contrib.sum() / n_used)


def integrated_brier(predicted_curves, observed_times, events, grid):
    """Trapezoidal average of the IPCW Brier score over tau_1..tau_m."""
    curves = np.asarray(predicted_curves, dtype=np.float64)
    G = censoring_km(observed_times, events)
    taus = grid.boundaries[1:]
    scores = np.array([
        brier(curves[:, j], observed_times, events, taus[j], G)
        for j in range(grid.m)
    ])
    span = taus[-1] - taus[0]
    if span <= 0:
        return float(scores.mean())
    ibs = float(np.trapezoid(scores, taus) / span)
    return ibs


def brier_by_horizon(predicted_curves, observed_times, events, grid):
    curves = np.asarray(predicted_curves, dtype=np.float64)
    G = censoring_km(observed_times, events)
    return {
        float(tau): brier(curves[:, j], observed_times, events, tau, G)
        for j, tau in enumerate(grid.boundaries[1:])
    }
