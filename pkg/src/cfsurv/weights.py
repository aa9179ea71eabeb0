"""Time-varying propensity models and stabilized sequential treatment weights.

The denominator model predicts T(k) from (X(k), T(k-1)) with a one-hot time
encoding (pooled mode, default) or separately per step; the stabilization
numerator uses (T(k-1), time) only. Weights are the per-individual product of
numerator/denominator probabilities of the observed treatments.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class SeparationError(RuntimeError):
    """Likely perfect separation: unbounded logistic parameters at l2 = 0."""


PROB_CLAMP = 1e-6


@dataclass
class PropensityModel:
    pooled: bool
    K: int
    d: int
    # pooled mode: one parameter block; per-step mode: lists indexed by k
    denom_wx: object = None   # covariate coefficients
    denom_wz: object = None   # (T(k-1), time-encoding) coefficients
    numer_wz: object = None

    def _z_pooled(self, t_prev, k):
        z = np.zeros((t_prev.size, 2 + self.K))
        z[:, 0] = t_prev
        z[:, 1 + k] = 1.0
        return z

    def prob_treated(self, X_k, t_prev, k):
        """P(T(k)=1 | X(k), T(k-1)) under denominator and numerator models."""
        if self.pooled:
            z = self._z_pooled(t_prev, k)
            logit_d = X_k @ self.denom_wx + z @ self.denom_wz
            logit_n = z @ self.numer_wz
        else:
            z = np.column_stack([t_prev, np.ones_like(t_prev)])
            logit_d = X_k @ self.denom_wx[k] + z @ self.denom_wz[k]
            logit_n = z @ self.numer_wz[k]
        return _sigmoid(logit_n), _sigmoid(logit_d)


@dataclass
class WeightTable:
    ids: list
    p_factors: np.ndarray        # (n, K+1) numerator probs of observed T(k)
    e_factors: np.ndarray        # (n, K+1) denominator probs of observed T(k)
    stabilized: np.ndarray       # (n,) product p/e
    unstabilized: np.ndarray     # (n,) product 1/e
    trimmed: np.ndarray          # (n,) stabilized after trimming
    positivity_warnings: np.ndarray = field(default=None)  # (n,) counts

    def __len__(self):
        return len(self.ids)

    def weights(self, mode="stabilized"):
        if mode == "stabilized":
            return self.trimmed
        if mode == "unstabilized":
            if np.isnan(self.unstabilized).any():
                raise ValueError(
                    "unstabilized weights unavailable (table loaded from CSV)"
                )
            return self.unstabilized
        if mode == "unit":
            return np.ones(len(self.ids))
        raise ValueError(f"unknown weights mode {mode!r}")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))


def _fit_logistic(F, y, l2, max_iter=5000, tol=1e-6, lr=0.05):
    """Maximum-likelihood logistic fit by Adam on the autodiff graph."""
    nfeat = F.shape[1]
    w = ad.Node(np.zeros((nfeat, 1)), name="w")
    Fn = ad.constant(F)
    yn = ad.constant(y.reshape(-1, 1))
    one_minus_y = ad.constant(1.0 - y.reshape(-1, 1))
    m = np.zeros_like(w.value)
    v = np.zeros_like(w.value)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, max_iter + 1):
        w.zero_grad()
        p = ad.sigmoid(Fn @ w)
        ll = ad.mean_(yn * ad.log(p) + one_minus_y * ad.log(1.0 - p))
        loss = ad.scale(ll, -1.0)
        if l2 > 0:
            loss = loss + ad.scale(ad.sum_(ad.square(w)), l2)
        ad.backward(loss)
        g = w.grad
        if np.abs(g).max() < tol:
            break
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        w.value -= lr * mhat / (np.sqrt(vhat) + eps)
        if l2 == 0 and t % 200 == 0 and np.abs(w.value).max() > 30:
            raise SeparationError(
                "logistic fit appears separated (|parameter| > 30); refit with l2 > 0"
            )
    if l2 == 0 and np.abs(w.value).max() > 30:
        raise SeparationError(
            "logistic fit appears separated (|parameter| > 30); refit with l2 > 0"
        )
    return w.value.ravel()


def _stacked_features(cohort):
    """Long-format design arrays over all (individual, step) rows."""
    n, K, d = len(cohort), cohort.K, cohort.d
    X = np.stack([tr.covariates for tr in cohort.trajectories])  # (n, K+1, d)
    T = np.stack([tr.treatments for tr in cohort.trajectories])  # (n, K+1)
    t_prev = np.concatenate([np.zeros((n, 1)), T[:, :-1]], axis=1)
    return X, T, t_prev


def fit_propensity(cohort, pooled=True, l2=0.0):
    """Fit denominator and numerator treatment models on a cohort."""
    if len(cohort) == 0:
        raise ValueError("fit_propensity: empty cohort")
    n, K, d = len(cohort), cohort.K, cohort.d
    X, T, t_prev = _stacked_features(cohort)
    model = PropensityModel(pooled=pooled, K=K, d=d)
    if pooled:
        rows_x = X.reshape(-1, d)                       # (n*(K+1), d)
        z = np.zeros((n * (K + 1), 2 + K))
        z[:, 0] = t_prev.reshape(-1)
        step_idx = np.tile(np.arange(K + 1), n)         # one-hot step encoding
        z[np.arange(n * (K + 1)), 1 + step_idx] = 1.0
        y = T.reshape(-1).astype(np.float64)
        wd = _fit_logistic(np.concatenate([rows_x, z], axis=1), y, l2)
        model.denom_wx = wd[:d]
        model.denom_wz = wd[d:]
        model.numer_wz = _fit_logistic(z, y, l2)
    else:
        model.denom_wx, model.denom_wz, model.numer_wz = [], [], []
        for k in range(K + 1):
            zk = np.column_stack([t_prev[:, k], np.ones(n)])
            yk = T[:, k].astype(np.float64)
            wd = _fit_logistic(np.concatenate([X[:, k], zk], axis=1), yk, l2)
            model.denom_wx.append(wd[:d])
            model.denom_wz.append(wd[d:])
            model.numer_wz.append(_fit_logistic(zk, yk, l2))
    return model


def stabilized_weights(cohort, model):
    """Per-individual stabilized (and unstabilized) sequential weights.

    Probabilities outside (PROB_CLAMP, 1 - PROB_CLAMP) are clamped and counted
    as positivity warnings rather than aborting the run.
    """
    if model.d != cohort.d or model.K != cohort.K:
        raise ValueError("stabilized_weights: model/cohort dimension mismatch")
    n, K = len(cohort), cohort.K
    X, T, t_prev = _stacked_features(cohort)
    p_fac = np.empty((n, K + 1))
    e_fac = np.empty((n, K + 1))
    warnings_ = np.zeros(n, dtype=np.int64)
    for k in range(K + 1):
        p1_num, p1_den = model.prob_treated(X[:, k], t_prev[:, k], k)
        obs = T[:, k]
        p_obs = np.where(obs == 1, p1_num, 1.0 - p1_num)
        e_obs = np.where(obs == 1, p1_den, 1.0 - p1_den)
        bad = (e_obs <= PROB_CLAMP) | (e_obs >= 1.0 - PROB_CLAMP)
        warnings_ += bad.astype(np.int64)
        p_fac[:, k] = np.clip(p_obs, PROB_CLAMP, 1.0 - PROB_CLAMP)
        e_fac[:, k] = np.clip(e_obs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    stab = np.prod(p_fac / e_fac, axis=1)
    unstab = np.prod(1.0 / e_fac, axis=1)
    ids = [tr.id for tr in cohort.trajectories]
    return WeightTable(ids, p_fac, e_fac, stab, unstab, stab.copy(), warnings_)


def trim_weights(table, lower_q=0.01, upper_q=0.99):
    """Clip stabilized weights to their [lower_q, upper_q] empirical quantiles."""
    if not (0 <= lower_q < upper_q <= 1):
        raise ValueError("trim_weights: need 0 <= lower_q < upper_q <= 1")
    lo = np.quantile(table.stabilized, lower_q)
    hi = np.quantile(table.stabilized, upper_q)
    trimmed = np.clip(table.stabilized, lo, hi)
    return WeightTable(table.ids, table.p_factors, table.e_factors,
                       table.stabilized, table.unstabilized, trimmed,
                       table.positivity_warnings)


def weight_diagnostics(table, mode="stabilized"):
    """Summary statistics: mean, variance, max, effective sample size."""
    if len(table) == 0:
        raise ValueError("weight_diagnostics: empty table")
    w = table.weights(mode)
    ess = float(w.sum() ** 2 / (w**2).sum())
    return {
        "mode": mode,
        "n": len(table),
        "mean": float(w.mean()),
        "variance": float(w.var()),
        "max": float(w.max()),
        "ess": ess,
        "positivity_warnings": int(table.positivity_warnings.sum()),
    }


def save_weight_table(table, path):
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "w_raw", "w_trimmed"])
        for i, tid in enumerate(table.ids):
            w.writerow([tid, repr(float(table.stabilized[i])),
                        repr(float(table.trimmed[i]))])


def load_weight_table(path):
    """Rebuild a WeightTable from the id/w_raw/w_trimmed CSV.

    Per-step factors are not serialized, so unstabilized mode is unavailable
    on a loaded table.
    """
    import csv

    ids, raw, trimmed = [], [], []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            ids.append(rec["id"])
            raw.append(float(rec["w_raw"]))
            trimmed.append(float(rec["w_trimmed"]))
    raw = np.array(raw)
    trimmed = np.array(trimmed)
    unstab = np.full(raw.shape, np.nan)
    return WeightTable(ids, None, None, raw, unstab, trimmed,
                       np.zeros(raw.size, dtype=np.int64))
