"""Combined training objective and optimization loop.

Loss = weighted survival negative log-likelihood
     + alpha * sum of squared MMDs between treatment-sequence groups
     + beta_reg * L2 on the network weights,
minimized with minibatch Adam. Batches are stratified on the balancing group
key so compared groups are populated in every batch.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import interval_indices
from .model import (ModelParams, encode, encode_steps, hazards_node,
                    log_survival_terms, represent)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 0.1
    alpha_burnin: float = 1.0   # balance weight during the first burnin_epochs
    burnin_epochs: int = 5
    beta_reg: float = 5e-3
    kernel_sigma: object = "median"   # positive float or "median"
    pair_strategy: str = "step_treatment"  # or final_treatment, last_step_flip
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    weights_mode: str = "stabilized"  # stabilized | unstabilized | unit
    mmd_unbiased: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("TrainConfig: epochs, batch_size, learning_rate "
                             "must be positive")
        if self.alpha < 0 or self.alpha_burnin < 0 or self.beta_reg < 0:
            raise ValueError("TrainConfig: alpha, alpha_burnin and beta_reg "
                             "must be >= 0")
        if self.burnin_epochs < 0:
            raise ValueError("TrainConfig: burnin_epochs must be >= 0")
        if self.pair_strategy not in ("final_treatment", "step_treatment",
                                      "last_step_flip"):
            raise ValueError(f"TrainConfig: unknown pair_strategy "
                             f"{self.pair_strategy!r}")
        if self.weights_mode not in ("stabilized", "unstabilized", "unit"):
            raise ValueError(f"TrainConfig: unknown weights_mode "
                             f"{self.weights_mode!r}")


@dataclass
class EpochReport:
    epoch: int
    loss_surv: float
    loss_bal: float
    loss_reg: float
    loss_total: float
    mean_weight: float
    max_weight: float
    mmd_by_pair: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "epoch": self.epoch,
            "loss_surv": self.loss_surv,
            "loss_bal": self.loss_bal,
            "loss_reg": self.loss_reg,
            "loss_total": self.loss_total,
            "mean_weight": self.mean_weight,
            "max_weight": self.max_weight,
            "mmd_by_pair": self.mmd_by_pair,
        }


def _pairwise_sq_dists(a, b):
    ga = a @ ad.transpose(a)
    gb = b @ ad.transpose(b)
    gab = a @ ad.transpose(b)
    na, nb = a.value.shape[0], b.value.shape[0]
    da = ad.reshape(ad.take(ga, (np.arange(na), np.arange(na))), (na, 1))
    db = ad.reshape(ad.take(gb, (np.arange(nb), np.arange(nb))), (nb, 1))
    daa = da + ad.transpose(da) - 2.0 * ga
    dbb = db + ad.transpose(db) - 2.0 * gb
    dab = da + ad.transpose(db) - 2.0 * gab
    return daa, dbb, dab


def median_bandwidth(values):
    """Median pairwise Euclidean distance over pooled representation values."""
    v = np.asarray(values)
    sq = ((v[:, None, :] - v[None, :, :]) ** 2).sum(-1)
    dist = np.sqrt(np.maximum(sq[np.triu_indices(v.shape[0], 1)], 0.0))
    med = float(np.median(dist)) if dist.size else 1.0
    return max(med, 1e-6)


def mmd2(zA, zB, sigma=1.0, unbiased=False):
    """Squared MMD with a Gaussian RBF kernel, as a graph node.

    Default is the biased V-statistic (diagonal terms included), which is
    nonnegative by construction; unbiased=True gives the U-statistic.
    """
    a = zA if isinstance(zA, ad.Node) else ad.constant(np.atleast_2d(zA))
    b = zB if isinstance(zB, ad.Node) else ad.constant(np.atleast_2d(zB))
    na, nb = a.value.shape[0], b.value.shape[0]
    if na == 0 or nb == 0:
        raise ValueError("mmd2: empty representation set")
    if sigma == "median":
        sigma = median_bandwidth(np.concatenate([a.value, b.value], axis=0))
    if sigma <= 0:
        raise ValueError("mmd2: sigma must be positive")
    coef = -1.0 / (2.0 * sigma**2)
    daa, dbb, dab = _pairwise_sq_dists(a, b)
    kaa, kbb, kab = ad.exp(ad.scale(daa, coef)), ad.exp(ad.scale(dbb, coef)), \
        ad.exp(ad.scale(dab, coef))
    if unbiased:
        if na < 2 or nb < 2:
            raise ValueError("mmd2: unbiased estimate needs >= 2 points per set")
        diag_a = ad.take(kaa, (np.arange(na), np.arange(na)))
        diag_b = ad.take(kbb, (np.arange(nb), np.arange(nb)))
        term_a = ad.scale(ad.sum_(kaa) - ad.sum_(diag_a), 1.0 / (na * (na - 1)))
        term_b = ad.scale(ad.sum_(kbb) - ad.sum_(diag_b), 1.0 / (nb * (nb - 1)))
    else:
        term_a = ad.mean_(kaa)
        term_b = ad.mean_(kbb)
    return term_a + term_b - 2.0 * ad.mean_(kab)


def group_key(trajectory, strategy):
    t = trajectory.treatments
    if strategy in ("final_treatment", "step_treatment"):
        # step_treatment balances per step inside balance_loss; batches are
        # stratified by the final assignment like final_treatment
        return int(t[-1])
    return (tuple(int(v) for v in t[:-1]), int(t[-1]))


def group_pairs(keys):
    """Pairs of group keys to compare under each strategy."""
    uniq = sorted(set(keys), key=repr)
    if not uniq:
        return []
    if isinstance(uniq[0], int):  # final_treatment: at most the (0, 1) pair
        return [(0, 1)] if 0 in uniq and 1 in uniq else []
    pairs = []
    by_prefix = {}
    for key in uniq:
        by_prefix.setdefault(key[0], []).append(key)
    for prefix_keys in by_prefix.values():
        if len(prefix_keys) == 2:  # sequences differing only at the last step
            pairs.append(tuple(prefix_keys))
    return pairs


def survival_nll(params, batch, grid, weights, z=None):
    """Weighted negative log-likelihood at the factual sequences.

    weights: per-individual array aligned with the batch. Event individuals
    contribute -w log f(tau_j), censored ones -w log S(tau_j).
    """
    B = len(batch)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (B,):
        raise ValueError("survival_nll: weights misaligned with batch")
    if z is None:
        z = represent(params, encode(params, batch))
    seqs = np.stack([tr.treatments for tr in batch])
    lam = hazards_node(params, z, seqs)
    log_lam, log_surv, log_surv_prev = log_survival_terms(lam)
    j = interval_indices(grid, [tr.observed_time for tr in batch])
    onehot = np.zeros((B, grid.m))
    onehot[np.arange(B), j - 1] = 1.0
    delta = np.array([tr.event for tr in batch], dtype=np.float64).reshape(-1, 1)
    log_f = log_lam + log_surv_prev
    chosen = ad.constant(delta) * log_f + ad.constant(1.0 - delta) * log_surv
    picked = ad.sum_(ad.constant(onehot) * chosen, axis=1)
    weighted = ad.constant(weights) * picked
    return ad.scale(ad.sum_(weighted), -1.0 / B)


def balance_loss(params, batch, strategy="final_treatment", sigma="median",
                 unbiased=False, z=None, z_steps=None):
    """Squared-MMD discrepancy between representation groups in the batch.

    final_treatment / last_step_flip: sum of squared MMDs over group pairs of
    the final representation. step_treatment: mean over steps k of the squared
    MMD between the step-k history representations of the T(k)=0 and T(k)=1
    individuals. Groups with fewer than two members are skipped with a
    warning; if no comparable pair remains the loss is the constant zero.
    """
    if strategy == "step_treatment":
        return _step_balance_loss(params, batch, sigma, unbiased, z, z_steps)
    if z is None:
        z = represent(params, encode(params, batch))
    keys = [group_key(tr, strategy) for tr in batch]
    by_key = {}
    for i, key in enumerate(keys):
        by_key.setdefault(key, []).append(i)
    total = None
    if sigma == "median":
        sigma = median_bandwidth(z.value)
    for ka, kb in group_pairs(keys):
        ia, ib = by_key.get(ka, []), by_key.get(kb, [])
        if len(ia) < 2 or len(ib) < 2:
            log.warning("balance_loss: skipping pair %r vs %r (degenerate group)",
                        ka, kb)
            continue
        term = mmd2(ad.take(z, np.array(ia)), ad.take(z, np.array(ib)),
                    sigma=sigma, unbiased=unbiased)
        total = term if total is None else total + term
    if total is None:
        log.warning("balance_loss: no comparable groups in batch; returning 0")
        return ad.constant(0.0)
    return total


def representation_steps(params, batch, z=None, z_steps=None):
    """Per-step representations for step_treatment balancing.

    The flatten encoder has a single history summary, so the same
    representation is compared under each step's treatment split.
    """
    if z_steps is not None:
        return z_steps
    if params.config.encoder == "flatten":
        if z is None:
            z = represent(params, encode(params, batch))
        return [z] * (params.config.K + 1)
    return [represent(params, h) for h in encode_steps(params, batch)]


def _step_balance_loss(params, batch, sigma, unbiased, z=None, z_steps=None):
    zs = representation_steps(params, batch, z=z, z_steps=z_steps)
    T = np.stack([tr.treatments for tr in batch])
    total, count = None, 0
    for k in range(T.shape[1]):
        ia = np.flatnonzero(T[:, k] == 0)
        ib = np.flatnonzero(T[:, k] == 1)
        if len(ia) < 2 or len(ib) < 2:
            log.warning("balance_loss: skipping step %d (degenerate group)", k)
            continue
        sig = median_bandwidth(zs[k].value) if sigma == "median" else sigma
        term = mmd2(ad.take(zs[k], ia), ad.take(zs[k], ib),
                    sigma=sig, unbiased=unbiased)
        total = term if total is None else total + term
        count += 1
    if total is None:
        log.warning("balance_loss: no comparable step in batch; returning 0")
        return ad.constant(0.0)
    return ad.scale(total, 1.0 / count)


def _stratified_batches(keys, batch_size, rng):
    """Batch index lists with each group spread across batches."""
    n = len(keys)
    nbatches = max(1, n // batch_size)
    by_key = {}
    for i, key in enumerate(keys):
        by_key.setdefault(key, []).append(i)
    batches = [[] for _ in range(nbatches)]
    for key in sorted(by_key, key=repr):
        idx = np.array(by_key[key])
        rng.shuffle(idx)
        for b, chunk in enumerate(np.array_split(idx, nbatches)):
            batches[b].extend(chunk.tolist())
    return [np.array(b) for b in batches if len(b) > 0]


class AdamOptimizer:
    def __init__(self, nodes, lr, beta1, beta2, eps):
        self.nodes = nodes
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(n.value) for n in nodes]
        self.v = [np.zeros_like(n.value) for n in nodes]
        self.t = 0

    def step(self):
        self.t += 1
        for i, node in enumerate(self.nodes):
            g = node.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g**2
            mhat = self.m[i] / (1 - self.b1**self.t)
            vhat = self.v[i] / (1 - self.b2**self.t)
            node.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _step_diagnostic_mmd(params, cohort, sigma, max_per_group, rng):
    sub = rng.choice(len(cohort), size=min(len(cohort), 2 * max_per_group),
                     replace=False)
    batch = [cohort.trajectories[i] for i in sub]
    zs = [z.value for z in representation_steps(params, batch)]
    T = np.stack([tr.treatments for tr in batch])
    out = {}
    for k in range(T.shape[1]):
        ia = np.flatnonzero(T[:, k] == 0)
        ib = np.flatnonzero(T[:, k] == 1)
        if len(ia) < 2 or len(ib) < 2:
            continue
        ia = rng.choice(ia, size=min(len(ia), max_per_group), replace=False)
        ib = rng.choice(ib, size=min(len(ib), max_per_group), replace=False)
        sig = median_bandwidth(zs[k]) if sigma == "median" else sigma
        out[f"step{k}"] = float(mmd2(zs[k][ia], zs[k][ib], sigma=sig).value)
    return out


def diagnostic_mmd(params, cohort, strategy, sigma, max_per_group=400, seed=0):
    """Per-pair empirical MMD on a fixed subsample, no gradients.

    Logged every epoch as the representation-discrepancy diagnostic.
    """
    rng = np.random.default_rng(seed)
    if strategy == "step_treatment":
        return _step_diagnostic_mmd(params, cohort, sigma, max_per_group, rng)
    z = represent(params, encode(params, cohort.trajectories)).value
    keys = [group_key(tr, strategy) for tr in cohort.trajectories]
    by_key = {}
    for i, key in enumerate(keys):
        by_key.setdefault(key, []).append(i)
    if sigma == "median":
        sub = rng.choice(len(cohort), size=min(len(cohort), 2 * max_per_group),
                         replace=False)
        sigma = median_bandwidth(z[sub])
    out = {}
    for ka, kb in group_pairs(keys):
        ia, ib = by_key.get(ka, []), by_key.get(kb, [])
        if len(ia) < 2 or len(ib) < 2:
            continue
        ia = rng.choice(ia, size=min(len(ia), max_per_group), replace=False)
        ib = rng.choice(ib, size=min(len(ib), max_per_group), replace=False)
        out[f"{ka}|{kb}"] = float(mmd2(z[ia], z[ib], sigma=sigma).value)
    return out


def train(cohort, grid, model_config, train_config, weight_table,
          frozen_prefixes=(), params=None):
    """Minibatch Adam on the combined objective; deterministic given seeds.

    Returns (trained ModelParams, list of EpochReport).
    """
    tc = train_config
    if params is None:
        params = ModelParams(model_config)
    table_ids = list(weight_table.ids)
    cohort_ids = [tr.id for tr in cohort.trajectories]
    if table_ids != cohort_ids:
        order = {tid: i for i, tid in enumerate(table_ids)}
        try:
            perm = [order[tid] for tid in cohort_ids]
        except KeyError as err:
            raise ValueError(f"train: weight table missing id {err}")
        w_all = weight_table.weights(tc.weights_mode)[perm]
    else:
        w_all = weight_table.weights(tc.weights_mode)
    trainable = params.trainable(frozen_prefixes)
    opt = AdamOptimizer(trainable, tc.learning_rate, tc.adam_beta1,
                        tc.adam_beta2, tc.adam_eps)
    rng = np.random.default_rng(tc.seed)
    keys = [group_key(tr, tc.pair_strategy) for tr in cohort.trajectories]
    reports = []
    for epoch in range(tc.epochs):
        alpha = tc.alpha_burnin if epoch < tc.burnin_epochs else tc.alpha
        sums = {"surv": 0.0, "bal": 0.0, "reg": 0.0, "total": 0.0}
        nb = 0
        for idx in _stratified_batches(keys, tc.batch_size, rng):
            batch = [cohort.trajectories[i] for i in idx]
            params.zero_grads()
            z_steps = None
            if (alpha > 0 and tc.pair_strategy == "step_treatment"
                    and model_config.encoder != "flatten"):
                z_steps = representation_steps(params, batch)
                z = z_steps[-1]
            else:
                z = represent(params, encode(params, batch))
            l_surv = survival_nll(params, batch, grid, w_all[idx], z=z)
            loss = l_surv
            l_bal_val = 0.0
            if alpha > 0:
                l_bal = balance_loss(params, batch, tc.pair_strategy,
                                     tc.kernel_sigma, tc.mmd_unbiased, z=z,
                                     z_steps=z_steps)
                loss = loss + ad.scale(l_bal, alpha)
                l_bal_val = float(l_bal.value)
            l_reg_val = 0.0
            if tc.beta_reg > 0:
                l_reg = params.l2_node()
                loss = loss + ad.scale(l_reg, tc.beta_reg)
                l_reg_val = float(l_reg.value)
            if not np.isfinite(loss.value):
                raise FloatingPointError(
                    f"train: non-finite loss at epoch {epoch} on batch ids "
                    f"{[batch[i].id for i in range(min(8, len(batch)))]}"
                )
            ad.backward(loss)
            opt.step()
            sums["surv"] += float(l_surv.value)
            sums["bal"] += l_bal_val
            sums["reg"] += l_reg_val
            sums["total"] += float(loss.value)
            nb += 1
        mmds = diagnostic_mmd(params, cohort, tc.pair_strategy,
                              tc.kernel_sigma, seed=tc.seed)
        reports.append(EpochReport(
            epoch=epoch,
            loss_surv=sums["surv"] / nb,
            loss_bal=sums["bal"] / nb,
            loss_reg=sums["reg"] / nb,
            loss_total=sums["total"] / nb,
            mean_weight=float(np.mean(w_all)),
            max_weight=float(np.max(w_all)),
            mmd_by_pair=mmds,
        ))
    return params, reports


def combined_loss(params, batch, grid, weights, train_config):
    """The full objective on one batch as a graph node (used by grad checks)."""
    tc = train_config
    z_steps = None
    if (tc.alpha > 0 and tc.pair_strategy == "step_treatment"
            and params.config.encoder != "flatten"):
        z_steps = representation_steps(params, batch)
        z = z_steps[-1]
    else:
        z = represent(params, encode(params, batch))
    loss = survival_nll(params, batch, grid, weights, z=z)
    if tc.alpha > 0:
        loss = loss + ad.scale(
            balance_loss(params, batch, tc.pair_strategy, tc.kernel_sigma,
                         tc.mmd_unbiased, z=z, z_steps=z_steps), tc.alpha)
    if tc.beta_reg > 0:
        loss = loss + ad.scale(params.l2_node(), tc.beta_reg)
    return loss
