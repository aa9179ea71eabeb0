"""Sequence encoder, balanced representation and discrete-time hazard head.

Forward path: a GRU reads (X(k), embed(T(k-1))) over k = 0..K into a history
summary s; two tanh layers map s to the representation z; a dense head maps
(z, embedding of a target treatment sequence) to per-interval hazards. Hazards
use independent sigmoids so the survival product formula holds without the
constraint that hazards sum to one; a softmax head is available behind a flag.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import TimeGrid

CHECKPOINT_FORMAT = "cfsurv-checkpoint-1"
NO_PREV_TOKEN = 2  # embedding row for "no previous treatment" at k = 0


@dataclass
class ModelConfig:
    d: int
    K: int
    hidden: int = 32
    repr_dim: int = 16
    head_hidden: int = 32
    m: int = 20
    treat_embed_dim: int = 4
    seed: int = 0
    encoder: str = "gru"          # "gru" | "flatten" (ablation)
    hazard_head: str = "sigmoid"  # "sigmoid" | "softmax" (comparison flag)

    def __post_init__(self):
        for name in ("d", "K", "hidden", "repr_dim", "head_hidden", "m",
                     "treat_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig: {name} must be >= 1")
        if self.encoder not in ("gru", "flatten"):
            raise ValueError(f"ModelConfig: unknown encoder {self.encoder!r}")
        if self.hazard_head not in ("sigmoid", "softmax"):
            raise ValueError(f"ModelConfig: unknown hazard head {self.hazard_head!r}")


@dataclass
class SurvivalCurve:
    hazards: np.ndarray   # (m,) per-interval hazards in (0, 1)
    survival: np.ndarray  # (m,) cumulative products of (1 - hazard)

    @property
    def pmf(self):
        prev = np.concatenate([[1.0], self.survival[:-1]])
        return self.hazards * prev


class ModelParams:
    """All learnable parameters as named autodiff Nodes."""

    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.nodes = {}
        d, K = config.d, config.K
        H, p, e = config.hidden, config.repr_dim, config.treat_embed_dim

        def mat(name, nin, nout):
            lim = 1.0 / np.sqrt(nin)
            self.nodes[name] = ad.Node(rng.uniform(-lim, lim, (nin, nout)),
                                       name=name)

        def bias(name, nout):
            self.nodes[name] = ad.Node(np.zeros(nout), name=name)

        mat("embed_treat", 3, e)
        if config.encoder == "gru":
            nin = d + e + H
            for gate in ("z", "r", "h"):
                mat(f"enc_W{gate}", nin, H)
                bias(f"enc_b{gate}", H)
        else:  # flattened history: dense layer on (all covariates, T(0..K-1))
            mat("flat_W", (K + 1) * d + K, H)
            bias("flat_b", H)
        mat("phi_W1", H, p)
        bias("phi_b1", p)
        mat("phi_W2", p, p)
        bias("phi_b2", p)
        for gate in ("z", "r", "h"):
            mat(f"seq_W{gate}", 1 + e, e)
            bias(f"seq_b{gate}", e)
        mat("head_W1", p + e, config.head_hidden)
        bias("head_b1", config.head_hidden)
        mat("head_W2", config.head_hidden, config.m)
        bias("head_b2", config.m)

    def __getitem__(self, name):
        return self.nodes[name]

    def names(self):
        return sorted(self.nodes)

    def trainable(self, frozen_prefixes=()):
        return [self.nodes[n] for n in self.names()
                if not any(n.startswith(pfx) for pfx in frozen_prefixes)]

    def all_nodes(self):
        return [self.nodes[n] for n in self.names()]

    def zero_grads(self):
        for node in self.nodes.values():
            node.zero_grad()

    def l2_node(self):
        """Sum of squared weights: biases and the no-previous-treatment
        embedding row are excluded."""
        terms = []
        for name in self.names():
            if name.split("_")[-1].startswith("b"):
                continue
            node = self.nodes[name]
            if name == "embed_treat":
                node = ad.take(node, slice(0, 2))
            terms.append(ad.sum_(ad.square(node)))
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total

    def save(self, path, extra=None):
        payload = {
            "format": CHECKPOINT_FORMAT,
            "config": vars(self.config),
            "extra": extra or {},
            "params": {
                name: {"shape": list(node.value.shape),
                       "data": node.value.ravel().tolist()}
                for name, node in self.nodes.items()
            },
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path):
        """Returns (params, extra) where extra holds sidecar metadata such as
        the training time grid."""
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format: {payload.get('format')!r}")
        config = ModelConfig(**payload["config"])
        params = cls(config)
        for name, entry in payload["params"].items():
            params.nodes[name].value = np.array(entry["data"]).reshape(entry["shape"])
            params.nodes[name].grad = np.zeros_like(params.nodes[name].value)
        return params, payload.get("extra", {})


def _batch_arrays(trajectories):
    X = np.stack([tr.covariates for tr in trajectories])
    T = np.stack([tr.treatments for tr in trajectories])
    return X, T


def _embed_rows(params, indices):
    onehot = np.zeros((len(indices), 3))
    onehot[np.arange(len(indices)), indices] = 1.0
    return ad.constant(onehot) @ params["embed_treat"]


def _gru_step(params, prefix, x, h):
    xh = ad.concat([x, h], axis=1)
    z = ad.sigmoid(xh @ params[f"{prefix}_Wz"] + params[f"{prefix}_bz"])
    r = ad.sigmoid(xh @ params[f"{prefix}_Wr"] + params[f"{prefix}_br"])
    xrh = ad.concat([x, r * h], axis=1)
    cand = ad.tanh(xrh @ params[f"{prefix}_Wh"] + params[f"{prefix}_bh"])
    return (1.0 - z) * cand + z * h


def encode(params, trajectories):
    """History encoding s for a batch of trajectories, shape (B, hidden)."""
    cfg = params.config
    X, T = _batch_arrays(trajectories)
    if X.shape[1] != cfg.K + 1 or X.shape[2] != cfg.d:
        raise ad.ShapeError(
            f"encode: expected trajectories with K={cfg.K}, d={cfg.d}, "
            f"got shape {X.shape[1:]}"
        )
    B = X.shape[0]
    if cfg.encoder == "flatten":
        flat = np.concatenate([X.reshape(B, -1), T[:, :-1].astype(np.float64)],
                              axis=1)
        return ad.tanh(ad.constant(flat) @ params["flat_W"] + params["flat_b"])
    return encode_steps(params, trajectories)[-1]


def encode_steps(params, trajectories):
    """Per-step history encodings [s_0, ..., s_K] (gru encoder only)."""
    cfg = params.config
    if cfg.encoder == "flatten":
        raise ad.ShapeError("encode_steps: flatten encoder is not stepwise")
    X, T = _batch_arrays(trajectories)
    if X.shape[1] != cfg.K + 1 or X.shape[2] != cfg.d:
        raise ad.ShapeError(
            f"encode_steps: expected trajectories with K={cfg.K}, d={cfg.d}, "
            f"got shape {X.shape[1:]}"
        )
    B = X.shape[0]
    h = ad.constant(np.zeros((B, cfg.hidden)))
    steps = []
    for k in range(cfg.K + 1):
        prev_idx = np.full(B, NO_PREV_TOKEN) if k == 0 else T[:, k - 1]
        x = ad.concat([ad.constant(X[:, k]), _embed_rows(params, prev_idx)], axis=1)
        h = _gru_step(params, "enc", x, h)
        steps.append(h)
    return steps


def represent(params, s, linear=False):
    """Representation z from history encoding s; tanh-bounded in (-1, 1)^p.

    linear=True swaps the nonlinearity for the identity (test hook; the map is
    then exactly linear when the bias vectors are zero).
    """
    act = (lambda x: x) if linear else ad.tanh
    h1 = act(s @ params["phi_W1"] + params["phi_b1"])
    return act(h1 @ params["phi_W2"] + params["phi_b2"])


def embed_sequence(params, sequences):
    """GRU over the bits of target treatment sequences, shape (B, embed)."""
    seqs = np.atleast_2d(np.asarray(sequences, dtype=np.float64))
    B = seqs.shape[0]
    e = params.config.treat_embed_dim
    h = ad.constant(np.zeros((B, e)))
    for k in range(seqs.shape[1]):
        h = _gru_step(params, "seq", ad.constant(seqs[:, k:k + 1]), h)
    return h


def hazard_logits(params, z, sequences):
    a = embed_sequence(params, sequences)
    u = ad.concat([z, a], axis=1)
    h1 = ad.tanh(u @ params["head_W1"] + params["head_b1"])
    return h1 @ params["head_W2"] + params["head_b2"]


def hazards_node(params, z, sequences):
    logits = hazard_logits(params, z, sequences)
    if params.config.hazard_head == "softmax":
        return ad.softmax(logits)
    return ad.sigmoid(logits)


def log_survival_terms(lam):
    """(log lambda, cumulative log survival incl. j, excl. j) as graph nodes."""
    m = lam.value.shape[1]
    log_lam = ad.log(lam)
    log_1m = ad.log(1.0 - lam)
    incl = ad.constant(np.triu(np.ones((m, m))))     # contributes for l <= j
    excl = ad.constant(np.triu(np.ones((m, m)), 1))  # contributes for l < j
    return log_lam, log_1m @ incl, log_1m @ excl


def predict_survival(params, z, sequences):
    """Hazard and survival curves for representations z under target sequences.

    Returns (hazard node (B, m), survival node (B, m)).
    """
    lam = hazards_node(params, z, sequences)
    _, log_surv, _ = log_survival_terms(lam)
    return lam, ad.exp(log_surv)


def predict_curves(params, trajectories, sequence):
    """Numpy survival curves for a batch under one target sequence."""
    seqs = np.broadcast_to(np.asarray(sequence, dtype=np.int64),
                           (len(trajectories), len(sequence)))
    z = represent(params, encode(params, trajectories))
    lam, surv = predict_survival(params, z, seqs)
    return [SurvivalCurve(lam.value[i].copy(), surv.value[i].copy())
            for i in range(len(trajectories))]


def rmst(curve_values, grid):
    """Area under a survival curve up to the grid horizon (trapezoidal),
    anchored at S(0) = 1."""
    taus = np.concatenate([[0.0], grid.boundaries[1:]])
    vals = np.concatenate([[1.0], np.asarray(curve_values)])
    return float(np.trapezoid(vals, taus))


def tv_cate(params, trajectory, seq_a, seq_b, grid):
    """Per-interval survival difference and RMST difference between two
    target sequences for one individual."""
    curve_a = predict_curves(params, [trajectory], seq_a)[0]
    curve_b = predict_curves(params, [trajectory], seq_b)[0]
    diff = curve_a.survival - curve_b.survival
    delta_rmst = rmst(curve_a.survival, grid) - rmst(curve_b.survival, grid)
    return diff, delta_rmst
