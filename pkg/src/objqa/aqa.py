"""Absolute quality: a small score network with a learnable quality anchor.

Scores are re-aligned across classes by three hinge-style constraints:

* alignment: correctly recognized images score above the anchor ``th``,
  misrecognized ones below it;
* intra: within a same-class triplet the absolute scores keep the pairwise
  order of the relative scores and the order of their two adjacent gaps;
* inter: for triplets of two classes, the gap-ratio entropy of the absolute
  scores is ordered like that of the relative scores.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError, ParameterError

log = logging.getLogger(__name__)

PAIRS = ((0, 1), (0, 2), (1, 2))
_TINY = 1e-12


@dataclass
class AqaParams:
    w1: np.ndarray     # (hidden, C)
    b1: np.ndarray     # (hidden, 1)
    w2: np.ndarray     # (1, hidden)
    b2: np.ndarray     # (1, 1)
    theta: np.ndarray  # (1, 1); th = sigmoid(theta)
    # fixed input standardization, fitted once on training features
    mu: np.ndarray | None = None     # (C, 1)
    sigma: np.ndarray | None = None  # (C, 1)

    def __post_init__(self):
        C = self.w1.shape[1]
        if self.mu is None:
            self.mu = np.zeros((C, 1))
        if self.sigma is None:
            self.sigma = np.ones((C, 1))

    @property
    def th(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.theta[0, 0])))

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays first, then the two standardization vectors."""
        return [self.w1, self.b1, self.w2, self.b2, self.theta, self.mu, self.sigma]

    @classmethod
    def from_arrays(cls, arrays) -> "AqaParams":
        return cls(*[np.asarray(a, dtype=np.float64) for a in arrays])

    def fit_input(self, feats: np.ndarray) -> "AqaParams":
        """Set the standardization from a C x N training feature matrix."""
        x = unit_columns(feats)
        self.mu = x.mean(axis=1, keepdims=True)
        std = x.std(axis=1, keepdims=True)
        # a unit that never fires in training stays unscaled, so a rare test activation cannot explode
        self.sigma = np.where(std > 1e-6, std + 1e-6, 1.0)
        return self

    @classmethod
    def init(cls, rng: np.random.Generator, feature_dim: int = 64, hidden: int = 64) -> "AqaParams":
        return cls(rng.normal(0, np.sqrt(2.0 / feature_dim), (hidden, feature_dim)),
                   np.zeros((hidden, 1)),
                   rng.normal(0, np.sqrt(1.0 / hidden), (1, hidden)),
                   np.zeros((1, 1)), np.zeros((1, 1)))

    @classmethod
    def zeros(cls, feature_dim: int = 64, hidden: int = 64) -> "AqaParams":
        return cls(np.zeros((hidden, feature_dim)), np.zeros((hidden, 1)),
                   np.zeros((1, hidden)), np.zeros((1, 1)), np.zeros((1, 1)))


@dataclass
class AqaHyper:
    eps: float = 0.02
    zeta: float = 0.01
    lambda_intra: float = 1.0
    lambda_a1: float = 1.0
    lambda_a2: float = 1.0
    entropy_floor: float = 0.0

    def __post_init__(self):
        if self.eps <= 0 or self.zeta <= 0:
            raise ParameterError("eps and zeta must be positive")


@dataclass
class EntropyValue:
    D1: float
    D2: float
    e: float


# ---------------------------------------------------------------- scoring

def unit_columns(F: np.ndarray, axis: int = 0) -> np.ndarray:
    """Scale feature vectors to unit length; zero vectors stay zero."""
    n = np.linalg.norm(F, axis=axis, keepdims=True)
    return F / np.where(n > 0, n, 1.0)


def score_graph(p: Sequence, F: np.ndarray) -> nx.Node:
    """Absolute scores on the tape; ``F`` is a constant (..., n, C) array of rows."""
    w1, b1, w2, b2, _, mu, sigma = p
    x = np.swapaxes(unit_columns(np.asarray(F, dtype=np.float64), axis=-1), -1, -2)
    x = (x - nx.as_node(mu).value) / nx.as_node(sigma).value   # (..., C, n)
    h = nx.relu(nx.matmul(w1, x) + b1)
    z = nx.matmul(w2, h) + b2                        # (..., 1, n)
    return nx.sigmoid(z)[..., 0, :]


def absolute_scores(params: AqaParams, F: np.ndarray) -> np.ndarray:
    """Scores for a C x N feature matrix, one per column."""
    x = (unit_columns(F) - params.mu) / params.sigma
    h = np.maximum(params.w1 @ x + params.b1, 0)
    z = (params.w2 @ h + params.b2)[0]
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def absolute_score(params: AqaParams, F_i) -> float:
    F_i = np.asarray(F_i, dtype=np.float64).reshape(-1, 1)
    return float(absolute_scores(params, F_i)[0])


def pcw_score(prediction) -> float:
    """Recognition confidence used directly as a quality score (baseline)."""
    return float(prediction.confidence)


# ---------------------------------------------------------------- loss graphs

def _delta(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """-1 where x > y, +1 otherwise."""
    return np.where(x > y, -1.0, 1.0)


def align_graph(Q: nx.Node, delta: np.ndarray, th: nx.Node, eps: float) -> nx.Node:
    return nx.mean(nx.relu(nx.mul(delta, Q - (th + eps))))


def rank_graph(q: np.ndarray, Q: nx.Node, eps: float) -> nx.Node:
    """Pairwise order hinge averaged over the 3 pairs and the batch; q, Q are (B, 3)."""
    total = None
    for i, j in PAIRS:
        d = _delta(q[..., i], q[..., j])
        t = nx.relu(nx.mul(d, Q[..., i] - Q[..., j] - eps))
        total = t if total is None else total + t
    return nx.mean(total) / 3.0


def drank_graph(q: np.ndarray, Q: nx.Node, eps: float) -> nx.Node:
    """Gap-order hinge: the larger relative gap should stay the larger absolute gap."""
    r1 = np.abs(q[..., 0] - q[..., 1])
    r2 = np.abs(q[..., 1] - q[..., 2])
    live = (r1 != r2).astype(np.float64)
    d1 = nx.absolute(Q[..., 0] - Q[..., 1])
    d2 = nx.absolute(Q[..., 1] - Q[..., 2])
    return nx.mean(nx.mul(live, nx.relu(nx.mul(_delta(r1, r2), d1 - d2 - eps))))


def entropy_graph(s, floor: float = 0.0) -> nx.Node:
    """Gap-ratio entropy ``-r ln r`` per triplet (last axis of size 3).

    ``floor`` > 0 bounds the larger gap from below before dividing, which caps
    the 1/gap growth of the gradient when two scores nearly coincide.
    """
    s = nx.as_node(s)
    D1 = nx.absolute(s[..., 0] - s[..., 1])
    D2 = nx.absolute(s[..., 1] - s[..., 2])
    lo = nx.minimum(D1, D2)
    hi = nx.maximum(D1, D2)
    if floor > 0:
        hi = nx.maximum(hi, floor)
    hi = hi + (hi.value == 0).astype(np.float64)    # 0/0 -> 0/1
    r = lo / hi
    return -nx.mul(r, nx.log(nx.maximum(r, _TINY)))


def entropy_values(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    D1 = np.abs(s[..., 0] - s[..., 1])
    D2 = np.abs(s[..., 1] - s[..., 2])
    lo, hi = np.minimum(D1, D2), np.maximum(D1, D2)
    r = np.divide(lo, hi, out=np.zeros_like(lo), where=hi > 0)
    return -r * np.log(np.maximum(r, _TINY))


def inter_graph(qA: np.ndarray, QA: nx.Node, qB: np.ndarray, QB: nx.Node, zeta: float,
                floor: float = 0.0) -> nx.Node:
    erA, erB = entropy_values(qA), entropy_values(qB)
    live = (erA != erB).astype(np.float64)
    gap = entropy_graph(QA, floor) - entropy_graph(QB, floor) - zeta
    return nx.mean(nx.mul(live, nx.relu(nx.mul(_delta(erA, erB), gap))))


# ---------------------------------------------------------------- scalar front-ends

def _triplet(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,):
        raise ContractError(f"{name} must be a triplet, got shape {x.shape}")
    return x


def align_loss(Q, delta, th: float, eps: float = 0.02) -> float:
    Q = np.asarray(Q, dtype=np.float64).reshape(-1)
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    if len(Q) != len(delta) or len(Q) == 0:
        raise ContractError(f"align_loss needs equal non-empty lists, got {len(Q)} and {len(delta)}")
    return align_graph(nx.const(Q), delta, nx.const(th), eps).item()


def rank_loss(q, Q, eps: float = 0.02) -> float:
    return rank_graph(_triplet(q, "q"), nx.const(_triplet(Q, "Q")), eps).item()


def drank_loss(q, Q, eps: float = 0.02) -> float:
    return drank_graph(_triplet(q, "q"), nx.const(_triplet(Q, "Q")), eps).item()


def intra_loss(q, Q, eps: float = 0.02, lambda_intra: float = 1.0) -> float:
    return rank_loss(q, Q, eps) + lambda_intra * drank_loss(q, Q, eps)


def entropy(s) -> EntropyValue:
    s = _triplet(s, "s")
    return EntropyValue(abs(s[0] - s[1]), abs(s[1] - s[2]), float(entropy_values(s)))


def inter_loss(tripletA, tripletB, zeta: float = 0.01) -> float:
    """Each triplet argument is a ``(q, Q)`` pair of relative and absolute scores."""
    (qA, QA), (qB, QB) = tripletA, tripletB
    return inter_graph(_triplet(qA, "qA"), nx.const(_triplet(QA, "QA")),
                       _triplet(qB, "qB"), nx.const(_triplet(QB, "QB")), zeta).item()


def inter_loss_from_entropies(erA: float, erB: float, eaA: float, eaB: float, zeta: float = 0.01) -> float:
    if erA == erB:
        return 0.0
    d = -1.0 if erA > erB else 1.0
    return max(0.0, d * (eaA - eaB - zeta))


# ---------------------------------------------------------------- batches and total loss

@dataclass
class AqaBatch:
    feats: np.ndarray    # (B, 3, C)
    q: np.ndarray        # (B, 3) relative scores mapped into (0, 1)
    delta: np.ndarray    # (B, 3) -1 correct / +1 wrong
    classes: np.ndarray  # (B,)
    partner: np.ndarray  # (B,) index of a different-class triplet, -1 if none


def pair_partners(classes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For each triplet, a uniformly drawn triplet of another class (-1 if none)."""
    classes = np.asarray(classes)
    n = len(classes)
    out = np.full(n, -1)
    has_other = np.array([np.any(classes != c) for c in np.unique(classes)])
    if not has_other.any():
        return out
    todo = np.arange(n)
    while len(todo):
        draw = rng.integers(0, n, len(todo))
        ok = classes[draw] != classes[todo]
        out[todo[ok]] = draw[ok]
        todo = todo[~ok]
    return out


def total_graph(p: Sequence, batch: AqaBatch, hyper: AqaHyper,
                use_intra: bool = True, use_inter: bool = True):
    """Total loss node and a dict of its component nodes."""
    if batch.feats.ndim != 3 or batch.feats.shape[1] != 3:
        raise ContractError(f"batch features must be (B, 3, C), got {batch.feats.shape}")
    Q = score_graph(p, batch.feats)                 # (B, 3)
    th = nx.sigmoid(p[4])[0, 0]
    parts = {"align": align_graph(Q, batch.delta, th, hyper.eps)}
    total = parts["align"]
    if use_intra:
        parts["rank"] = rank_graph(batch.q, Q, hyper.eps)
        parts["drank"] = drank_graph(batch.q, Q, hyper.eps)
        parts["intra"] = parts["rank"] + hyper.lambda_intra * parts["drank"]
        total = total + hyper.lambda_a1 * parts["intra"]
    if use_inter:
        a = np.flatnonzero(batch.partner >= 0)
        if len(a):
            b = batch.partner[a]
            parts["inter"] = inter_graph(batch.q[a], Q[a], batch.q[b], Q[b], hyper.zeta,
                                         hyper.entropy_floor)
            total = total + hyper.lambda_a2 * parts["inter"]
    return total, parts


def aqa_total_loss(params: AqaParams, batch: AqaBatch, hyper: AqaHyper | None = None,
                   use_intra: bool = True, use_inter: bool = True) -> float:
    total, _ = total_graph(params.arrays(), batch, hyper or AqaHyper(), use_intra, use_inter)
    return total.item()


@dataclass
class AqaConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch: int = 2048
    epochs: int = 1500
    use_intra: bool = True
    use_inter: bool = True
    # returned weights are the mean of the iterates after this fraction of the epochs; 1.0 keeps the last one
    average_from: float = 0.5


@dataclass
class AqaHistory:
    epoch: list = field(default_factory=list)
    total: list = field(default_factory=list)
    th: list = field(default_factory=list)


def make_batch(idx: np.ndarray, feats: np.ndarray, q: np.ndarray, delta: np.ndarray,
               labels: np.ndarray, rng: np.random.Generator) -> AqaBatch:
    """Gather an (B, 3) index block into an AqaBatch; ``feats`` is C x N."""
    classes = labels[idx[:, 0]]
    return AqaBatch(np.transpose(feats[:, idx], (1, 2, 0)), q[idx], delta[idx],
                    classes, pair_partners(classes, rng))


def train_aqa(params: AqaParams, feats: np.ndarray, q: np.ndarray, delta: np.ndarray,
              labels, hyper: AqaHyper, config: AqaConfig, seed: int,
              on_epoch=None) -> tuple[AqaParams, AqaHistory]:
    """Adam with decoupled weight decay on the weight matrices.

    ``feats`` is C x N; ``q`` the relative scores in (0, 1); ``delta`` the
    recognition indicators of the same N samples.  ``on_epoch(epoch, params)``
    is called after every epoch with the current iterate when given.

    With a fixed learning rate the hinge losses never settle, and held-out
    rankings of the last iterate swing by several SROCC points from epoch to
    epoch.  The returned weights are therefore the plain mean of the iterates
    from ``config.average_from * epochs`` on.
    """
    from .dataio import sample_triplets

    labels = np.asarray(labels)
    q = np.asarray(q, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    arrays = params.arrays()
    nodes = [nx.param(a) for a in arrays[:5]] + [nx.const(a) for a in arrays[5:]]
    opt = nx.Adam(nodes[:5], lr=config.lr, weight_decay=config.weight_decay,
                  decay_mask=[True, False, True, False, False])
    rng = np.random.default_rng([seed, 7])
    steps = max(1, int(np.ceil(len(labels) / (3 * config.batch))))
    hist = AqaHistory()
    avg_start = min(int(config.average_from * config.epochs), config.epochs - 1)
    avg_sum, avg_n = None, 0
    for epoch in range(config.epochs):
        tb = sample_triplets(labels, config.batch, seed * 100003 + epoch, steps)
        acc = 0.0
        for idx in tb.batches:
            batch = make_batch(idx, feats, q, delta, labels, rng)
            total, _ = total_graph(nodes, batch, hyper, config.use_intra, config.use_inter)
            nx.backward(total)
            opt.step()
            acc += total.item()
        hist.epoch.append(epoch)
        hist.total.append(acc / len(tb.batches))
        hist.th.append(float(1 / (1 + np.exp(-nodes[4].value[0, 0]))))
        if epoch >= avg_start:
            current = [n.value for n in nodes]
            avg_sum = [a.copy() for a in current] if avg_sum is None else [s + a for s, a in zip(avg_sum, current)]
            avg_n += 1
        if on_epoch is not None:
            on_epoch(epoch, AqaParams.from_arrays([n.value for n in nodes]))
        log.debug("aqa epoch %d loss %.4f th %.3f", epoch, hist.total[-1], hist.th[-1])
    if avg_sum is None:
        return AqaParams.from_arrays([n.value for n in nodes]), hist
    return AqaParams.from_arrays([a / avg_n for a in avg_sum]), hist
