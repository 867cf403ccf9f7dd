"""Relative quality: attention-synthesized class templates and cosine scores."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError
from .extractor import cross_entropy

log = logging.getLogger(__name__)

ATTENTION_MODES = ("standard", "as-printed")


@dataclass
class RqaParams:
    """Per-head query/key/value maps; each list has one entry per head."""
    wq: list
    bq: list
    wk: list
    bk: list
    wv: list
    bv: list

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def head_dim(self) -> int:
        return self.wq[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.heads * self.head_dim

    def arrays(self) -> list[np.ndarray]:
        out = []
        for m in range(self.heads):
            out += [self.wq[m], self.bq[m], self.wk[m], self.bk[m], self.wv[m], self.bv[m]]
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "RqaParams":
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        if len(arrays) % 6:
            raise ContractError("RQA parameters come in groups of six per head")
        return cls(*[arrays[k::6] for k in range(6)])

    @classmethod
    def init(cls, rng: np.random.Generator, feature_dim: int = 64, heads: int = 4,
             value_noise: float = 0.01) -> "RqaParams":
        if heads < 1 or feature_dim % heads:
            raise ConfigError(f"{heads} heads do not divide feature dim {feature_dim}")
        d = feature_dim // heads
        s = 1.0 / np.sqrt(d)
        # value maps start near identity so early templates are attention-weighted features
        return cls(
            wq=[rng.normal(0, s, (d, d)) for _ in range(heads)],
            bq=[np.zeros((d, 1)) for _ in range(heads)],
            wk=[rng.normal(0, s, (d, d)) for _ in range(heads)],
            bk=[np.zeros((d, 1)) for _ in range(heads)],
            wv=[np.eye(d) + rng.normal(0, value_noise, (d, d)) for _ in range(heads)],
            bv=[np.zeros((d, 1)) for _ in range(heads)],
        )


@dataclass
class TemplateSet:
    T: np.ndarray       # C x N, column i is image i's template
    T_bar: np.ndarray   # C, column mean of T


@dataclass
class RqaLossParts:
    recog: float
    consis: float
    lambda_c: float
    total: float


def template_graph(p: list, F, heads: int, attention: str = "standard") -> nx.Node:
    """Templates on the tape.

    ``p`` is the flat per-head parameter list (Nodes or arrays, in
    ``RqaParams.arrays()`` order); ``F`` is C x N or a B x C x N stack.
    """
    if attention not in ATTENTION_MODES:
        raise ConfigError(f"attention must be one of {ATTENTION_MODES}, got {attention!r}")
    F = nx.as_node(F)
    C = F.shape[-2]
    if heads < 1 or C % heads:
        raise ConfigError(f"{heads} heads do not divide feature dim {C}")
    d = C // heads
    outs = []
    for m in range(heads):
        wq, bq, wk, bk, wv, bv = p[6 * m:6 * m + 6]
        Fm = F[..., m * d:(m + 1) * d, :]
        Q = nx.matmul(wq, Fm) + bq
        V = nx.matmul(wv, Fm) + bv
        K = V if attention == "as-printed" else nx.matmul(wk, Fm) + bk
        # scores[i, j] = q_i . k_j ; softmax over keys j
        scores = nx.matmul(Q.T, K) / np.sqrt(d)
        weights = nx.softmax_rows(scores)
        outs.append(nx.matmul(V, weights.T))
    return nx.concat(outs, axis=-2)


def synthesize_templates(params: RqaParams, F: np.ndarray, attention: str = "standard") -> TemplateSet:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] < 1:
        raise ContractError(f"features must be C x N with N >= 1, got {F.shape}")
    if F.shape[0] != params.feature_dim:
        raise ConfigError(f"feature dim {F.shape[0]} does not match RQA width {params.feature_dim}")
    T = template_graph(params.arrays(), F, params.heads, attention).value
    return TemplateSet(T, T.mean(axis=1))


def consistency_graph(T: nx.Node) -> nx.Node:
    """Mean over image pairs of the per-channel MSE between their templates."""
    N = T.shape[-1]
    if N < 2:
        return nx.const(0.0)
    terms = []
    for i in range(N - 1):
        for j in range(i + 1, N):
            diff = T[..., :, i] - T[..., :, j]
            terms.append(nx.mean(diff * diff))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (2.0 / (N * (N - 1)))


def loss_graph(T: nx.Node, labels, head_w, head_b, lambda_c: float = 1.0):
    """(total, recog, consis) nodes for a template stack and per-group labels."""
    labels = np.asarray(labels)
    logits = nx.matmul(head_w, T) + head_b
    recog = cross_entropy(logits, labels.reshape(labels.shape + (1,)) if labels.ndim else labels)
    consis = consistency_graph(T)
    return recog + lambda_c * consis, recog, consis


def rqa_loss(templates: TemplateSet, labels, head, lambda_c: float = 1.0) -> RqaLossParts:
    """Recognition plus consistency loss for one single-class group.

    ``head`` is the frozen extractor (anything with ``wh``/``bh``) or a
    ``(weights, bias)`` pair.
    """
    labels = np.asarray(labels).reshape(-1)
    if len(np.unique(labels)) != 1:
        raise ContractError("rqa_loss expects every image of the group to share one label")
    wh, bh = (head.wh, head.bh) if hasattr(head, "wh") else head
    total, recog, consis = loss_graph(nx.const(templates.T), labels[0], wh, bh, lambda_c)
    return RqaLossParts(recog.item(), consis.item(), lambda_c, total.item())


def relative_score(T_bar, F_i) -> float:
    """Cosine between a class template and one feature vector."""
    return nx.cosine(T_bar, F_i)


def relative_scores(T_bar: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Cosine of every column of ``F`` with ``T_bar``; zero-norm columns give 0."""
    num = T_bar @ F
    den = np.linalg.norm(T_bar) * np.linalg.norm(F, axis=0)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def to_unit(q):
    """Map a cosine in [-1, 1] to [0, 1]."""
    return (np.asarray(q) + 1.0) / 2.0


def class_templates(params: RqaParams, feats: np.ndarray, labels, seed: int,
                    n_triplets: int = 64, attention: str = "standard") -> dict[int, np.ndarray]:
    """Per-class template: mean of pooled templates over random same-class triplets."""
    from .dataio import sample_triplets

    labels = np.asarray(labels)
    out = {}
    for c in np.unique(labels):
        ids = np.flatnonzero(labels == c)
        if len(ids) < 3:
            out[int(c)] = template_graph(params.arrays(), feats[:, ids], params.heads,
                                         attention).value.mean(axis=1)
            continue
        tb = sample_triplets(np.zeros(len(ids), int), n_triplets, seed + int(c)).batches[0]
        stack = np.transpose(feats[:, ids[tb]], (1, 0, 2))  # (n, C, 3)
        T = template_graph(params.arrays(), stack, params.heads, attention).value
        out[int(c)] = T.mean(axis=(0, 2))
    return out


@dataclass
class RqaConfig:
    lr: float = 5e-4
    decay_rate: float = 0.94
    decay_every: int = 200
    batch: int = 32
    epochs: int = 40
    lambda_c: float = 1.0
    attention: str = "standard"


@dataclass
class RqaHistory:
    epoch: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    total: list = field(default_factory=list)
    recog: list = field(default_factory=list)
    consis: list = field(default_factory=list)


def train_rqa(params: RqaParams, feats: np.ndarray, labels, head, config: RqaConfig,
              seed: int) -> tuple[RqaParams, RqaHistory]:
    """Adam on same-class triplets with step learning-rate decay.

    One epoch is ``ceil(N / (3 * batch))`` steps, i.e. roughly one pass over
    the N training features.
    """
    from .dataio import sample_triplets

    labels = np.asarray(labels)
    wh, bh = (head.wh, head.bh) if hasattr(head, "wh") else head
    nodes = [nx.param(a) for a in params.arrays()]
    opt = nx.Adam(nodes, lr=config.lr)
    steps = max(1, int(np.ceil(len(labels) / (3 * config.batch))))
    hist = RqaHistory()
    for epoch in range(config.epochs):
        opt.lr = nx.step_decay(config.lr, config.decay_rate, config.decay_every, epoch)
        tb = sample_triplets(labels, config.batch, seed * 100003 + epoch, steps)
        sums = np.zeros(3)
        for idx in tb.batches:
            F = np.transpose(feats[:, idx], (1, 0, 2))  # (B, C, 3)
            T = template_graph(nodes, F, params.heads, config.attention)
            total, recog, consis = loss_graph(T, labels[idx[:, 0]], wh, bh, config.lambda_c)
            nx.backward(total)
            opt.step()
            sums += [total.item(), recog.item(), consis.item()]
        sums /= len(tb.batches)
        hist.epoch.append(epoch)
        hist.lr.append(opt.lr)
        hist.total.append(sums[0])
        hist.recog.append(sums[1])
        hist.consis.append(sums[2])
        log.debug("rqa epoch %d total %.4f recog %.4f consis %.4f", epoch, *sums)
    return RqaParams.from_arrays([n.value for n in nodes]), hist
