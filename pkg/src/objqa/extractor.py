"""Pre-trained digit recognizer: penultimate features, predictions, frozen head.

A two-layer perceptron 784 -> 256 -> C (relu) with a linear C -> 10 classifier
on top.  Columns are samples throughout, so features come out as a C x N
matrix.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ParameterError

log = logging.getLogger(__name__)

N_CLASSES = 10


@dataclass
class ExtractorParams:
    w1: np.ndarray  # (hidden, pixels)
    b1: np.ndarray  # (hidden, 1)
    w2: np.ndarray  # (C, hidden)
    b2: np.ndarray  # (C, 1)
    wh: np.ndarray  # (10, C)
    bh: np.ndarray  # (10, 1)

    @property
    def feature_dim(self) -> int:
        return self.w2.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.wh, self.bh]

    @classmethod
    def from_arrays(cls, arrays) -> "ExtractorParams":
        return cls(*[np.asarray(a, dtype=np.float64) for a in arrays])

    @classmethod
    def init(cls, rng: np.random.Generator, pixels: int = 784, hidden: int = 256,
             feature_dim: int = 64) -> "ExtractorParams":
        def he(o, i):
            return rng.normal(0, np.sqrt(2.0 / i), (o, i))
        return cls(he(hidden, pixels), np.zeros((hidden, 1)),
                   he(feature_dim, hidden), np.zeros((feature_dim, 1)),
                   rng.normal(0, np.sqrt(1.0 / feature_dim), (N_CLASSES, feature_dim)),
                   np.zeros((N_CLASSES, 1)))


@dataclass
class Prediction:
    logits: np.ndarray
    predicted: int
    confidence: float

    def delta(self, label: int) -> int:
        """-1 when the prediction is right, +1 otherwise."""
        return -1 if self.predicted == label else 1


def _columns(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    return x.reshape(len(x), -1).T / 255.0


def _forward(p, x):
    """Tape forward; ``p`` holds Nodes or arrays in ``arrays()`` order."""
    w1, b1, w2, b2, wh, bh = p
    h = nx.relu(nx.matmul(w1, x) + b1)
    f = nx.relu(nx.matmul(w2, h) + b2)
    return f, nx.matmul(wh, f) + bh


def features(params: ExtractorParams, images) -> np.ndarray:
    """Penultimate activations, one column per image (C x N)."""
    x = _columns(images)
    h = np.maximum(params.w1 @ x + params.b1, 0)
    return np.maximum(params.w2 @ h + params.b2, 0)


def head_logits(params: ExtractorParams, feats: np.ndarray) -> np.ndarray:
    return params.wh @ feats + params.bh


def _softmax_cols(z):
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def predict(params: ExtractorParams, images) -> tuple[np.ndarray, np.ndarray]:
    """Predicted classes and max-softmax confidences for a batch of images."""
    probs = _softmax_cols(head_logits(params, features(params, images)))
    return probs.argmax(axis=0), probs.max(axis=0)


def recognize(params: ExtractorParams, image) -> Prediction:
    logits = head_logits(params, features(params, image))[:, 0]
    probs = _softmax_cols(logits[:, None])[:, 0]
    return Prediction(logits, int(probs.argmax()), float(probs.max()))


def cross_entropy(logits: nx.Node, labels: np.ndarray) -> nx.Node:
    """Mean cross-entropy; classes along axis -2, samples along the last axis."""
    logp = nx.log_softmax(logits, axis=-2)
    onehot = np.zeros(logits.shape)
    idx = np.broadcast_to(labels, logits.shape[:-2] + logits.shape[-1:])
    np.put_along_axis(onehot, np.expand_dims(idx, -2), 1.0, axis=-2)
    return -nx.sum(logp * onehot) / float(idx.size)


def pretrain(images, labels, epochs: int = 30, seed: int = 0, feature_dim: int = 64,
             hidden: int = 256, lr: float = 1e-3, batch: int = 64) -> ExtractorParams:
    """Cross-entropy training with Adam; returns the parameters to freeze."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ParameterError("pretrain needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    params = ExtractorParams.init(rng, images[0].size, hidden, feature_dim)
    nodes = [nx.param(a) for a in params.arrays()]
    opt = nx.Adam(nodes, lr=lr)
    x_all = _columns(images)
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for s in range(0, len(order), batch):
            idx = order[s:s + batch]
            _, logits = _forward(nodes, x_all[:, idx])
            loss = cross_entropy(logits, labels[idx])
            nx.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        log.debug("pretrain epoch %d loss %.4f", epoch, total / len(order))
    return ExtractorParams.from_arrays([n.value for n in nodes])


def accuracy(params: ExtractorParams, images, labels) -> float:
    pred, _ = predict(params, images)
    return float(np.mean(pred == np.asarray(labels)))
