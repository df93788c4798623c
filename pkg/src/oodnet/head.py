"""Second-stage anomaly head: a 256-256-1 sigmoid MLP over deep
features, trained with binary cross-entropy against labeled anomaly
data while the backbone stays frozen."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, EmptyDataset
from .nn import SGD, Backbone, Dense, ReLU, extract_features

BCE_CLAMP = 1e-7


class OodHead:
    """dense(d -> 256) / relu / dense(256 -> 256) / relu / dense(256 -> 1)
    with sigmoid output. Emits probability of the sample being normal."""

    def __init__(self, in_dim: int, seed: int = 0, dtype=np.float32,
                 tau: float = 0.5):
        rng = np.random.default_rng(seed)
        self.layers = [
            Dense(in_dim, 256, rng, dtype), ReLU(),
            Dense(256, 256, rng, dtype), ReLU(),
            Dense(256, 1, rng, dtype),
        ]
        self.in_dim = in_dim
        self.tau = tau
        self.dtype = dtype

    def parameters(self):
        return [p for layer in self.layers for p in layer.params]

    def gradients(self):
        return [g for layer in self.layers for g in layer.grads]

    def forward_many(self, features: np.ndarray) -> np.ndarray:
        if features.ndim != 2 or features.shape[1] != self.in_dim:
            raise DimMismatch(f"expected (m, {self.in_dim}), got {features.shape}")
        h = np.asarray(features, dtype=self.dtype)
        for layer in self.layers:
            h = layer.forward(h)
        return _sigmoid(h[:, 0])

    def backward(self, dlogit: np.ndarray):
        """Backprop from the pre-sigmoid logit gradient (m,)."""
        g = dlogit[:, None].astype(self.dtype)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def astype(self, dtype) -> "OodHead":
        other = OodHead(self.in_dim, seed=0, dtype=dtype, tau=self.tau)
        for dst, src in zip(other.layers, self.layers):
            for p_dst, p_src in zip(dst.params, src.params):
                p_dst[...] = p_src.astype(dtype)
        return other

    def state(self) -> dict:
        out = {}
        dense = [l for l in self.layers if isinstance(l, Dense)]
        for i, layer in enumerate(dense, 1):
            out[f"head{i}.W"] = layer.W
            out[f"head{i}.b"] = layer.b
        return out

    def load_state(self, arrays: dict):
        for name, value in self.state().items():
            value[...] = arrays[name].astype(self.dtype)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def head_forward(head: OodHead, feature: np.ndarray) -> float:
    """Probability that a single feature vector is normal."""
    return float(head.forward_many(np.atleast_2d(feature))[0])


def bce(p: float, y: int) -> float:
    """Binary cross-entropy with probabilities clamped away from {0, 1}."""
    p = min(max(float(p), BCE_CLAMP), 1.0 - BCE_CLAMP)
    return -(y * np.log(p) + (1 - y) * np.log(1.0 - p))


def bce_many(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(-(y * np.log(p) + (1 - y) * np.log(1.0 - p)).sum())


def classify_ood(head: OodHead, feature: np.ndarray,
                 tau: float | None = None) -> str:
    """'normal' when p >= tau (inclusive), else 'ood'."""
    tau = head.tau if tau is None else tau
    p = head_forward(head, feature)
    return "normal" if p >= tau else "ood"


@dataclass
class HeadTrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 20
    momentum: float = 0.9
    seed: int = 0


def train_head(model: Backbone, head: OodHead, main_ds, anomaly_ds,
               cfg: HeadTrainConfig) -> list[float]:
    """Second-stage training: fit the head on frozen-backbone features,
    label 1 = normal (main data), 0 = anomaly.

    Each epoch subsamples the larger source down to the smaller one so
    batches stay balanced. Returns the per-epoch mean loss trace.
    """
    if len(main_ds) == 0 or len(anomaly_ds) == 0:
        raise EmptyDataset("both main and anomaly datasets must be nonempty")
    feats_main = extract_features(model, main_ds.images)
    feats_anom = extract_features(model, anomaly_ds.images)
    return train_head_on_features(head, feats_main, feats_anom, cfg)


def train_head_on_features(head: OodHead, feats_main, feats_anom,
                           cfg: HeadTrainConfig) -> list[float]:
    rng = np.random.default_rng(cfg.seed)
    optimizer = SGD(head.parameters(), cfg.learning_rate, cfg.momentum)
    k = min(len(feats_main), len(feats_anom))
    trace = []
    for _ in range(cfg.epochs):
        idx_main = rng.choice(len(feats_main), size=k, replace=False)
        idx_anom = rng.choice(len(feats_anom), size=k, replace=False)
        X = np.concatenate([feats_main[idx_main], feats_anom[idx_anom]])
        y = np.concatenate([np.ones(k), np.zeros(k)])
        order = rng.permutation(len(X))
        X, y = X[order], y[order]
        total = 0.0
        for i in range(0, len(X), cfg.batch_size):
            xb, yb = X[i:i + cfg.batch_size], y[i:i + cfg.batch_size]
            p = head.forward_many(xb)
            total += bce_many(p, yb)
            # d(bce)/d(logit) = p - y, averaged over the batch
            head.backward((p - yb) / len(xb))
            optimizer.step(head.gradients())
        trace.append(total / len(X))
    return trace
