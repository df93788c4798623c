"""From-scratch CNN: a max-pool/ReLU LeNet variant with explicit
backpropagation, softmax cross-entropy, momentum SGD, and a
finite-difference gradient checker.

All arrays are plain numpy; float32 by default, float64 in verification
mode. The deep feature is the post-ReLU output of the last hidden dense
layer (84 units by default) feeding the linear classifier.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ROLE_MAIN_TRAIN, LabeledDataset, MiniBatch, make_batches
from .errors import LabelOutOfRange, NonFiniteLoss, ShapeMismatch


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 3
    seed: int = 0
    lam: float = 0.0            # weight of the centroid-pull term
    center_rate: float = 0.5    # centroid update rate
    momentum: float = 0.9
    dtype: type = np.float32    # np.float64 for gradient verification

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# ---------------------------------------------------------------------------
# layers


class Conv2D:
    """5x5 (by default) convolution, stride 1, optional zero padding."""

    def __init__(self, in_ch, out_ch, kernel, pad, rng, dtype):
        fan_in = in_ch * kernel * kernel
        self.W = (rng.standard_normal((out_ch, in_ch, kernel, kernel))
                  * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.kernel = kernel
        self.pad = pad
        self._x = None
        self.dW = None
        self.db = None

    @property
    def params(self):
        return [self.W, self.b]

    @property
    def grads(self):
        return [self.dW, self.db]

    def forward(self, x):
        k, p = self.kernel, self.pad
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        m, _, H, W = x.shape
        Ho, Wo = H - k + 1, W - k + 1
        out = np.zeros((m, self.W.shape[0], Ho, Wo), dtype=x.dtype)
        # accumulate one kernel offset at a time; cheap for 5x5 kernels.
        # optimize=False keeps a fixed reduction order so per-sample
        # results do not depend on batch size.
        for u in range(k):
            for v in range(k):
                patch = x[:, :, u:u + Ho, v:v + Wo]
                out += np.einsum("mchw,oc->mohw", patch, self.W[:, :, u, v],
                                 optimize=False)
        out += self.b[None, :, None, None]
        self._x = x
        return out

    def backward(self, grad):
        x = self._x
        k, p = self.kernel, self.pad
        m, _, Ho, Wo = grad.shape
        self.dW = np.zeros_like(self.W)
        self.db = grad.sum(axis=(0, 2, 3))
        dx = np.zeros_like(x)
        for u in range(k):
            for v in range(k):
                patch = x[:, :, u:u + Ho, v:v + Wo]
                self.dW[:, :, u, v] = np.einsum("mchw,mohw->oc", patch, grad,
                                                optimize=True)
                dx[:, :, u:u + Ho, v:v + Wo] += np.einsum(
                    "mohw,oc->mchw", grad, self.W[:, :, u, v], optimize=True)
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return dx


class ReLU:
    params = ()
    grads = ()

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class MaxPool2x2:
    """2x2 max pooling, stride 2. Gradient flows only to the argmax of
    each window (first index wins on ties)."""
    params = ()
    grads = ()

    def forward(self, x):
        m, c, H, W = x.shape
        win = x.reshape(m, c, H // 2, 2, W // 2, 2)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(m, c, H // 2, W // 2, 4)
        self._argmax = win.argmax(axis=-1)
        self._in_shape = x.shape
        return win.max(axis=-1)

    def backward(self, grad):
        m, c, Ho, Wo = grad.shape
        flat = np.zeros((m, c, Ho, Wo, 4), dtype=grad.dtype)
        np.put_along_axis(flat, self._argmax[..., None], grad[..., None], axis=-1)
        flat = flat.reshape(m, c, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return flat.reshape(self._in_shape)


class Flatten:
    params = ()
    grads = ()

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Dense:
    def __init__(self, n_in, n_out, rng, dtype):
        self.W = (rng.standard_normal((n_in, n_out))
                  * np.sqrt(2.0 / n_in)).astype(dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self._x = None
        self.dW = None
        self.db = None

    @property
    def params(self):
        return [self.W, self.b]

    @property
    def grads(self):
        return [self.dW, self.db]

    def forward(self, x):
        self._x = x
        # fixed-order reduction: per-sample output independent of batch size
        return np.einsum("mi,io->mo", x, self.W, optimize=False) + self.b

    def backward(self, grad):
        self._x = np.ascontiguousarray(self._x)
        self.dW = self._x.T @ grad
        self.db = grad.sum(axis=0)
        return grad @ self.W.T


# ---------------------------------------------------------------------------
# backbone


class Backbone:
    """conv(1->6, 5x5, pad 2) / pool / conv(6->16, 5x5) / pool /
    dense->120 / dense->feature_dim / linear classifier.

    forward returns (deep features, logits); the feature vector is the
    post-ReLU output of the feature_dim layer.
    """

    def __init__(self, n_classes: int, input_side: int = 28,
                 feature_dim: int = 84, seed: int = 0, dtype=np.float32):
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        if input_side % 2 or input_side < 12:
            raise ValueError("input side must be even and >= 12")
        rng = np.random.default_rng(seed)
        flat = 16 * ((input_side // 2 - 4) // 2) ** 2
        self.trunk = [
            Conv2D(1, 6, 5, 2, rng, dtype), ReLU(), MaxPool2x2(),
            Conv2D(6, 16, 5, 0, rng, dtype), ReLU(), MaxPool2x2(),
            Flatten(),
            Dense(flat, 120, rng, dtype), ReLU(),
            Dense(120, feature_dim, rng, dtype), ReLU(),
        ]
        self.classifier = Dense(feature_dim, n_classes, rng, dtype)
        self.n_classes = n_classes
        self.input_side = input_side
        self.feature_dim = feature_dim
        self.dtype = dtype

    @property
    def layers(self):
        return self.trunk + [self.classifier]

    def parameters(self):
        return [p for layer in self.layers for p in layer.params]

    def gradients(self):
        return [g for layer in self.layers for g in layer.grads]

    def forward(self, images: np.ndarray):
        """images (m, H, W) -> (features (m, d), logits (m, n))."""
        if images.ndim != 3 or images.shape[1:] != (self.input_side,) * 2:
            raise ShapeMismatch(
                f"expected (m, {self.input_side}, {self.input_side}), "
                f"got {images.shape}")
        h = np.asarray(images, dtype=self.dtype)[:, None, :, :]
        for layer in self.trunk:
            h = layer.forward(h)
        return h, self.classifier.forward(h)

    def backward(self, dlogits: np.ndarray, dfeatures=None):
        """Backpropagate gradients w.r.t. logits and (optionally) features."""
        g = self.classifier.backward(dlogits)
        if dfeatures is not None:
            g = g + dfeatures
        for layer in reversed(self.trunk):
            g = layer.backward(g)
        return g

    def astype(self, dtype) -> "Backbone":
        """Copy of the model with all parameters cast to dtype."""
        other = Backbone(self.n_classes, self.input_side, self.feature_dim,
                         seed=0, dtype=dtype)
        for dst, src in zip(other.layers, self.layers):
            for p_dst, p_src in zip(dst.params, src.params):
                p_dst[...] = p_src.astype(dtype)
        return other

    def state(self) -> dict:
        """Named parameter arrays, in a stable order."""
        out = {}
        dense_names = iter(["fc1", "fc2", "clf"])
        conv_names = iter(["conv1", "conv2"])
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                name = next(conv_names)
            elif isinstance(layer, Dense):
                name = next(dense_names)
            else:
                continue
            out[f"{name}.W"] = layer.W
            out[f"{name}.b"] = layer.b
        return out

    def load_state(self, arrays: dict):
        for name, value in self.state().items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name}")
            if arrays[name].shape != value.shape:
                raise ShapeMismatch(f"{name}: {arrays[name].shape} vs {value.shape}")
            value[...] = arrays[name].astype(self.dtype)


def extract_features(model: Backbone, images: np.ndarray,
                     batch_size: int = 256) -> np.ndarray:
    """Deep features for a stack of images; batching does not affect values."""
    if images.ndim == 2:
        images = images[None]
    chunks = [model.forward(images[i:i + batch_size])[0]
              for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# loss


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Summed cross-entropy of softmax over the batch, plus its gradient."""
    labels = np.asarray(labels)
    n = logits.shape[1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise LabelOutOfRange(f"labels must lie in [0, {n})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    idx = np.arange(len(labels))
    loss = -log_probs[idx, labels].sum()
    grad = np.exp(log_probs)
    grad[idx, labels] -= 1.0
    return float(loss), grad


# ---------------------------------------------------------------------------
# optimizer / training


class SGD:
    """Momentum SGD over an explicit parameter list."""

    def __init__(self, params, learning_rate, momentum=0.9):
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads):
        for p, g, v in zip(self.params, grads, self.velocity):
            v *= self.momentum
            v -= self.learning_rate * g
            p += v


@dataclass
class EpochRecord:
    loss: float          # mean combined loss per sample
    accuracy: float


def train_epoch(model: Backbone, centers, ds: LabeledDataset,
                cfg: TrainConfig, optimizer: SGD | None = None,
                epoch_seed: int | None = None) -> EpochRecord:
    """One pass of mini-batch SGD on the combined loss.

    Gradients are averaged over the batch before the step so the step
    size is insensitive to batch size. Mutates model and centers in
    place; deterministic given (cfg.seed, epoch_seed).
    """
    from .centerloss import center_loss, center_loss_grads

    if ds.role != ROLE_MAIN_TRAIN:
        raise ValueError(f"training requires a main-train dataset, got {ds.role}")
    if optimizer is None:
        optimizer = SGD(model.parameters(), cfg.learning_rate, cfg.momentum)
    seed = cfg.seed if epoch_seed is None else epoch_seed
    total_loss = 0.0
    total_correct = 0
    for batch in make_batches(ds, cfg.batch_size, seed=seed, shuffle=True):
        m = len(batch)
        features, logits = model.forward(batch.images)
        loss_s, dlogits = softmax_xent(logits, batch.labels)
        loss = loss_s
        dfeatures = None
        if cfg.lam > 0:
            loss_c = center_loss(features, batch.labels, centers)
            dfeat, deltas = center_loss_grads(features, batch.labels, centers)
            loss += cfg.lam * loss_c
            dfeatures = (cfg.lam / m) * dfeat
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"loss={loss} on batch of {m}")
        model.backward(dlogits / m, dfeatures)
        optimizer.step(model.gradients())
        if cfg.lam > 0:
            centers.apply_deltas(deltas)
        total_loss += loss
        total_correct += int((logits.argmax(axis=1) == batch.labels).sum())
    n = len(ds)
    return EpochRecord(loss=total_loss / n, accuracy=total_correct / n)


def train(model: Backbone, centers, ds: LabeledDataset,
          cfg: TrainConfig) -> list[EpochRecord]:
    """Full stage-one training run; returns the per-epoch trace."""
    optimizer = SGD(model.parameters(), cfg.learning_rate, cfg.momentum)
    history = []
    for epoch in range(cfg.epochs):
        record = train_epoch(model, centers, ds, cfg, optimizer,
                             epoch_seed=cfg.seed + epoch)
        history.append(record)
    return history


# ---------------------------------------------------------------------------
# gradient verification


def _combined_loss(model: Backbone, centers, batch: MiniBatch, lam: float):
    from .centerloss import center_loss

    features, logits = model.forward(batch.images)
    loss, _ = softmax_xent(logits, batch.labels)
    if lam > 0:
        loss += lam * center_loss(features, batch.labels, centers)
    return loss


def grad_check(model: Backbone, batch: MiniBatch, eps: float = 1e-5,
               lam: float = 0.0, centers=None, n_samples: int = 200,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients
    on a random subset of parameters. Requires a float64 model."""
    if model.dtype != np.float64:
        raise ValueError("gradient checking requires a float64 model")
    from .centerloss import center_loss_grads

    m = len(batch)
    features, logits = model.forward(batch.images)
    _, dlogits = softmax_xent(logits, batch.labels)
    dfeatures = None
    if lam > 0:
        dfeat, _ = center_loss_grads(features, batch.labels, centers)
        dfeatures = lam * dfeat
    model.backward(dlogits, dfeatures)
    params = model.parameters()
    grads = model.gradients()

    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    flat_idx = rng.choice(sizes.sum(), size=min(n_samples, sizes.sum()),
                          replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for idx in flat_idx:
        k = int(np.searchsorted(offsets, idx, side="right")) - 1
        local = np.unravel_index(idx - offsets[k], params[k].shape)
        p = params[k]
        orig = p[local]
        p[local] = orig + eps
        up = _combined_loss(model, centers, batch, lam)
        p[local] = orig - eps
        down = _combined_loss(model, centers, batch, lam)
        p[local] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grads[k][local]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
        worst = max(worst, rel)
    return worst
