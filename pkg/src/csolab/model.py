"""Feedforward ReLU classifier with a feature-extractor / head split.

Layer ``i`` maps activations ``a_i`` to ``a_{i+1} = relu(W_i a_i + b_i)``; the
last layer is affine and yields logits. ``features_at`` returns the
post-activation output of hidden layer ``split_index`` (1-based), and
``head_forward`` runs the remaining layers on a feature vector.

All entry points accept either a single input of shape ``(D,)`` or a batch of
shape ``(n, D)`` and return matching shapes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

CHECKPOINT_TAG = "csolab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = (64, 32)
    split_index: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.split_index is None:
            object.__setattr__(self, "split_index", len(self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer widths must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.hidden_dims:
            if not 1 <= self.split_index <= len(self.hidden_dims):
                raise ValueError(f"split_index must be in [1, {len(self.hidden_dims)}]")
        elif self.split_index != 0:
            # a purely linear net has no hidden layer; its "features" are the input
            raise ValueError("split_index must be 0 for a network without hidden layers")

    @property
    def feature_dim(self) -> int:
        return self.input_dim if self.split_index == 0 else self.hidden_dims[self.split_index - 1]

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    weight_decay: float = 0.0
    # number of leading layers whose parameters are held fixed
    freeze_layers: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class Network:
    config: ModelConfig
    layers: tuple[tuple[np.ndarray, np.ndarray], ...] = field(repr=False)

    def __post_init__(self):
        widths = self.config.widths
        if len(self.layers) != len(widths) - 1:
            raise ValueError("layer count does not match config")
        frozen = []
        for i, (W, b) in enumerate(self.layers):
            W = np.array(W, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if W.shape != (widths[i + 1], widths[i]) or b.shape != (widths[i + 1],):
                raise ValueError(f"layer {i} has shapes {W.shape}, {b.shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
            W.flags.writeable = False
            b.flags.writeable = False
            frozen.append((W, b))
        object.__setattr__(self, "layers", tuple(frozen))

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def split(self) -> int:
        return self.config.split_index

    def with_layers(self, layers) -> "Network":
        return Network(self.config, tuple((np.array(W), np.array(b)) for W, b in layers))


def init_network(cfg: ModelConfig) -> Network:
    """He-style uniform init scaled by fan-in; zero biases."""
    rng = np.random.default_rng(cfg.seed)
    widths = cfg.widths
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return Network(cfg, tuple(layers))


def zero_network(cfg: ModelConfig) -> Network:
    widths = cfg.widths
    return Network(cfg, tuple((np.zeros((o, i)), np.zeros(o)) for i, o in zip(widths[:-1], widths[1:])))


# --- forward / backward -------------------------------------------------------------


def _batch(x, dim: int) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValueError(f"expected inputs of dim {dim}, got shape {np.shape(x)}")
    return X, single


def _run(net: Network, A: np.ndarray, start: int, stop: int):
    """Apply layers [start, stop). Returns (output, list of pre-activations, list of inputs)."""
    pre, inputs = [], []
    last = net.num_layers - 1
    for i in range(start, stop):
        W, b = net.layers[i]
        inputs.append(A)
        Z = A @ W.T + b
        pre.append(Z)
        A = Z if i == last else np.maximum(Z, 0.0)
    return A, pre, inputs


def _back(net: Network, pre, start: int, G: np.ndarray, inject: Optional[dict] = None) -> np.ndarray:
    """Backpropagate ``G`` (gradient at the output of the last run layer) to the input of ``start``.

    ``inject`` maps a layer index ``j`` to an extra gradient added at ``a_j``
    (the input of layer ``j``) on the way down.
    """
    last = net.num_layers - 1
    for i in range(start + len(pre) - 1, start - 1, -1):
        Z = pre[i - start]
        if i != last:
            G = G * (Z > 0.0)  # subgradient 0 at the kink
        G = G @ net.layers[i][0]
        if inject and i in inject and inject[i] is not None:
            G = G + inject[i]
    return G


def forward(net: Network, x) -> np.ndarray:
    X, single = _batch(x, net.config.input_dim)
    out = _run(net, X, 0, net.num_layers)[0]
    return out[0] if single else out


def features_at(net: Network, x) -> np.ndarray:
    X, single = _batch(x, net.config.input_dim)
    out = _run(net, X, 0, net.split)[0]
    return out[0] if single else out


def head_forward(net: Network, features) -> np.ndarray:
    F, single = _batch(features, net.config.feature_dim)
    out = _run(net, F, net.split, net.num_layers)[0]
    return out[0] if single else out


def forward_with_features(net: Network, X: np.ndarray):
    """Batched forward returning ``(logits, features, cache)`` for use with :func:`backward_input`."""
    X, _ = _batch(X, net.config.input_dim)
    feats, pre_a, _ = _run(net, X, 0, net.split)
    logits, pre_b, _ = _run(net, feats, net.split, net.num_layers)
    return logits, feats, pre_a + pre_b


def backward_input(net: Network, cache, dlogits: Optional[np.ndarray], dfeatures: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient w.r.t. the inputs given upstream gradients at the logits and/or the split features."""
    pre = cache
    n = pre[0].shape[0]
    if dlogits is None:
        dlogits = np.zeros((n, net.config.num_classes))
        if dfeatures is not None:
            # nothing flows through the head; start directly at the split
            if net.split == 0:
                return np.asarray(dfeatures, dtype=np.float64)
            return _back(net, pre[: net.split], 0, np.asarray(dfeatures, dtype=np.float64))
    inject = {net.split: dfeatures} if dfeatures is not None else None
    return _back(net, pre, 0, np.asarray(dlogits, dtype=np.float64), inject)


def head_backward(net: Network, F: np.ndarray, dlogits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits of the head on features ``F`` and the gradient of ``sum(dlogits * logits)`` w.r.t. ``F``."""
    logits, pre, _ = _run(net, F, net.split, net.num_layers)
    return logits, _back(net, pre, net.split, dlogits)


LossFn = Callable[[np.ndarray, np.ndarray], tuple[float, Optional[np.ndarray], Optional[np.ndarray]]]


def grad_input(net: Network, x, loss: LossFn) -> np.ndarray:
    """Gradient of ``loss(logits, features)`` w.r.t. a single input ``x``.

    ``loss`` returns ``(value, dvalue/dlogits, dvalue/dfeatures)``; either
    gradient may be ``None`` when the loss does not depend on it.
    """
    X, single = _batch(x, net.config.input_dim)
    logits, feats, cache = forward_with_features(net, X)
    for a in (logits, feats):
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite intermediate in forward pass")
    _, dl, df = loss(logits[0] if single else logits, feats[0] if single else feats)
    if dl is None and df is None:
        g = np.zeros_like(X)
    else:
        dl = None if dl is None else np.atleast_2d(dl)
        df = None if df is None else np.atleast_2d(df)
        g = backward_input(net, cache, dl, df)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    return g[0] if single else g


# --- losses --------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    Z = logits - np.max(logits, axis=-1, keepdims=True)
    E = np.exp(Z)
    return E / np.sum(E, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    Z = logits - np.max(logits, axis=-1, keepdims=True)
    return Z - np.log(np.sum(np.exp(Z), axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    L = np.atleast_2d(logits)
    y = np.broadcast_to(np.asarray(labels, dtype=int), (L.shape[0],))
    n = L.shape[0]
    lsm = log_softmax(L)
    loss = -float(np.mean(lsm[np.arange(n), y]))
    G = np.exp(lsm)
    G[np.arange(n), y] -= 1.0
    G /= n
    return loss, (G if np.ndim(logits) == 2 else G[0])


def predict(net: Network, X) -> np.ndarray:
    # argmax picks the lowest index on ties
    return np.argmax(forward(net, np.atleast_2d(X)), axis=1)


def accuracy(net: Network, X, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(predict(net, X) == y))


# --- training ------------------------------------------------------------------------


def _param_grads(net: Network, X: np.ndarray, y: np.ndarray):
    logits, pre, inputs = _run(net, X, 0, net.num_layers)
    loss, G = cross_entropy(logits, y)
    grads = [None] * net.num_layers
    last = net.num_layers - 1
    for i in range(last, -1, -1):
        if i != last:
            G = G * (pre[i] > 0.0)
        grads[i] = (G.T @ inputs[i], G.sum(axis=0))
        G = G @ net.layers[i][0]
    return loss, grads


def train(net: Network, X, y, cfg: TrainConfig) -> Network:
    """Mini-batch training on cross-entropy; returns a new network.

    Shuffling uses ``cfg.seed`` only, so equal seeds give bit-identical results.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    K = net.config.num_classes
    if np.any(y < 0) or np.any(y >= K):
        raise ValueError("labels out of range")
    rng = np.random.default_rng(cfg.seed)
    params = [[W.copy(), b.copy()] for W, b in net.layers]
    m = [[np.zeros_like(W), np.zeros_like(b)] for W, b in params]
    v = [[np.zeros_like(W), np.zeros_like(b)] for W, b in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    work = net
    n = X.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = _param_grads(work, X[idx], y[idx])
            t += 1
            for i in range(cfg.freeze_layers, len(params)):
                for j in range(2):
                    g = grads[i][j]
                    if cfg.weight_decay and j == 0:
                        g = g + cfg.weight_decay * params[i][j]
                    if cfg.optimizer == "adam":
                        m[i][j] = b1 * m[i][j] + (1 - b1) * g
                        v[i][j] = b2 * v[i][j] + (1 - b2) * g * g
                        mh = m[i][j] / (1 - b1 ** t)
                        vh = v[i][j] / (1 - b2 ** t)
                        params[i][j] = params[i][j] - cfg.learning_rate * mh / (np.sqrt(vh) + eps)
                    else:
                        params[i][j] = params[i][j] - cfg.learning_rate * g
            work = _unchecked(net.config, params)
    return Network(net.config, tuple((W, b) for W, b in params))


def _unchecked(config: ModelConfig, params) -> Network:
    # skips validation inside the hot training loop
    obj = object.__new__(Network)
    object.__setattr__(obj, "config", config)
    object.__setattr__(obj, "layers", tuple((W, b) for W, b in params))
    return obj


# --- checkpoint ----------------------------------------------------------------------


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def dump_checkpoint(net: Network, masks: Optional[dict] = None) -> str:
    """Serialize a network (and optional per-class masks) to the portable text format."""
    c = net.config
    lines = [
        f"{CHECKPOINT_TAG} v{CHECKPOINT_VERSION}",
        f"input_dim {c.input_dim}",
        f"hidden_dims {' '.join(str(h) for h in c.hidden_dims)}".rstrip(),
        f"num_classes {c.num_classes}",
        f"split_index {c.split_index}",
        f"seed {c.seed}",
        f"layers {net.num_layers}",
    ]
    for i, (W, b) in enumerate(net.layers):
        lines.append(f"layer {i} weight {W.shape[0]} {W.shape[1]}")
        lines.extend(_fmt(row) for row in W)
        lines.append(f"layer {i} bias {b.shape[0]}")
        lines.append(_fmt(b))
    masks = masks or {}
    lines.append(f"masks {len(masks)}")
    for k in sorted(masks):
        vec = np.asarray(masks[k], dtype=np.float64)
        lines.append(f"mask {int(k)} {vec.shape[0]}")
        lines.append(_fmt(vec))
    return "\n".join(lines) + "\n"


def load_checkpoint(text: str) -> tuple[Network, dict[int, np.ndarray]]:
    it = iter(text.splitlines())

    def field_line(name):
        parts = next(it).split()
        if not parts or parts[0] != name:
            raise ValueError(f"checkpoint: expected {name!r}, got {parts!r}")
        return parts[1:]

    header = next(it).split()
    if len(header) != 2 or header[0] != CHECKPOINT_TAG or header[1] != f"v{CHECKPOINT_VERSION}":
        raise ValueError(f"unsupported checkpoint header {header!r}")
    input_dim = int(field_line("input_dim")[0])
    hidden = tuple(int(h) for h in field_line("hidden_dims"))
    num_classes = int(field_line("num_classes")[0])
    split = int(field_line("split_index")[0])
    seed = int(field_line("seed")[0])
    cfg = ModelConfig(input_dim, num_classes, hidden, split, seed)
    n_layers = int(field_line("layers")[0])
    layers = []
    for i in range(n_layers):
        _, _, r, c = field_line("layer")
        W = np.array([[float(v) for v in next(it).split()] for _ in range(int(r))]).reshape(int(r), int(c))
        field_line("layer")
        b = np.array([float(v) for v in next(it).split()])
        layers.append((W, b))
    masks = {}
    n_masks = int(field_line("masks")[0])
    for _ in range(n_masks):
        k, _ = field_line("mask")
        masks[int(k)] = np.array([float(v) for v in next(it).split()])
    return Network(cfg, tuple(layers)), masks
