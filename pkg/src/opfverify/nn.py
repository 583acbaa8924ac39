"""Feedforward ReLU proxy with output clipping, L1 training loss, backprop and Adam.

The clip ``min(max(z, lo), hi)`` is expanded into two extra ReLU layers,

    z1 = relu(W_out h + b_out - lo)
    z2 = relu(-z1 + (hi - lo))
    out = hi - z2

so every consumer (bounds, MILP encoding, attacks) sees one uniform list of
affine+ReLU layers followed by a final affine map.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyBatch, EmptySplit, ShapeMismatch


@dataclass
class MlpModel:
    weights: list  # (out, in) per trainable layer, hidden layers then output layer
    biases: list
    clip_lo: np.ndarray
    clip_hi: np.ndarray
    seed: int = 0
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float).ravel() for b in self.biases]
        self.clip_lo = np.asarray(self.clip_lo, dtype=float).ravel()
        self.clip_hi = np.asarray(self.clip_hi, dtype=float).ravel()
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need matching, nonempty weight and bias lists")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[0] != b.size:
                raise ShapeMismatch(f"layer {k}: weight {w.shape} vs bias {b.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeMismatch(f"layer {k}: input width {w.shape[1]} != {self.weights[k - 1].shape[0]}")
        if self.clip_lo.size != self.n_output or self.clip_hi.size != self.n_output:
            raise ShapeMismatch("clip limits must match the output width")
        if not (np.all(np.isfinite(self.clip_lo)) and np.all(np.isfinite(self.clip_hi))):
            raise ShapeMismatch("clip limits must be finite")
        if np.any(self.clip_lo > self.clip_hi):
            raise ShapeMismatch("clip lower limit above upper limit")

    @property
    def n_input(self):
        return self.weights[0].shape[1]

    @property
    def n_output(self):
        return self.weights[-1].shape[0]

    @property
    def hidden(self):
        return [w.shape[0] for w in self.weights[:-1]]

    def relu_layers(self):
        """Affine maps feeding each ReLU layer, the two clip layers included."""
        lo, hi = self.clip_lo, self.clip_hi
        eye = np.eye(self.n_output)
        layers = list(zip(self.weights[:-1], self.biases[:-1]))
        layers.append((self.weights[-1], self.biases[-1] - lo))
        layers.append((-eye, hi - lo))
        return layers

    def final_affine(self):
        return -np.eye(self.n_output), self.clip_hi.copy()

    def copy(self):
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.clip_lo.copy(), self.clip_hi.copy(), self.seed, dict(self.train_meta))


def init_model(n_input, hidden, n_output, clip_lo, clip_hi, seed=0):
    rng = np.random.default_rng(seed)
    sizes = [n_input, *hidden, n_output]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, clip_lo, clip_hi, seed)


@dataclass
class ForwardTrace:
    pre: list   # pre-activations per ReLU layer, shape (batch, width)
    post: list


def forward(model, pd):
    """Return ``(prediction, trace)``; ``pd`` may be one vector or a batch of rows."""
    x = np.asarray(pd, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.n_input:
        raise ShapeMismatch(f"expected {model.n_input} inputs, got {X.shape[1]}")
    pre, post = [], []
    h = X
    for w, b in model.relu_layers():
        z_hat = h @ w.T + b
        h = np.maximum(z_hat, 0.0)
        pre.append(z_hat)
        post.append(h)
    w, b = model.final_affine()
    out = h @ w.T + b
    # identity in exact arithmetic; removes the last-ulp overshoot of hi - (hi - lo)
    out = np.clip(out, model.clip_lo, model.clip_hi)
    if single:
        return out[0], ForwardTrace([p[0] for p in pre], [p[0] for p in post])
    return out, ForwardTrace(pre, post)


def predict(model, pd):
    return forward(model, pd)[0]


def loss_l0(predictions, labels):
    """Mean over samples of the L1 distance between prediction and label."""
    P = np.atleast_2d(np.asarray(predictions, dtype=float))
    Y = np.atleast_2d(np.asarray(labels, dtype=float))
    if P.shape != Y.shape:
        raise ShapeMismatch(f"predictions {P.shape} vs labels {Y.shape}")
    if P.shape[0] == 0:
        raise EmptyBatch("loss of an empty batch")
    return float(np.abs(Y - P).sum(axis=1).mean())


def backprop(model, X, trace, grad_out):
    """Push ``d loss / d output`` (batch rows) back through the expanded network.

    Returns per-ReLU-layer ``(dW, db)`` summed over the batch plus the input
    gradient rows.  ReLU and clip kinks get derivative 0.
    """
    w_final, _ = model.final_affine()
    g = grad_out @ w_final
    layers = model.relu_layers()
    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        g = g * (trace.pre[k] > 0)
        below = trace.post[k - 1] if k else X
        grads[k] = (g.T @ below, g.sum(axis=0))
        g = g @ layers[k][0]
    return grads, g


def backward(model, X, Y):
    """Gradient of ``loss_l0`` with respect to the trainable weights and biases."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] == 0:
        raise EmptyBatch("gradient of an empty batch")
    if X.shape[0] != Y.shape[0] or Y.shape[1] != model.n_output:
        raise ShapeMismatch(f"inputs {X.shape} vs labels {Y.shape}")
    out, trace = forward(model, X)
    grad_out = np.sign(out - Y) / X.shape[0]
    grads, _ = backprop(model, X, trace, grad_out)
    # the first clip layer carries the output layer's weights; the second has none
    return [gw for gw, _ in grads[:-1]], [gb for _, gb in grads[:-1]]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 1000
    patience: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, config):
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params.append(p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


def train(model, dataset, config=None):
    """Adam on ``loss_l0`` with early stopping on the validation split.

    Returns the parameters with the best validation loss and a history dict.
    """
    config = config or TrainConfig()
    X_tr, Y_tr = dataset.part("train")
    X_va, Y_va = dataset.part("val")
    if len(X_tr) == 0 or len(X_va) == 0:
        raise EmptySplit("training needs nonempty train and val splits")
    rng = np.random.default_rng(config.seed)
    model = model.copy()
    n_layers = len(model.weights)
    params = model.weights + model.biases
    state = AdamState.zeros_like(params)

    def val_loss():
        return loss_l0(predict(model, X_va), Y_va)

    best_val = val_loss()
    best = model.copy()
    history = {"train": [loss_l0(predict(model, X_tr), Y_tr)], "val": [best_val]}
    stale = 0
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(X_tr))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            gw, gb = backward(model, X_tr[idx], Y_tr[idx])
            params, state = adam_step(params, gw + gb, state, config)
            model.weights, model.biases = params[:n_layers], params[n_layers:]
        v = val_loss()
        history["train"].append(loss_l0(predict(model, X_tr), Y_tr))
        history["val"].append(v)
        if v < best_val:
            best_val, best, stale = v, model.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    best.train_meta = {"epochs": epoch, "best_val_l0": best_val, "learning_rate": config.learning_rate,
                       "batch_size": config.batch_size, "patience": config.patience, "seed": config.seed}
    return best, history


def model_to_document(model):
    return {
        "arch": {"input": model.n_input, "hidden": model.hidden, "output": model.n_output},
        "clip": {"lo": model.clip_lo.tolist(), "hi": model.clip_hi.tolist()},
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(model.weights, model.biases)],
        "seed": model.seed,
        "train_meta": model.train_meta,
    }


def model_from_document(doc):
    model = MlpModel([layer["w"] for layer in doc["layers"]], [layer["b"] for layer in doc["layers"]],
                     doc["clip"]["lo"], doc["clip"]["hi"], doc.get("seed", 0), doc.get("train_meta", {}))
    arch = doc.get("arch")
    if arch and (arch["input"] != model.n_input or list(arch["hidden"]) != model.hidden
                 or arch["output"] != model.n_output):
        raise ShapeMismatch("arch header does not match the stored layers")
    return model


def save_model(model, path):
    Path(path).write_text(json.dumps(model_to_document(model), indent=1) + "\n")


def load_model(path):
    return model_from_document(json.loads(Path(path).read_text()))
