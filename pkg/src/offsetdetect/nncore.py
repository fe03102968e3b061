"""Minimal deterministic dense-network core.

Plain-numpy MLPs (ReLU hidden layers, identity output) with exact
analytic gradients for the three losses the detector needs, plus SGD and
Adam steps that can run in either direction (descent or ascent).
Everything is float64 and driven by explicit seeded generators so that
identical seeds reproduce identical parameters bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Shape mismatch between model and data."""


class NumericError(FloatingPointError):
    """Non-finite values where finite ones are required."""


def make_rng(seed, *stream) -> np.random.Generator:
    """Seeded generator; extra integers select independent substreams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


@dataclass
class MlpModel:
    """Fully-connected ReLU network. weights[i] has shape (fan_in, fan_out)."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "MlpModel":
        return MlpModel(list(self.layer_dims),
                        [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])


def init_mlp(layer_dims, rng: np.random.Generator) -> MlpModel:
    """He-initialised MLP with zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise DimensionError("need at least input and output dims")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(dims, weights, biases)


def forward(model: MlpModel, batch: np.ndarray):
    """Forward pass. Returns (logits, cache); cache feeds backward()."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise DimensionError(
            f"batch has shape {batch.shape}, model expects (*, {model.input_dim})")
    acts = [batch]
    h = batch
    last = model.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return h, acts


def penultimate_features(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    """Last hidden-layer activations (the embedding the mapper consumes)."""
    if model.n_layers < 2:
        raise DimensionError("single-layer model has no hidden layer")
    _, acts = forward(model, batch)
    return acts[-2]


def loss_var(logits: np.ndarray):
    """Per-row logit variance and its gradient.

    value_i = mean_j (f_ij - mean_j f_ij)^2, grad = (2/k)(f - mean).
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    k = logits.shape[1]
    dev = logits - logits.mean(axis=1, keepdims=True)
    return (dev * dev).mean(axis=1), (2.0 / k) * dev


def loss_ce(logits: np.ndarray, labels):
    """Per-row softmax cross-entropy and its gradient (log-sum-exp stabilised)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label outside [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(logits.shape[0])
    losses = lse - z[rows, labels]
    grad = np.exp(z - lse[:, None])
    grad[rows, labels] -= 1.0
    return losses, grad


def sigmoid(scores: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    scores = np.asarray(scores, dtype=np.float64)
    out = np.empty_like(scores)
    pos = scores >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-scores[pos]))
    e = np.exp(scores[np.logical_not(pos)])
    out[np.logical_not(pos)] = e / (1.0 + e)
    return out


def loss_bce(predictions: np.ndarray, targets):
    """Binary cross-entropy of sigmoid outputs against {0,1} targets.

    Returns per-element loss and the gradient with respect to the
    pre-sigmoid score, which is simply prediction - target.
    """
    q = np.clip(np.asarray(predictions, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    p = np.asarray(targets, dtype=np.float64)
    losses = -(p * np.log(q) + (1.0 - p) * np.log(1.0 - q))
    return losses, q - p


def backward(model: MlpModel, cache, grad_logits: np.ndarray):
    """Backprop per-row logit gradients; batch-mean parameter reduction.

    Returns (weight_grads, bias_grads, input_grads). input_grads are
    per row (not averaged) so callers can perturb individual samples.
    """
    grad_logits = np.atleast_2d(np.asarray(grad_logits, dtype=np.float64))
    if cache[-1].shape != grad_logits.shape:
        raise DimensionError("gradient shape does not match cached logits")
    n = cache[0].shape[0]
    w_grads = [None] * model.n_layers
    b_grads = [None] * model.n_layers
    d = grad_logits / n
    for i in reversed(range(model.n_layers)):
        w_grads[i] = cache[i].T @ d
        b_grads[i] = d.sum(axis=0)
        d = d @ model.weights[i].T
        if i > 0:
            d *= cache[i] > 0
    return w_grads, b_grads, d * n


@dataclass
class OptimizerState:
    """SGD or Adam state for one model. Adam uses beta1=0.9, beta2=0.999."""

    kind: str = "adam"
    step_size: float = 1e-3
    step_count: int = 0
    m_w: list = field(default_factory=list)
    v_w: list = field(default_factory=list)
    m_b: list = field(default_factory=list)
    v_b: list = field(default_factory=list)

    def _ensure_moments(self, model: MlpModel):
        if not self.m_w:
            self.m_w = [np.zeros_like(w) for w in model.weights]
            self.v_w = [np.zeros_like(w) for w in model.weights]
            self.m_b = [np.zeros_like(b) for b in model.biases]
            self.v_b = [np.zeros_like(b) for b in model.biases]


def optimizer_step(model: MlpModel, state: OptimizerState, w_grads, b_grads,
                   direction: str = "descend", freeze_below: int = 0):
    """Apply one update in place. direction is "descend" or "ascend".

    freeze_below skips layers with index < freeze_below (used by ft_last).
    """
    if direction not in ("descend", "ascend"):
        raise ValueError(f"unknown direction {direction!r}")
    sign = -1.0 if direction == "descend" else 1.0
    for i, g in enumerate(w_grads):
        if not np.all(np.isfinite(g)) or not np.all(np.isfinite(b_grads[i])):
            raise NumericError(f"non-finite gradient in layer {i}")
    lr = state.step_size
    if state.kind == "sgd":
        for i in range(model.n_layers):
            if i < freeze_below:
                continue
            model.weights[i] += sign * lr * w_grads[i]
            model.biases[i] += sign * lr * b_grads[i]
        return model
    if state.kind != "adam":
        raise ValueError(f"unknown optimizer kind {state.kind!r}")
    state._ensure_moments(model)
    state.step_count += 1
    b1, b2, eps = 0.9, 0.999, 1e-8
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for i in range(model.n_layers):
        state.m_w[i] = b1 * state.m_w[i] + (1 - b1) * w_grads[i]
        state.v_w[i] = b2 * state.v_w[i] + (1 - b2) * w_grads[i] ** 2
        state.m_b[i] = b1 * state.m_b[i] + (1 - b1) * b_grads[i]
        state.v_b[i] = b2 * state.v_b[i] + (1 - b2) * b_grads[i] ** 2
        if i < freeze_below:
            continue
        model.weights[i] += sign * lr * (state.m_w[i] / c1) / (np.sqrt(state.v_w[i] / c2) + eps)
        model.biases[i] += sign * lr * (state.m_b[i] / c1) / (np.sqrt(state.v_b[i] / c2) + eps)
    return model


def _ce_epochs(model, features, labels, epochs, batch_size, state, rng, freeze_below=0):
    n = features.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, cache = forward(model, features[idx])
            _, grad = loss_ce(logits, labels[idx])
            w_grads, b_grads, _ = backward(model, cache, grad)
            optimizer_step(model, state, w_grads, b_grads, "descend", freeze_below)
    return model


def train_supervised(model: MlpModel, features, labels, epochs: int,
                     batch_size: int, rng: np.random.Generator,
                     step_size: float = 1e-3, optimizer: str = "adam") -> MlpModel:
    """Shuffled mini-batch cross-entropy training; deterministic per rng."""
    if labels is None:
        raise ValueError("supervised training needs labels")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    state = OptimizerState(kind=optimizer, step_size=step_size)
    return _ce_epochs(model, features, labels, int(epochs), int(batch_size), state, rng)


def fine_tune(pretrained: MlpModel, features, labels, mode: str, epochs: int,
              batch_size: int, rng: np.random.Generator,
              step_size: float = 1e-3, optimizer: str = "adam") -> MlpModel:
    """Fine-tune a copy of the model. ft_last freezes all but the final layer."""
    if mode not in ("ft_all", "ft_last"):
        raise ValueError(f"unknown fine-tune mode {mode!r}")
    if labels is None:
        raise ValueError("fine-tuning needs labels")
    labels = np.asarray(labels)
    model = pretrained.copy()
    if labels.size and labels.max() >= model.output_dim:
        raise DimensionError("label index exceeds model output dim")
    freeze = model.n_layers - 1 if mode == "ft_last" else 0
    state = OptimizerState(kind=optimizer, step_size=step_size)
    features = np.asarray(features, dtype=np.float64)
    return _ce_epochs(model, features, labels, int(epochs), int(batch_size),
                      state, rng, freeze_below=freeze)


def predict_classes(model: MlpModel, features) -> np.ndarray:
    """Argmax predictions; ties resolve to the lowest class index."""
    logits, _ = forward(model, features)
    return logits.argmax(axis=1)


def accuracy(model: MlpModel, features, labels) -> float:
    return float((predict_classes(model, features) == np.asarray(labels)).mean())
