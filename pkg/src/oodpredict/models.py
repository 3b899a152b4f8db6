"""Trainable models over flat parameter vectors.

Two architectures are supported: a linear softmax classifier and a small
fully-connected network.  A model is always (architecture, flat vector);
the canonical flat order is, layer by layer from input to output, the
row-major weight matrix followed by the bias vector.  Everything here is
plain numpy and bit-reproducible given seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LabeledDataset

_KINDS = ("linear-softmax", "mlp")
_ACTIVATIONS = ("relu", "tanh")
_PARAMS_MAGIC = "oodpredict-params"
_PARAMS_VERSION = 1

__all__ = [
    "Architecture",
    "ParamVector",
    "TrainConfig",
    "TrainingDivergedError",
    "init_model",
    "train_sgd",
    "predict_logits",
    "predict_class",
    "test_error",
    "param_distance",
    "linearized_features",
    "input_gradients",
    "softmax",
    "save_params",
    "load_params",
]


class TrainingDivergedError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite training loss ({loss}) at step {step}")


@dataclass(frozen=True)
class Architecture:
    """Shape of a model: classifier head dimensions plus hidden stack for MLPs."""

    kind: str
    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}; known: {_KINDS}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be >= 1")
        hidden = tuple(int(h) for h in self.hidden)
        object.__setattr__(self, "hidden", hidden)
        if self.kind == "mlp":
            if not hidden:
                raise ValueError("mlp architectures need at least one hidden layer")
            if any(h < 1 for h in hidden):
                raise ValueError("hidden sizes must be >= 1")
        elif hidden:
            raise ValueError("linear-softmax architectures take no hidden layers")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; known: {_ACTIVATIONS}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.num_classes)

    @property
    def param_count(self) -> int:
        dims = self.layer_dims
        return sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(len(dims) - 1))


@dataclass(frozen=True)
class ParamVector:
    """A model as a flat float64 vector bound to its architecture."""

    arch: Architecture
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ValueError("parameter values must form a flat vector")
        if vals.shape[0] != self.arch.param_count:
            raise ValueError(
                f"expected {self.arch.param_count} parameters, got {vals.shape[0]}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("parameter values contain non-finite entries")
        vals = np.ascontiguousarray(vals)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyperparameters; ``steps`` counts minibatch updates, not epochs."""

    steps: int
    learning_rate: float
    batch_size: int = 32
    momentum: float = 0.0
    schedule: str = "constant"
    loss: str = "cross-entropy"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be 'constant' or 'cosine'")
        if self.loss not in ("cross-entropy", "squared"):
            raise ValueError("loss must be 'cross-entropy' or 'squared'")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


def _unpack(arch: Architecture, values: np.ndarray):
    dims = arch.layer_dims
    layers = []
    offset = 0
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        w = values[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in)
        offset += fan_out * fan_in
        b = values[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def _pack(parts) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in parts])


def _activate(arch: Architecture, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if arch.activation == "relu" else np.tanh(z)


def _activate_deriv(arch: Architecture, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    return (z > 0.0).astype(np.float64) if arch.activation == "relu" else 1.0 - h * h


def _forward(arch: Architecture, layers, x: np.ndarray):
    """Returns (logits, pre-activations, post-activations incl. the input)."""
    pres, posts = [], [x]
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        if i < len(layers) - 1:
            h = _activate(arch, z)
            pres.append(z)
            posts.append(h)
        else:
            return z, pres, posts
    raise AssertionError("unreachable")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting the row maximum."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss_and_delta(logits, labels, loss_kind):
    """Mean batch loss and its gradient with respect to the logits."""
    b = logits.shape[0]
    onehot = np.zeros_like(logits)
    onehot[np.arange(b), labels] = 1.0
    if loss_kind == "cross-entropy":
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
        loss = float(np.mean(lse - logits[np.arange(b), labels]))
        delta = (softmax(logits) - onehot) / b
    else:
        diff = logits - onehot
        loss = float(0.5 * np.sum(diff * diff) / b)
        delta = diff / b
    return loss, delta


def _backprop_params(arch, layers, pres, posts, delta):
    """Parameter gradients (canonical order) from a logit-space gradient."""
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        grads[i] = (delta.T @ posts[i], delta.sum(axis=0))
        if i > 0:
            dh = delta @ layers[i][0]
            delta = dh * _activate_deriv(arch, pres[i - 1], posts[i])
    return _pack(grads)


def init_model(arch: Architecture, seed: int = 0) -> ParamVector:
    """Deterministic initialization: uniform fan-in weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = arch.layer_dims
    parts = []
    for i in range(len(dims) - 1):
        bound = 1.0 / np.sqrt(dims[i])
        w = rng.uniform(-bound, bound, size=(dims[i + 1], dims[i]))
        parts.append((w, np.zeros(dims[i + 1])))
    return ParamVector(arch, _pack(parts))


def _cosine_lr(base_lr: float, step: int, total: int) -> float:
    return base_lr * (1.0 + np.cos(np.pi * step / total)) / 2.0


def train_sgd(start: ParamVector, data: LabeledDataset, cfg: TrainConfig) -> ParamVector:
    """Run exactly ``cfg.steps`` minibatch SGD updates from ``start``.

    Epochs are full shuffles drawn from ``cfg.seed``; the final short batch
    of an epoch is kept.  Momentum is the usual velocity accumulation
    ``v <- momentum * v + g``, ``theta <- theta - lr_t * v``, with the cosine
    schedule (when selected) evaluated per step.
    """
    arch = start.arch
    if data.dim != arch.input_dim:
        raise ValueError(f"data has {data.dim} features but model expects {arch.input_dim}")
    if data.num_classes != arch.num_classes:
        raise ValueError(
            f"data has {data.num_classes} classes but model expects {arch.num_classes}"
        )
    rng = np.random.default_rng(cfg.seed)
    theta = start.values.copy()
    velocity = np.zeros_like(theta)
    x, y = data.features, data.labels

    step = 0
    while step < cfg.steps:
        order = rng.permutation(data.n)
        for pos in range(0, data.n, cfg.batch_size):
            if step >= cfg.steps:
                break
            batch = order[pos : pos + cfg.batch_size]
            layers = _unpack(arch, theta)
            # overflow on a diverging run is reported via the explicit check below
            with np.errstate(over="ignore", invalid="ignore"):
                logits, pres, posts = _forward(arch, layers, x[batch])
                loss, delta = _loss_and_delta(logits, y[batch], cfg.loss)
            if not np.isfinite(loss):
                raise TrainingDivergedError(step, loss)
            grad = _backprop_params(arch, layers, pres, posts, delta)
            lr = (
                cfg.learning_rate
                if cfg.schedule == "constant"
                else _cosine_lr(cfg.learning_rate, step, cfg.steps)
            )
            velocity = cfg.momentum * velocity + grad
            theta = theta - lr * velocity
            step += 1
    return ParamVector(arch, theta)


def predict_logits(theta: ParamVector, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != theta.arch.input_dim:
        raise ValueError(
            f"features must have shape (n, {theta.arch.input_dim}), got {x.shape}"
        )
    logits, _, _ = _forward(theta.arch, _unpack(theta.arch, theta.values), x)
    return logits


def predict_class(theta: ParamVector, x) -> np.ndarray:
    """Argmax class per row; ties resolve to the smallest class index."""
    return np.argmax(predict_logits(theta, x), axis=1).astype(np.int64)


def test_error(theta: ParamVector, data: LabeledDataset) -> float:
    """Fraction of rows the classifier gets wrong."""
    return float(np.mean(predict_class(theta, data.features) != data.labels))


def param_distance(a: ParamVector, b: ParamVector) -> float:
    """Euclidean distance between two models' flat parameter vectors."""
    if a.arch != b.arch:
        raise ValueError("param_distance requires identical architectures")
    return float(np.linalg.norm(a.values - b.values))


def linearized_features(theta0: ParamVector, x, subsample=None, seed: int = 0) -> np.ndarray:
    """Per-example gradient of the mean-logit head at ``theta0``.

    Row j is the gradient of ``g(x_j) = mean_k logit_k(x_j)`` with respect to
    the flat parameter vector, optionally restricted to a seeded random
    coordinate subset of size ``subsample`` (columns are kept in ascending
    coordinate order).  For a linear model with a single output this reduces
    to the input itself plus a constant bias coordinate.
    """
    arch = theta0.arch
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ValueError(f"features must have shape (n, {arch.input_dim}), got {x.shape}")
    layers = _unpack(arch, theta0.values)
    _, pres, posts = _forward(arch, layers, x)
    n = x.shape[0]

    delta = np.full((n, arch.num_classes), 1.0 / arch.num_classes)
    per_layer = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        gw = np.einsum("no,ni->noi", delta, posts[i]).reshape(n, -1)
        per_layer[i] = np.concatenate([gw, delta], axis=1)
        if i > 0:
            dh = delta @ layers[i][0]
            delta = dh * _activate_deriv(arch, pres[i - 1], posts[i])
    full = np.concatenate(per_layer, axis=1)

    if subsample is None or subsample == "all" or subsample == full.shape[1]:
        return full
    if not 1 <= int(subsample) <= full.shape[1]:
        raise ValueError(f"subsample must lie in [1, {full.shape[1]}]")
    idx = np.sort(np.random.default_rng(seed).choice(full.shape[1], int(subsample), replace=False))
    return full[:, idx]


def input_gradients(theta: ParamVector, data: LabeledDataset, loss: str = "cross-entropy") -> np.ndarray:
    """Per-example gradient of the training loss with respect to the inputs."""
    if loss not in ("cross-entropy", "squared"):
        raise ValueError("loss must be 'cross-entropy' or 'squared'")
    arch = theta.arch
    if data.dim != arch.input_dim or data.num_classes > arch.num_classes:
        raise ValueError("dataset is dimensionally inconsistent with the model")
    layers = _unpack(arch, theta.values)
    logits, pres, posts = _forward(arch, layers, data.features)
    onehot = np.zeros_like(logits)
    onehot[np.arange(data.n), data.labels] = 1.0
    delta = (softmax(logits) if loss == "cross-entropy" else logits) - onehot
    for i in range(len(layers) - 1, 0, -1):
        dh = delta @ layers[i][0]
        delta = dh * _activate_deriv(arch, pres[i - 1], posts[i])
    return delta @ layers[0][0]


def save_params(theta: ParamVector, path) -> None:
    """Versioned text serialization; values round-trip exactly."""
    arch = theta.arch
    header = {
        "kind": arch.kind,
        "input_dim": arch.input_dim,
        "num_classes": arch.num_classes,
        "hidden": list(arch.hidden),
        "activation": arch.activation,
    }
    lines = [f"{_PARAMS_MAGIC} {_PARAMS_VERSION}", json.dumps(header, sort_keys=True)]
    lines.extend(repr(float(v)) for v in theta.values)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(path) -> ParamVector:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2:
        raise ValueError(f"{path}: truncated parameter file")
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != _PARAMS_MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    if int(magic[1]) != _PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported format version {magic[1]}")
    header = json.loads(lines[1])
    arch = Architecture(
        kind=header["kind"],
        input_dim=int(header["input_dim"]),
        num_classes=int(header["num_classes"]),
        hidden=tuple(header["hidden"]),
        activation=header["activation"],
    )
    values = np.array([float(tok) for tok in lines[2:] if tok], dtype=np.float64)
    return ParamVector(arch, values)
