"""Dense softmax-regression / one-hidden-layer MLP with exact backprop.

Parameters live in one flat float64 vector. Layout, in order:

    hidden_dim == 0:  W (input_dim x num_classes), b (num_classes)
    hidden_dim  > 0:  W1 (input_dim x hidden), b1 (hidden),
                      W2 (hidden x num_classes), b2 (num_classes)

Matrices are stored row-major. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dim: int
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if self.hidden_dim < 0:
            raise ValueError(f"hidden_dim must be >= 0, got {self.hidden_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_shapes(self) -> list[tuple[int, ...]]:
        if self.hidden_dim == 0:
            return [(self.input_dim, self.num_classes), (self.num_classes,)]
        return [
            (self.input_dim, self.hidden_dim),
            (self.hidden_dim,),
            (self.hidden_dim, self.num_classes),
            (self.num_classes,),
        ]

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.layer_shapes)


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector stamped with the server's logical clock."""

    values: np.ndarray
    spec: ModelSpec
    clock: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (self.spec.num_params,):
            raise ValueError(
                f"expected {self.spec.num_params} parameters, got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("parameters must be finite")
        if self.clock < 0:
            raise ValueError("clock must be non-negative")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def unpack(self) -> list[np.ndarray]:
        return unpack(self.values, self.spec)


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("features must be a non-empty n x d matrix")
        if y.shape != (x.shape[0],):
            raise ValueError("labels must have one entry per row")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self) -> int:
        return self.features.shape[0]


def unpack(values: np.ndarray, spec: ModelSpec) -> list[np.ndarray]:
    out, start = [], 0
    for shape in spec.layer_shapes:
        size = int(np.prod(shape))
        out.append(values[start:start + size].reshape(shape))
        start += size
    return out


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, clock 0."""
    rng = np.random.default_rng(seed)
    chunks = []
    for shape in spec.layer_shapes:
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            chunks.append(rng.uniform(-bound, bound, size=shape).ravel())
        else:
            chunks.append(np.zeros(shape))
    return ModelParams(np.concatenate(chunks), spec, clock=0)


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    if batch.features.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch has {batch.features.shape[1]} features, model expects {spec.input_dim}"
        )
    if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
        raise ValueError("label index out of range")


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: np.ndarray, h: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - h * h


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logits(params: ModelParams, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    spec = params.spec
    if spec.hidden_dim == 0:
        w, b = params.unpack()
        return x @ w + b
    w1, b1, w2, b2 = params.unpack()
    h = _activate(x @ w1 + b1, spec.activation)
    return h @ w2 + b2


def predict(params: ModelParams, features: np.ndarray) -> np.ndarray:
    return np.argmax(logits(params, features), axis=1)


def loss(params: ModelParams, batch: Batch) -> float:
    """Mean cross-entropy of the softmax output over the batch."""
    _check_batch(params.spec, batch)
    logp = _log_softmax(logits(params, batch.features))
    picked = logp[np.arange(len(batch)), batch.labels]
    return float(-picked.sum() / len(batch))


def gradient(params: ModelParams, batch: Batch) -> np.ndarray:
    """Exact gradient of `loss` (mean over the batch) as a flat vector."""
    spec = params.spec
    _check_batch(spec, batch)
    x, n = batch.features, len(batch)
    onehot = np.zeros((n, spec.num_classes))
    onehot[np.arange(n), batch.labels] = 1.0

    if spec.hidden_dim == 0:
        w, b = params.unpack()
        probs = np.exp(_log_softmax(x @ w + b))
        delta = (probs - onehot) / n
        return np.concatenate([(x.T @ delta).ravel(), delta.sum(axis=0)])

    w1, b1, w2, b2 = params.unpack()
    z = x @ w1 + b1
    h = _activate(z, spec.activation)
    probs = np.exp(_log_softmax(h @ w2 + b2))
    delta_out = (probs - onehot) / n
    grad_w2 = h.T @ delta_out
    grad_b2 = delta_out.sum(axis=0)
    delta_hidden = (delta_out @ w2.T) * _activate_grad(z, h, spec.activation)
    grad_w1 = x.T @ delta_hidden
    grad_b1 = delta_hidden.sum(axis=0)
    return np.concatenate(
        [grad_w1.ravel(), grad_b1, grad_w2.ravel(), grad_b2]
    )


def apply_step(params: ModelParams, direction: np.ndarray, scale: float) -> ModelParams:
    """values - scale * direction, with the clock advanced by one."""
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != params.values.shape:
        raise ValueError(
            f"direction has shape {direction.shape}, params {params.values.shape}"
        )
    if not np.isfinite(scale):
        raise ValueError(f"scale must be finite, got {scale}")
    return ModelParams(params.values - scale * direction, params.spec, params.clock + 1)


def numeric_gradient(params: ModelParams, batch: Batch, step: float) -> np.ndarray:
    values = np.array(params.values)
    grad = np.empty_like(values)
    for i in range(values.size):
        orig = values[i]
        values[i] = orig + step
        up = loss(ModelParams(values, params.spec), batch)
        values[i] = orig - step
        down = loss(ModelParams(values, params.spec), batch)
        values[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """max_i |a_i - n_i| / max(|n_i|, floor).

    The floor keeps components whose true gradient is ~0 from turning
    round-off into huge ratios.
    """
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_diff_check(params: ModelParams, batch: Batch, step: float) -> float:
    if step <= 0:
        raise ValueError("step must be positive")
    return relative_error(gradient(params, batch), numeric_gradient(params, batch, step))


def accuracy(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(params, features) == np.asarray(labels)))


def per_class_recall(
    params: ModelParams, features: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Recall per class; NaN for classes absent from `labels`."""
    labels = np.asarray(labels)
    pred = predict(params, features)
    k = params.spec.num_classes
    hits = np.bincount(labels[pred == labels], minlength=k).astype(np.float64)
    support = np.bincount(labels, minlength=k).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, hits / support, np.nan)
