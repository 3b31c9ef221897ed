"""Simulated clients: synthetic task data and local MLP training.

Training runs batch-size-1 Adam on a flat parameter vector with a hand-written
backward pass (the autodiff path in ``mlp_loss`` is kept for verification;
it is far too slow per sample for the benchmark).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, TrainingDivergedError
from .hypernet import ModelSpec, ModelWeights
from .numcore import Tensor

FAMILIES = ("sine", "poly", "radial")
REGRESSION = ("sine", "poly")


@dataclass
class SyntheticTask:
    task_id: str
    family: str
    seed: int
    coefficients: np.ndarray = field(repr=False)
    x_train: np.ndarray = field(repr=False)
    y_train: np.ndarray = field(repr=False)
    x_test: np.ndarray = field(repr=False)
    y_test: np.ndarray = field(repr=False)

    @property
    def classification(self) -> bool:
        return self.family not in REGRESSION


@dataclass
class ClientUpdate:
    client_id: int
    task_id: str
    weights: ModelWeights
    round: int
    local_train_loss: float
    epoch_losses: list[float] = field(default_factory=list)


def _coefficients(family: str, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xC0EF])
    if family == "sine":
        # three (amplitude, wx, wy, phase) terms
        amp = rng.uniform(0.3, 1.0, 3)
        freq = rng.uniform(-2.5, 2.5, (3, 2))
        phase = rng.uniform(0, 2 * np.pi, 3)
        return np.column_stack([amp, freq, phase])
    if family == "poly":
        # 1, x, y, x^2, xy, y^2, x^3, y^3
        return rng.normal(0.0, 0.6, 8)
    if family == "radial":
        return np.concatenate([rng.uniform(-0.4, 0.4, 2), rng.uniform(0.45, 0.75, 1)])
    raise ConfigurationError(f"unknown task family {family!r}; expected one of {FAMILIES}")


def target_function(family: str, coef: np.ndarray, x: np.ndarray) -> np.ndarray:
    if family == "sine":
        amp, freq, phase = coef[:, 0], coef[:, 1:3], coef[:, 3]
        return (amp * np.sin(x @ freq.T + phase)).sum(axis=1, keepdims=True)
    if family == "poly":
        a, b = x[:, 0], x[:, 1]
        feats = np.column_stack([np.ones_like(a), a, b, a * a, a * b, b * b, a ** 3, b ** 3])
        return (feats @ coef)[:, None]
    if family == "radial":
        inside = np.linalg.norm(x - coef[:2], axis=1) < coef[2]
        return inside.astype(np.float64)[:, None]
    raise ConfigurationError(f"unknown task family {family!r}; expected one of {FAMILIES}")


def make_task(family: str, seed: int, n: int = 100, noise: float = 0.0,
              sample_seed: int | None = None, task_id: str | None = None) -> SyntheticTask:
    """Deterministic dataset for one task, split 4:1 into train and test.

    ``seed`` fixes the target function; ``sample_seed`` (default: ``seed``)
    fixes which inputs are drawn, so several clients can hold different
    samples of the same task. Train and test come from separate substreams.
    """
    if family not in FAMILIES:
        raise ConfigurationError(f"unknown task family {family!r}; expected one of {FAMILIES}")
    if n < 2:
        raise ConfigurationError("a task needs at least 2 examples")
    coef = _coefficients(family, seed)
    sample_seed = seed if sample_seed is None else sample_seed
    n_train = int(round(n * 0.8))
    n_train = min(max(n_train, 1), n - 1)
    parts = []
    for stream, count in ((0, n_train), (1, n - n_train)):
        rng = np.random.default_rng([seed, sample_seed, 0xDA7A, stream])
        x = rng.uniform(-1.0, 1.0, (count, 2))
        y = target_function(family, coef, x)
        if family in REGRESSION and noise > 0:
            y = y + noise * rng.standard_normal(y.shape)
        if family == "radial":
            y = y[:, 0].astype(np.int64)
        parts.append((x, y))
    (xtr, ytr), (xte, yte) = parts
    return SyntheticTask(task_id or f"{family}-{seed}", family, seed, coef, xtr, ytr, xte, yte)


# flat-vector MLP

def _layout(spec: ModelSpec) -> list[tuple[slice, slice, tuple[int, int]]]:
    out, pos = [], 0
    for l in spec.layers:
        w = slice(pos, pos + l.n_in * l.n_out)
        pos += l.n_in * l.n_out
        out.append((w, slice(pos, pos + l.n_out), (l.n_out, l.n_in)))
        pos += l.n_out
    return out


def _views(theta: np.ndarray, spec: ModelSpec):
    return [(theta[w].reshape(shape), theta[b], l.activation)
            for (w, b, shape), l in zip(_layout(spec), spec.layers)]


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(x)
    if name == "identity":
        return x
    raise ConfigurationError(f"unsupported activation {name!r}")


def forward(weights: ModelWeights | np.ndarray, spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Model outputs for a batch ``x`` of shape ``(n, n_in)``."""
    theta = weights.flatten() if isinstance(weights, ModelWeights) else weights
    h = x
    for K, b, act in _views(theta, spec):
        h = _act(act, h @ K.T + b)
    return h


def _per_example_loss(out: np.ndarray, y: np.ndarray, classification: bool) -> np.ndarray:
    if classification:
        shifted = out - out.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return -logp[np.arange(len(y)), y]
    return ((out - y) ** 2).mean(axis=1)


def dataset_loss(theta: np.ndarray, spec: ModelSpec, x: np.ndarray, y: np.ndarray,
                 classification: bool) -> float:
    return float(_per_example_loss(forward(theta, spec, x), y, classification).mean())


def _sample_grad(theta: np.ndarray, views, x: np.ndarray, y, classification: bool,
                 grad: np.ndarray, layout) -> float:
    acts = [x]
    h = x
    for K, b, act in views:
        h = _act(act, K @ h + b)
        acts.append(h)
    out = acts[-1]
    if classification:
        e = np.exp(out - out.max())
        p = e / e.sum()
        loss = -np.log(p[y])
        delta = p
        delta[y] -= 1.0
    else:
        diff = out - y
        loss = float(diff @ diff) / diff.size
        delta = (2.0 / diff.size) * diff
    for i in range(len(views) - 1, -1, -1):
        K, _, act = views[i]
        if act == "tanh":
            delta = delta * (1.0 - acts[i + 1] ** 2)
        w, b, shape = layout[i]
        grad[w] = np.outer(delta, acts[i]).ravel()
        grad[b] = delta
        if i:
            delta = K.T @ delta
    return loss


def mlp_loss(params: dict[str, Tensor], spec: ModelSpec, x: np.ndarray, y: np.ndarray,
             classification: bool) -> Tensor:
    """Mean dataset loss through the autodiff engine; keys ``K1, b1, K2, ...``."""
    h = Tensor(x)
    for j, l in enumerate(spec.layers, start=1):
        h = h @ params[f"K{j}"].T + params[f"b{j}"]
        if l.activation == "tanh":
            h = h.tanh()
    if classification:
        onehot = np.zeros((len(y), spec.layers[-1].n_out))
        onehot[np.arange(len(y)), y] = 1.0
        return -(h.log_softmax() * onehot).sum() * (1.0 / len(y))
    return (h - y).square().mean()


def local_train(init: ModelWeights, task: SyntheticTask, spec: ModelSpec, epochs: int = 5,
                lr: float = 1e-3, seed: int = 0, client_id: int = 0, round: int = 0,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ClientUpdate:
    """``epochs`` passes of batch-size-1 Adam over the task's training split.

    The shuffle order comes from an RNG keyed by ``(seed, client_id, round)``.
    ``local_train_loss`` is the full training-set loss of the returned weights.
    """
    init.check(spec)
    if epochs < 0:
        raise ConfigurationError("epochs must be non-negative")
    theta = init.flatten()
    cls = task.classification
    xs, ys = task.x_train, task.y_train
    epoch_losses = []
    if epochs > 0 and lr != 0:
        rng = np.random.default_rng([seed, client_id, round, 0x7EA1])
        layout = _layout(spec)
        views = _views(theta, spec)
        grad = np.zeros_like(theta)
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        t = 0
        for _ in range(epochs):
            for i in rng.permutation(len(xs)):
                loss = _sample_grad(theta, views, xs[i], ys[i], cls, grad, layout)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"client {client_id} diverged on task {task.task_id} in round {round}")
                t += 1
                m *= beta1
                m += (1 - beta1) * grad
                v *= beta2
                v += (1 - beta2) * grad * grad
                theta -= (lr / (1 - beta1 ** t)) * m / (np.sqrt(v / (1 - beta2 ** t)) + eps)
            epoch_losses.append(dataset_loss(theta, spec, xs, ys, cls))
    final = dataset_loss(theta, spec, xs, ys, cls)
    if not np.isfinite(final):
        raise TrainingDivergedError(f"client {client_id} produced a non-finite loss")
    return ClientUpdate(client_id, task.task_id, ModelWeights.from_flat(theta, spec), round,
                        final, epoch_losses)


@dataclass
class Evaluation:
    loss: float
    accuracy: float | None = None


def evaluate(weights: ModelWeights | np.ndarray, task: SyntheticTask,
             spec: ModelSpec) -> Evaluation:
    theta = weights.flatten() if isinstance(weights, ModelWeights) else weights
    out = forward(theta, spec, task.x_test)
    loss = float(_per_example_loss(out, task.y_test, task.classification).mean())
    acc = float((out.argmax(axis=1) == task.y_test).mean()) if task.classification else None
    return Evaluation(loss, acc)


def random_init(spec: ModelSpec, rng: np.random.Generator) -> ModelWeights:
    """Uniform(-1/sqrt(n_in), 1/sqrt(n_in)) weights, zero biases."""
    layers = []
    for l in spec.layers:
        bound = 1.0 / np.sqrt(l.n_in)
        layers.append((rng.uniform(-bound, bound, (l.n_out, l.n_in)), np.zeros(l.n_out)))
    return ModelWeights(layers)
