"""Dense float64 tensors with reverse-mode differentiation.

Storage is a contiguous row-major numpy array; every op records its parents
and a closure that pushes the output gradient back to them. ``backward``
walks the graph in reverse topological order, so each node is visited once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, NonFiniteError, UsageError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)

        def back(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)
        return Tensor(self.data + other.data, _parents=(self, other), _backward=back)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)

        def back(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)
        return Tensor(self.data - other.data, _parents=(self, other), _backward=back)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)

        def back(g):
            return (_unbroadcast(g * other.data, self.shape),
                    _unbroadcast(g * self.data, other.shape))
        return Tensor(self.data * other.data, _parents=(self, other), _backward=back)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return Tensor(-self.data, _parents=(self,), _backward=lambda g: (-g,))

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = self.data / other.data

        def back(g):
            return (_unbroadcast(g / other.data, self.shape),
                    _unbroadcast(-g * out / other.data, other.shape))
        return Tensor(out, _parents=(self, other), _backward=back)

    def square(self) -> "Tensor":
        x = self.data
        return Tensor(x * x, _parents=(self,), _backward=lambda g: (2.0 * x * g,))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ConfigurationError(
                f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ConfigurationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def back(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        return Tensor(a @ b, _parents=(self, other), _backward=back)

    # shape ops

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor(self.data.reshape(shape), _parents=(self,),
                      _backward=lambda g: (g.reshape(old),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return Tensor(np.swapaxes(self.data, a, b), _parents=(self,),
                      _backward=lambda g: (np.swapaxes(g, a, b),))

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape
        basic = all(isinstance(i, (slice, int, type(Ellipsis)))
                    for i in (idx if isinstance(idx, tuple) else (idx,)))

        def back(g):
            full = np.zeros(shape)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)
        return Tensor(self.data[idx], _parents=(self,), _backward=back)

    # reductions and pointwise

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)
        return Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                      _parents=(self,), _backward=back)

    def mean(self, axis=None) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return Tensor(y, _parents=(self,), _backward=lambda g: (g * (1.0 - y * y),))

    def log_softmax(self, axis: int = -1) -> "Tensor":
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse
        soft = np.exp(out)

        def back(g):
            return (g - soft * g.sum(axis=axis, keepdims=True),)
        return Tensor(out, _parents=(self,), _backward=back)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, name: str | None = None) -> Tensor:
    """Leaf tensor tracked by ``backward``."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))
    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  _parents=tuple(tensors), _backward=back)


def linear_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = W x + b for a vector x (or a batch of row vectors)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ConfigurationError(
            f"linear_forward shape mismatch: x{x.shape}, W{W.shape}, b{b.shape}")
    if x.data.ndim == 1:
        return (x.reshape(1, -1) @ W.T).reshape(-1) + b
    return x @ W.T + b


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. each of ``params``.

    Parameters the loss does not depend on get exact zeros.
    """
    params = list(params)
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            if g is not None:
                grads[id(node)] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape))
    for g in out:
        if not np.isfinite(g).all():
            raise NonFiniteError("gradient is not finite")
    return out


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(e <= self.tol for e in self.max_rel_error.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if e > self.tol]


def grad_check(f: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
               h: float = 1e-5, tol: float = 1e-6, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    The relative error for an entry is ``|a - n| / max(|a|, |n|, 1e-8)``, so
    exact-zero gradients compare as equal. ``max_entries`` samples that many
    coordinates per tensor instead of all of them.
    """
    leaves = {k: param(v, name=k) for k, v in params.items()}
    analytic = dict(zip(leaves, backward(f(leaves), leaves.values())))
    rng = rng or np.random.default_rng(0)
    report = {}
    for k, base in params.items():
        flat = np.array(base, dtype=np.float64).ravel()
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            vals = []
            for step in (h, -h):
                pert = flat.copy()
                pert[i] += step
                trial = {n: Tensor(v) for n, v in params.items()}
                trial[k] = Tensor(pert.reshape(np.shape(base)))
                vals.append(float(f(trial).data))
            numeric = (vals[0] - vals[1]) / (2 * h)
            a = float(analytic[k].ravel()[i])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
        report[k] = worst
    return GradCheckReport(report, tol)


class Adam:
    """Adam over a dict of named float64 arrays, updated in place."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            tmp = np.multiply(g, 1.0 - self.beta1)
            m *= self.beta1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - self.beta2
            v *= self.beta2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp *= 1.0 / np.sqrt(bc2)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / bc1
            params[k] -= tmp

    def copy(self) -> "Adam":
        other = Adam(self.lr, self.beta1, self.beta2, self.eps)
        other.m = {k: a.copy() for k, a in self.m.items()}
        other.v = {k: a.copy() for k, a in self.v.items()}
        other.t = self.t
        return other


class SGD:
    def __init__(self, lr: float = 1e-3):
        self.lr = lr
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for k, g in grads.items():
            params[k] -= self.lr * g

    def copy(self) -> "SGD":
        other = SGD(self.lr)
        other.t = self.t
        return other
