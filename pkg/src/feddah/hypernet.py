"""Task-conditioned hypernetwork that emits every layer of a dense client model.

Each target layer j has its own generator: ``n_in + 1`` chunk heads map the
current context to hidden vectors, a shared output projection turns each
hidden vector into one column of the weight matrix (the last chunk is the
bias), and an affine encoder compresses the finished layer into an
``n_z``-vector that is appended to the context for layer j + 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, RegistrationError
from .numcore import Tensor, as_tensor, concat

HEAD_W, HEAD_B, OUT_W, OUT_B, ENC_W, ENC_B = (
    "head_w", "head_b", "out_w", "out_b", "enc_w", "enc_b")


@dataclass(frozen=True)
class LayerSpec:
    n_in: int
    n_out: int
    activation: str = "tanh"

    @property
    def n_params(self) -> int:
        return self.n_in * self.n_out + self.n_out


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("model spec needs at least one layer")
        for j, (a, b) in enumerate(zip(self.layers, self.layers[1:]), start=1):
            if a.n_out != b.n_in:
                raise ConfigurationError(
                    f"layer {j} emits {a.n_out} features but layer {j + 1} expects {b.n_in}")

    @classmethod
    def mlp(cls, sizes: Sequence[int], hidden_activation: str = "tanh") -> "ModelSpec":
        """``mlp([2, 32, 32, 1])``: tanh hidden layers, identity output."""
        n = len(sizes) - 1
        return cls(tuple(
            LayerSpec(sizes[i], sizes[i + 1], hidden_activation if i < n - 1 else "identity")
            for i in range(n)))

    @property
    def param_count(self) -> int:
        return sum(l.n_params for l in self.layers)

    def sizes(self) -> list[int]:
        return [self.layers[0].n_in] + [l.n_out for l in self.layers]


@dataclass
class ModelWeights:
    """Per-layer ``(K, bias)`` pairs; ``K`` has shape ``(n_out, n_in)``."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([K.ravel(), b]) for K, b in self.layers])

    @classmethod
    def from_flat(cls, flat: np.ndarray, spec: ModelSpec) -> "ModelWeights":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != spec.param_count:
            raise ConfigurationError(
                f"flat vector has {flat.size} entries, spec needs {spec.param_count}")
        out, pos = [], 0
        for l in spec.layers:
            K = flat[pos:pos + l.n_in * l.n_out].reshape(l.n_out, l.n_in).copy()
            pos += l.n_in * l.n_out
            out.append((K, flat[pos:pos + l.n_out].copy()))
            pos += l.n_out
        return cls(out)

    def matches(self, spec: ModelSpec) -> bool:
        return len(self.layers) == len(spec.layers) and all(
            K.shape == (l.n_out, l.n_in) and b.shape == (l.n_out,)
            for (K, b), l in zip(self.layers, spec.layers))

    def check(self, spec: ModelSpec) -> None:
        if not self.matches(spec):
            got = [(K.shape, b.shape) for K, b in self.layers]
            raise ConfigurationError(f"weights {got} do not match spec {spec.sizes()}")
        if not np.isfinite(self.flatten()).all():
            raise ConfigurationError("model weights contain non-finite values")

    def copy(self) -> "ModelWeights":
        return ModelWeights([(K.copy(), b.copy()) for K, b in self.layers])

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ModelWeights":
        return cls([(np.zeros((l.n_out, l.n_in)), np.zeros(l.n_out)) for l in spec.layers])


# task identities

@dataclass(frozen=True)
class TaskIdentity:
    task_id: str
    index: int
    z: np.ndarray = field(repr=False)
    mu: float
    sigma: float


class TaskRegistry:
    """Assigns each task a frozen identity vector ``z ~ N(mu_spacing * k, sigma^2 I)``.

    ``k`` is the registration order. The draw for index ``k`` depends only on
    ``(seed, k)``, so replaying the same registrations gives identical vectors.
    """

    def __init__(self, n_z: int = 32, seed: int = 0, mu_spacing: float = 2.0,
                 sigma: float = 0.5):
        if n_z < 1:
            raise ConfigurationError("n_z must be positive")
        self.n_z, self.seed = n_z, seed
        self.mu_spacing, self.sigma = mu_spacing, sigma
        self._by_id: dict[str, TaskIdentity] = {}

    def register(self, task_id: str) -> TaskIdentity:
        if task_id in self._by_id:
            raise RegistrationError(f"task {task_id!r} is already registered")
        k = len(self._by_id)
        mu = self.mu_spacing * k
        rng = np.random.default_rng([self.seed, 0x1D, k])
        z = mu + self.sigma * rng.standard_normal(self.n_z)
        z.setflags(write=False)
        ident = TaskIdentity(task_id, k, z, mu, self.sigma)
        self._by_id[task_id] = ident
        return ident

    def restore(self, ident: TaskIdentity) -> None:
        if ident.task_id in self._by_id:
            raise RegistrationError(f"task {ident.task_id!r} is already registered")
        self._by_id[ident.task_id] = ident

    def truncate(self, n: int) -> None:
        """Forget every identity registered after the first ``n``."""
        self._by_id = {k: v for k, v in self._by_id.items() if v.index < n}

    def __contains__(self, task_id: str) -> bool:
        return task_id in self._by_id

    def __getitem__(self, task_id: str) -> TaskIdentity:
        try:
            return self._by_id[task_id]
        except KeyError:
            raise RegistrationError(f"task {task_id!r} is not registered") from None

    def __iter__(self) -> Iterator[TaskIdentity]:
        return iter(sorted(self._by_id.values(), key=lambda t: t.index))

    def __len__(self) -> int:
        return len(self._by_id)

    def task_ids(self) -> list[str]:
        return [t.task_id for t in self]


def register_task(registry: TaskRegistry, task_id: str) -> TaskIdentity:
    return registry.register(task_id)


# hypernetwork parameters

def context_size(j: int, n_z: int) -> int:
    """Context width for 1-based layer ``j``: identity plus ``j - 1`` summaries."""
    return n_z * j


def hypernet_param_count(spec: ModelSpec, n_z: int, d: int) -> int:
    if n_z < 1 or d < 1:
        raise ConfigurationError(f"n_z and d must be positive (got n_z={n_z}, d={d})")
    total = 0
    for j, l in enumerate(spec.layers, start=1):
        chunks = l.n_in + 1
        total += chunks * (d * context_size(j, n_z) + d)
        total += l.n_out * d + l.n_out
        total += n_z * l.n_params + n_z
    return total


def tensor_name(j: int, kind: str) -> str:
    return f"layer{j}.{kind}"


class HyperParams:
    """Named float64 arrays of the generator, keyed like ``layer2.head_w``."""

    def __init__(self, spec: ModelSpec, n_z: int, d: int,
                 tensors: dict[str, np.ndarray] | None = None):
        if n_z < 1 or d < 1:
            raise ConfigurationError(f"n_z and d must be positive (got n_z={n_z}, d={d})")
        self.spec, self.n_z, self.d = spec, n_z, d
        self.tensors = tensors if tensors is not None else self._zeros()
        for name, shape in self.shapes().items():
            if self.tensors[name].shape != shape:
                raise ConfigurationError(
                    f"{name} has shape {self.tensors[name].shape}, expected {shape}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for j, l in enumerate(self.spec.layers, start=1):
            ctx, chunks = context_size(j, self.n_z), l.n_in + 1
            out[tensor_name(j, HEAD_W)] = (chunks, self.d, ctx)
            out[tensor_name(j, HEAD_B)] = (chunks, self.d)
            out[tensor_name(j, OUT_W)] = (l.n_out, self.d)
            out[tensor_name(j, OUT_B)] = (l.n_out,)
            out[tensor_name(j, ENC_W)] = (self.n_z, l.n_params)
            out[tensor_name(j, ENC_B)] = (self.n_z,)
        return out

    def _zeros(self) -> dict[str, np.ndarray]:
        return {k: np.zeros(s) for k, s in self.shapes().items()}

    @classmethod
    def init(cls, spec: ModelSpec, n_z: int, d: int,
             rng: np.random.Generator) -> "HyperParams":
        """Heads ~ N(0, 1/ctx_j), output projections ~ N(0, 1/d), rest zero."""
        hp = cls(spec, n_z, d)
        for j, l in enumerate(spec.layers, start=1):
            ctx = context_size(j, n_z)
            w = hp.tensors[tensor_name(j, HEAD_W)]
            w[...] = rng.standard_normal(w.shape) / np.sqrt(ctx)
            o = hp.tensors[tensor_name(j, OUT_W)]
            o[...] = rng.standard_normal(o.shape) / np.sqrt(d)
        return hp

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "HyperParams":
        return HyperParams(self.spec, self.n_z, self.d,
                           {k: v.copy() for k, v in self.tensors.items()})

    def leaves(self) -> dict[str, Tensor]:
        # no copy: callers must not mutate tensors while a graph is alive
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.tensors.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.tensors.items()}

    def plus(self, delta: dict[str, np.ndarray]) -> "HyperParams":
        return HyperParams(self.spec, self.n_z, self.d,
                           {k: v + delta[k] if k in delta else v.copy()
                            for k, v in self.tensors.items()})

    def minus(self, other: "HyperParams") -> dict[str, np.ndarray]:
        return {k: v - other.tensors[k] for k, v in self.tensors.items()}


# generation (works on Tensor dicts so it can be differentiated)

def generate_layer(hp: dict[str, Tensor], spec: ModelSpec, j: int,
                   context: Tensor) -> tuple[Tensor, Tensor]:
    """Layer ``j`` (1-based) for a batch of contexts of shape ``(B, ctx_j)``.

    Returns ``K`` of shape ``(B, n_out, n_in)`` and bias ``(B, n_out)``.
    """
    l = spec.layers[j - 1]
    head_w = hp[tensor_name(j, HEAD_W)]
    chunks, d, ctx = head_w.shape
    if context.shape[-1] != ctx:
        raise AssertionError(f"layer {j} context has width {context.shape[-1]}, expected {ctx}")
    batch = context.shape[0]
    a = (context @ head_w.reshape(chunks * d, ctx).T).reshape(batch, chunks, d)
    a = a + hp[tensor_name(j, HEAD_B)]
    cols = a @ hp[tensor_name(j, OUT_W)].T + hp[tensor_name(j, OUT_B)]
    K = cols[:, :l.n_in, :].swapaxes(1, 2)
    return K, cols[:, l.n_in, :]


def flatten_layer(K: Tensor, bias: Tensor) -> Tensor:
    return concat([K.reshape(K.shape[0], -1), bias], axis=-1)


def _encode_flat(hp: dict[str, Tensor], j: int, flat: Tensor) -> Tensor:
    return flat @ hp[tensor_name(j, ENC_W)].T + hp[tensor_name(j, ENC_B)]


def encode_layer(hp: dict[str, Tensor], j: int, K: Tensor, bias: Tensor) -> Tensor:
    """Summary ``C_j flatten(K || bias) + c_j`` of shape ``(B, n_z)``."""
    return _encode_flat(hp, j, flatten_layer(K, bias))


def generate_flat(hp: dict[str, Tensor], spec: ModelSpec, z) -> Tensor:
    """Generated models for a batch of identities as flat rows ``(B, P)``."""
    context = as_tensor(z)
    if context.data.ndim == 1:
        context = context.reshape(1, -1)
    pieces = []
    n_layers = len(spec.layers)
    for j in range(1, n_layers + 1):
        K, bias = generate_layer(hp, spec, j, context)
        flat = flatten_layer(K, bias)
        pieces.append(flat)
        if j < n_layers:
            context = concat([context, _encode_flat(hp, j, flat)], axis=-1)
    return concat(pieces, axis=-1)


def generate_model(hp: HyperParams, identity: TaskIdentity | np.ndarray,
                   spec: ModelSpec | None = None) -> ModelWeights:
    if spec is not None and spec != hp.spec:
        raise ConfigurationError(f"hypernetwork built for {hp.spec.sizes()}, asked for {spec.sizes()}")
    z = identity.z if isinstance(identity, TaskIdentity) else np.asarray(identity)
    if z.shape != (hp.n_z,):
        raise ConfigurationError(f"identity has shape {z.shape}, expected ({hp.n_z},)")
    flat = generate_flat(hp.constants(), hp.spec, z).data[0]
    return ModelWeights.from_flat(flat, hp.spec)


def generate_many(hp: HyperParams, identities: Sequence[TaskIdentity]) -> np.ndarray:
    """Flat generated models, one row per identity."""
    if not identities:
        return np.zeros((0, hp.spec.param_count))
    z = np.stack([t.z for t in identities])
    return generate_flat(hp.constants(), hp.spec, z).data
