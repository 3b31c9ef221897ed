"""Server-side hypernetwork optimization with history regularization and
similarity-weighted recalibration.

A round goes: snapshot the hypernetwork, then for every task group among the
uploads either fit the upload (task seen for the first time) or fit a
similarity-weighted blend of the stored basic model and the upload. Both
losses add a penalty that keeps the outputs for the other stored tasks close
to the snapshot after a provisional ("candidate") step on the current task.
The candidate change is held constant when differentiating the penalty.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .client import ClientUpdate
from .errors import (ConfigurationError, OptimizationDivergedError, ProtocolError,
                     UsageError)
from .hypernet import (HyperParams, ModelWeights, TaskIdentity, TaskRegistry,
                       generate_flat, generate_many)
from .numcore import SGD, Adam, Tensor, backward

LN2 = math.log(2.0)


@dataclass
class ServerConfig:
    beta: float = 0.01
    beta1: float = 0.01
    beta2: float = 0.01
    lr: float = 1e-3
    n_inner: int = 1
    n_server: int = 20
    bins: int = 64
    smoothing: float = 1e-8
    # "adam": candidate step continues the server optimizer's moments; "sgd": plain step
    candidate_optimizer: str = "adam"
    candidate_lr: float | None = None
    # similarity compares the stored basic model with the "generated" model or the "upload"
    ws_mode: str = "generated"
    # force W_s to a constant (0.0 reproduces the upload-only ablation)
    ws_override: float | None = None
    # when the reference outputs for the history penalty are captured: "round" or "group"
    snapshot: str = "round"

    def __post_init__(self):
        if self.candidate_optimizer not in ("adam", "sgd"):
            raise ConfigurationError(
                f"candidate_optimizer must be 'adam' or 'sgd', got {self.candidate_optimizer!r}")
        if self.ws_mode not in ("generated", "upload"):
            raise ConfigurationError(f"ws_mode must be 'generated' or 'upload', got {self.ws_mode!r}")
        if self.snapshot not in ("round", "group"):
            raise ConfigurationError(f"snapshot must be 'round' or 'group', got {self.snapshot!r}")
        if self.n_inner < 0 or self.n_server < 0:
            raise ConfigurationError("n_inner and n_server must be non-negative")
        if self.bins < 2:
            raise ConfigurationError("bins must be at least 2")


@dataclass
class BasicModel:
    weights: ModelWeights
    round_created: int
    round_updated: int
    source_client: int


class ServerState:
    def __init__(self, hp: HyperParams, identities: TaskRegistry,
                 config: ServerConfig | None = None):
        self.hp = hp
        self.snapshot_hp = hp.copy()
        self.identities = identities
        self.registry: dict[str, BasicModel] = {}
        self.config = config or ServerConfig()
        self.optimizer = Adam(self.config.lr)
        self.round = 0

    def copy(self) -> "ServerState":
        other = ServerState.__new__(ServerState)
        other.hp = self.hp.copy()
        other.snapshot_hp = self.snapshot_hp.copy()
        other.identities = self.identities
        other.registry = {k: BasicModel(b.weights.copy(), b.round_created, b.round_updated,
                                        b.source_client) for k, b in self.registry.items()}
        other.config = self.config
        other.optimizer = self.optimizer.copy()
        other.round = self.round
        return other

    def take_snapshot(self) -> None:
        self.snapshot_hp = self.hp.copy()

    def previous_tasks(self, exclude: str) -> list[TaskIdentity]:
        """Tasks holding a basic model, other than ``exclude``, in registration order."""
        return [self.identities[t] for t in
                sorted(self.registry, key=lambda t: self.identities[t].index) if t != exclude]


# losses

def l_task(generated, target) -> float:
    """Sum of squared parameter differences between two models."""
    g = generated.flatten() if isinstance(generated, ModelWeights) else np.asarray(generated)
    t = target.flatten() if isinstance(target, ModelWeights) else np.asarray(target)
    if g.shape != t.shape:
        raise UsageError(f"models differ in size: {g.shape} vs {t.shape}")
    diff = g - t
    return float(diff @ diff)


def _sq_dist(gen: Tensor, target: np.ndarray) -> Tensor:
    return (gen - target).square().sum()


def history_penalty(hp: dict[str, Tensor], delta: dict[str, np.ndarray],
                    spec, z_prev: np.ndarray, reference: np.ndarray) -> Tensor:
    """Mean squared distance between outputs at ``hp + delta`` and ``reference``.

    ``reference`` holds the snapshot outputs for the identities in ``z_prev``;
    ``delta`` enters as a constant.
    """
    if len(z_prev) == 0:
        return Tensor(0.0)
    shifted = {k: v + delta[k] for k, v in hp.items()}
    out = generate_flat(shifted, spec, z_prev)
    return (out - reference).square().sum() * (1.0 / len(z_prev))


def l_r(state: ServerState, delta: dict[str, np.ndarray],
        previous_tasks: Sequence[TaskIdentity]) -> float:
    if not previous_tasks:
        return 0.0
    reference = generate_many(state.snapshot_hp, previous_tasks)
    z = np.stack([t.z for t in previous_tasks])
    return float(history_penalty(state.hp.constants(), delta, state.hp.spec, z, reference).data)


def _candidate_optimizer(state: ServerState):
    cfg = state.config
    lr = cfg.candidate_lr if cfg.candidate_lr is not None else cfg.lr
    if cfg.candidate_optimizer == "sgd":
        return SGD(lr)
    opt = state.optimizer.copy()
    opt.lr = lr
    return opt


def candidate_change(state: ServerState, identity: TaskIdentity, target,
                     first_grad: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Provisional delta from ``n_inner`` optimizer steps on the task loss.

    ``state.hp`` and the server optimizer are left untouched. ``first_grad``
    may carry the task-loss gradient at the current parameters to skip one
    generator pass.
    """
    target = target.flatten() if isinstance(target, ModelWeights) else np.asarray(target)
    n = state.config.n_inner
    if n == 0:
        return {k: np.zeros_like(v) for k, v in state.hp.tensors.items()}
    opt = _candidate_optimizer(state)
    work = {k: v.copy() for k, v in state.hp.tensors.items()}
    spec = state.hp.spec
    for step in range(n):
        if step == 0 and first_grad is not None:
            grads = first_grad
        else:
            leaves = {k: Tensor(v, requires_grad=True) for k, v in work.items()}
            loss = _sq_dist(generate_flat(leaves, spec, identity.z), target)
            if not np.isfinite(loss.data):
                raise OptimizationDivergedError("candidate change diverged", step)
            grads = dict(zip(leaves, backward(loss, leaves.values())))
        opt.step(work, grads)
    return {k: work[k] - v for k, v in state.hp.tensors.items()}


# similarity

def weights_to_distribution(w, lo: float, hi: float, bins: int = 64,
                            smoothing: float = 1e-8) -> np.ndarray:
    """Smoothed histogram of the flattened parameters over ``bins`` equal bins.

    Values outside ``[lo, hi]`` land in the boundary bins.
    """
    flat = w.flatten() if isinstance(w, ModelWeights) else np.ravel(np.asarray(w, dtype=np.float64))
    if not hi > lo:
        raise UsageError(f"histogram range is degenerate: [{lo}, {hi}]")
    if bins < 2:
        raise UsageError("need at least 2 bins")
    idx = np.floor((flat - lo) / (hi - lo) * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64) + smoothing
    return counts / math.fsum(counts)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats."""
    m = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)


def pooled_range(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    lo = float(min(a.min(), b.min()))
    hi = float(max(a.max(), b.max()))
    if hi <= lo:
        lo, hi = lo - 1e-9, hi + 1e-9
    return lo, hi


def similarity_weight(a, b, bins: int = 64, smoothing: float = 1e-8) -> float:
    """``1 - JS(P, Q) / ln 2`` for weight histograms over the pooled range, in [0, 1]."""
    fa = a.flatten() if isinstance(a, ModelWeights) else np.ravel(a)
    fb = b.flatten() if isinstance(b, ModelWeights) else np.ravel(b)
    if fa.shape != fb.shape:
        raise UsageError(f"models differ in size: {fa.shape} vs {fb.shape}")
    lo, hi = pooled_range(fa, fb)
    p = weights_to_distribution(fa, lo, hi, bins, smoothing)
    q = weights_to_distribution(fb, lo, hi, bins, smoothing)
    return min(1.0, max(0.0, 1.0 - js_divergence(p, q) / LN2))


# losses as differentiable graphs, shared by the server step and the gradient checks

def hyper_loss(hp: dict[str, Tensor], spec, z: np.ndarray, target: np.ndarray, beta: float,
               delta: dict[str, np.ndarray] | None, z_prev: np.ndarray,
               reference: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, task, penalty)`` with ``total = task + beta * penalty``."""
    task = _sq_dist(generate_flat(hp, spec, z), target)
    if delta is None or len(z_prev) == 0 or beta == 0:
        penalty = Tensor(0.0)
        return task, task, penalty
    penalty = history_penalty(hp, delta, spec, z_prev, reference)
    return task + beta * penalty, task, penalty


def recalibration_loss(hp: dict[str, Tensor], spec, z: np.ndarray, hist: np.ndarray,
                       upload: np.ndarray, w_s: float, beta1: float, beta2: float,
                       delta1, delta2, z_prev: np.ndarray, reference: np.ndarray) -> dict[str, Tensor]:
    """Similarity-weighted two-target loss.

    ``total = w_s * (L(gen, hist) + beta1 * R1) + (1 - w_s) * (L(gen, upload) + beta2 * R2)``
    where ``R1``/``R2`` are history penalties after each branch's candidate change.
    """
    gen = generate_flat(hp, spec, z)
    parts = {"l_task_hist": _sq_dist(gen, hist), "l_task_upload": _sq_dist(gen, upload)}
    for key, delta, coef, weight in (("l_r1", delta1, beta1, w_s), ("l_r2", delta2, beta2, 1 - w_s)):
        if delta is None or len(z_prev) == 0 or coef == 0 or weight == 0:
            parts[key] = Tensor(0.0)
        else:
            parts[key] = history_penalty(hp, delta, spec, z_prev, reference)
    parts["branch1"] = parts["l_task_hist"] + beta1 * parts["l_r1"]
    parts["branch2"] = parts["l_task_upload"] + beta2 * parts["l_r2"]
    parts["total"] = w_s * parts["branch1"] + (1 - w_s) * parts["branch2"]
    return parts


# the round

@dataclass
class Application:
    """Components of one upload's contribution at its final optimization step."""
    client_id: int
    branch: str  # "register" or "recalibrate"
    w_s: float | None
    l_task_hist: float | None
    l_task_upload: float
    l_r1: float | None
    l_r2: float | None
    total_loss: float
    delta_norm: float | None
    update_norm: float
    beta1: float
    beta2: float


@dataclass
class TaskReport:
    round: int
    task_id: str
    client_ids: list[int]
    w_s: float | None
    l_task_hist: float | None
    l_task_upload: float
    l_r1: float | None
    l_r2: float | None
    total_loss: float
    delta_norm: float | None
    applications: list[Application] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def _norm(delta: dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.vdot(v, v)) for v in delta.values())))


def _check_finite(value: float, step: int) -> None:
    if not np.isfinite(value):
        raise OptimizationDivergedError("server loss diverged", step)


class _Reference:
    """Snapshot outputs for the history penalty, computed once per snapshot."""

    def __init__(self, state: ServerState):
        self.state = state
        self.cache: dict[str, np.ndarray] = {}

    def reset(self):
        self.cache.clear()

    def get(self, tasks: Sequence[TaskIdentity]) -> tuple[np.ndarray, np.ndarray]:
        spec = self.state.hp.spec
        if not tasks:
            return np.zeros((0, self.state.hp.n_z)), np.zeros((0, spec.param_count))
        missing = [t for t in tasks if t.task_id not in self.cache]
        if missing:
            for t, row in zip(missing, generate_many(self.state.snapshot_hp, missing)):
                self.cache[t.task_id] = row
        return (np.stack([t.z for t in tasks]),
                np.stack([self.cache[t.task_id] for t in tasks]))


def _combine(terms) -> dict[str, np.ndarray]:
    """Weighted sum of gradient dicts, skipping zero weights."""
    out: dict[str, np.ndarray] = {}
    for w, g in terms:
        if w == 0 or g is None:
            continue
        for k, v in g.items():
            out[k] = out[k] + w * v if k in out else w * v
    return out


def _penalty_grad(state: ServerState, delta, z_prev, reference):
    leaves = state.hp.leaves()
    pen = history_penalty(leaves, delta, state.hp.spec, z_prev, reference)
    return float(pen.data), dict(zip(leaves, backward(pen, leaves.values())))


# The step functions evaluate the same losses as hyper_loss / recalibration_loss
# but share one generator pass between the task terms and the candidate change.

def _register_step(state: ServerState, ident: TaskIdentity, upload: np.ndarray,
                   ref: _Reference, step: int):
    cfg, spec = state.config, state.hp.spec
    prev = state.previous_tasks(ident.task_id)
    leaves = state.hp.leaves()
    task = _sq_dist(generate_flat(leaves, spec, ident.z), upload)
    l_up = float(task.data)
    _check_finite(l_up, step)
    g = dict(zip(leaves, backward(task, leaves.values())))
    need_delta = cfg.beta != 0 and bool(prev)
    delta, penalty, g_pen = None, 0.0, None
    if need_delta:
        delta = candidate_change(state, ident, upload, first_grad=g)
        z_prev, reference = ref.get(prev)
        penalty, g_pen = _penalty_grad(state, delta, z_prev, reference)
    total = l_up + cfg.beta * penalty
    _check_finite(total, step)
    info = dict(l_task_upload=l_up, l_r2=penalty if need_delta else None, total_loss=total,
                delta_norm=_norm(delta) if delta is not None else None)
    return _combine([(1.0, g), (cfg.beta, g_pen)]), info


def _recalibrate_step(state: ServerState, ident: TaskIdentity, hist: np.ndarray,
                      upload: np.ndarray, w_s: float, ref: _Reference, step: int):
    cfg, spec = state.config, state.hp.spec
    prev = state.previous_tasks(ident.task_id)
    leaves = state.hp.leaves()
    weights = (w_s, 1.0 - w_s)
    coefs = (cfg.beta1, cfg.beta2)
    gen = generate_flat(leaves, spec, ident.z)
    values, task_grads, deltas, pens, pen_grads = [], [None, None], [None, None], [0.0, 0.0], [None, None]
    for i, target in enumerate((hist, upload)):
        loss = _sq_dist(gen, target)
        values.append(float(loss.data))
        _check_finite(values[i], step)
        want = coefs[i] != 0 and weights[i] != 0 and bool(prev)
        if weights[i] != 0 or want:
            task_grads[i] = dict(zip(leaves, backward(loss, leaves.values())))
        if want:
            deltas[i] = candidate_change(state, ident, target, first_grad=task_grads[i])
            z_prev, reference = ref.get(prev)
            pens[i], pen_grads[i] = _penalty_grad(state, deltas[i], z_prev, reference)
    branch = [values[i] + coefs[i] * pens[i] for i in range(2)]
    total = w_s * branch[0] + (1.0 - w_s) * branch[1]
    _check_finite(total, step)
    grads = _combine([(weights[0], task_grads[0]), (weights[0] * coefs[0], pen_grads[0]),
                      (weights[1], task_grads[1]), (weights[1] * coefs[1], pen_grads[1])])
    if not grads:
        grads = {k: np.zeros_like(v) for k, v in state.hp.tensors.items()}
    info = dict(l_task_hist=values[0], l_task_upload=values[1],
                l_r1=pens[0] if deltas[0] is not None else None,
                l_r2=pens[1] if deltas[1] is not None else None,
                total_loss=total,
                delta_norm=_norm(deltas[1]) if deltas[1] is not None else
                (_norm(deltas[0]) if deltas[0] is not None else None))
    return grads, info


def _apply(state: ServerState, upload: ClientUpdate, rnd: int, ref: _Reference) -> Application:
    cfg = state.config
    ident = state.identities[upload.task_id]
    target = upload.weights.flatten()
    before = state.hp.copy()
    basic = state.registry.get(upload.task_id)
    info: dict = {}
    if basic is None:
        branch, w_s, hist = "register", None, None
    else:
        branch, hist = "recalibrate", basic.weights.flatten()
        if cfg.ws_override is not None:
            w_s = float(cfg.ws_override)
        else:
            probe = target if cfg.ws_mode == "upload" else generate_many(state.hp, [ident])[0]
            w_s = similarity_weight(probe, hist, cfg.bins, cfg.smoothing)
    for step in range(cfg.n_server):
        if branch == "register":
            grads, info = _register_step(state, ident, target, ref, step)
        else:
            grads, info = _recalibrate_step(state, ident, hist, target, w_s, ref, step)
        state.optimizer.step(state.hp.tensors, grads)
    if not info:
        # no optimization steps: report the loss at the current parameters
        gen = generate_many(state.hp, [ident])[0]
        info = dict(l_task_upload=l_task(gen, target), total_loss=l_task(gen, target))
        if hist is not None:
            info["l_task_hist"] = l_task(gen, hist)
            info["total_loss"] = w_s * info["l_task_hist"] + (1 - w_s) * info["l_task_upload"]
    for k, v in state.hp.tensors.items():
        if not np.isfinite(v).all():
            raise OptimizationDivergedError(f"hypernetwork tensor {k} became non-finite")
    weights = ModelWeights.from_flat(generate_many(state.hp, [ident])[0], state.hp.spec)
    if basic is None:
        state.registry[upload.task_id] = BasicModel(weights, rnd, rnd, upload.client_id)
    else:
        state.registry[upload.task_id] = BasicModel(weights, basic.round_created, rnd,
                                                    upload.client_id)
    return Application(
        client_id=upload.client_id, branch=branch, w_s=w_s,
        l_task_hist=info.get("l_task_hist"), l_task_upload=info["l_task_upload"],
        l_r1=info.get("l_r1"), l_r2=info.get("l_r2"), total_loss=info["total_loss"],
        delta_norm=info.get("delta_norm"), update_norm=_norm(state.hp.minus(before)),
        beta1=cfg.beta1 if branch == "recalibrate" else 0.0,
        beta2=cfg.beta2 if branch == "recalibrate" else cfg.beta)


def group_uploads(uploads: Sequence[ClientUpdate], state: ServerState) -> list[tuple[str, list[ClientUpdate]]]:
    """Task groups in identity-registration order, clients ascending within a group."""
    groups: dict[str, list[ClientUpdate]] = {}
    for u in uploads:
        if u.task_id not in state.identities:
            raise ProtocolError(f"upload from client {u.client_id} names unregistered task {u.task_id!r}")
        groups.setdefault(u.task_id, []).append(u)
    order = sorted(groups, key=lambda t: state.identities[t].index)
    return [(t, sorted(groups[t], key=lambda u: u.client_id)) for t in order]


def server_update(state: ServerState, uploads: Sequence[ClientUpdate],
                  rnd: int | None = None) -> tuple[ServerState, list[TaskReport]]:
    """One server round. Returns a new state; ``state`` itself is not modified."""
    new = state.copy()
    rnd = state.round + 1 if rnd is None else rnd
    new.round = rnd
    spec = new.hp.spec
    for u in uploads:
        if not u.weights.matches(spec):
            raise ProtocolError(f"upload from client {u.client_id} does not match the model spec")
    groups = group_uploads(uploads, new)
    new.take_snapshot()
    ref = _Reference(new)
    reports = []
    for task_id, members in groups:
        if new.config.snapshot == "group":
            new.take_snapshot()
            ref.reset()
        apps = [_apply(new, u, rnd, ref) for u in members]
        last = apps[-1]
        reports.append(TaskReport(
            round=rnd, task_id=task_id, client_ids=[u.client_id for u in members],
            w_s=last.w_s, l_task_hist=last.l_task_hist, l_task_upload=last.l_task_upload,
            l_r1=last.l_r1, l_r2=last.l_r2, total_loss=last.total_loss,
            delta_norm=last.delta_norm, applications=apps))
    return new, reports


def recompose(app: Application) -> float:
    """Rebuild the total loss of an application from its logged components."""
    r1 = app.l_r1 or 0.0
    r2 = app.l_r2 or 0.0
    if app.branch == "register":
        return app.l_task_upload + app.beta2 * r2
    w = app.w_s
    return w * (app.l_task_hist + app.beta1 * r1) + (1 - w) * (app.l_task_upload + app.beta2 * r2)
