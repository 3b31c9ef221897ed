"""Server strategies behind one small interface.

``HypernetServer`` runs the hypernetwork method (full mode and its
``no_lr``/``no_ws`` ablations via config); the others are the baselines:
per-task parameter averaging, single-model FedAvg, and no server at all.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import amr
from .client import ClientUpdate
from .hypernet import HyperParams, ModelSpec, ModelWeights, TaskRegistry, generate_many


class Server:
    mode = "base"

    def __init__(self, spec: ModelSpec, identities: TaskRegistry):
        self.spec = spec
        self.identities = identities

    def update(self, uploads: Sequence[ClientUpdate], rnd: int) -> tuple["Server", list[dict]]:
        raise NotImplementedError

    def allocate(self, task_id: str, client_id: int) -> ModelWeights | None:
        """Weights handed to a client starting a round on ``task_id`` (None: no model yet)."""
        raise NotImplementedError

    def eval_models(self, task_ids: Sequence[str], n_clients: int) -> dict[tuple[int, str], np.ndarray]:
        """Flat weights used to evaluate each (client, task) pair."""
        raise NotImplementedError

    def tensors(self) -> dict[str, np.ndarray]:
        raise NotImplementedError


def _plain_record(rnd: int, task_id: str, members: Sequence[ClientUpdate]) -> dict:
    return dict(round=rnd, task_id=task_id, client_ids=[u.client_id for u in members],
                w_s=None, l_task_hist=None, l_task_upload=None, l_r1=None, l_r2=None,
                total_loss=None, delta_norm=None)


def _groups(uploads: Sequence[ClientUpdate], identities: TaskRegistry):
    groups: dict[str, list[ClientUpdate]] = {}
    for u in sorted(uploads, key=lambda u: u.client_id):
        groups.setdefault(u.task_id, []).append(u)
    return [(t, groups[t]) for t in sorted(groups, key=lambda t: identities[t].index)]


def _mean(members: Sequence[ClientUpdate]) -> np.ndarray:
    return np.mean([u.weights.flatten() for u in members], axis=0)


class HypernetServer(Server):
    mode = "hypernet"

    def __init__(self, state: amr.ServerState):
        super().__init__(state.hp.spec, state.identities)
        self.state = state

    def update(self, uploads, rnd):
        new_state, reports = amr.server_update(self.state, uploads, rnd)
        return HypernetServer(new_state), [r.to_json() for r in reports]

    def allocate(self, task_id, client_id):
        if task_id not in self.state.registry:
            return None
        return ModelWeights.from_flat(
            generate_many(self.state.hp, [self.identities[task_id]])[0], self.spec)

    def eval_models(self, task_ids, n_clients):
        flat = generate_many(self.state.hp, [self.identities[t] for t in task_ids])
        return {(c, t): flat[i] for i, t in enumerate(task_ids) for c in range(n_clients)}

    def tensors(self):
        out = {f"hyper/{k}": v for k, v in self.state.hp.tensors.items()}
        for t in sorted(self.state.registry, key=lambda t: self.identities[t].index):
            out[f"basic/{t}"] = self.state.registry[t].weights.flatten()
        return out


class TaskAverageServer(Server):
    """Keeps one model per task: the average of that task's uploads in its latest round."""

    mode = "no_dahyper"

    def __init__(self, spec, identities, models: dict[str, np.ndarray] | None = None):
        super().__init__(spec, identities)
        self.models = dict(models or {})

    def update(self, uploads, rnd):
        models = dict(self.models)
        records = []
        for task_id, members in _groups(uploads, self.identities):
            models[task_id] = _mean(members)
            records.append(_plain_record(rnd, task_id, members))
        return TaskAverageServer(self.spec, self.identities, models), records

    def allocate(self, task_id, client_id):
        flat = self.models.get(task_id)
        return None if flat is None else ModelWeights.from_flat(flat, self.spec)

    def eval_models(self, task_ids, n_clients):
        return {(c, t): self.models[t] for t in task_ids for c in range(n_clients)
                if t in self.models}

    def tensors(self):
        return {f"basic/{t}": self.models[t]
                for t in sorted(self.models, key=lambda t: self.identities[t].index)}


class GlobalAverageServer(Server):
    """Plain FedAvg over every upload, whatever task it was trained on."""

    mode = "fedavg_cl"

    def __init__(self, spec, identities, model: np.ndarray | None = None):
        super().__init__(spec, identities)
        self.model = model

    def update(self, uploads, rnd):
        ordered = sorted(uploads, key=lambda u: u.client_id)
        model = _mean(ordered) if ordered else self.model
        records = [_plain_record(rnd, t, m) for t, m in _groups(uploads, self.identities)]
        return GlobalAverageServer(self.spec, self.identities, model), records

    def allocate(self, task_id, client_id):
        return None if self.model is None else ModelWeights.from_flat(self.model, self.spec)

    def eval_models(self, task_ids, n_clients):
        if self.model is None:
            return {}
        return {(c, t): self.model for t in task_ids for c in range(n_clients)}

    def tensors(self):
        return {} if self.model is None else {"global": self.model}


class LocalServer(Server):
    """No communication: each client keeps fine-tuning its own single model."""

    mode = "local_only"

    def __init__(self, spec, identities, models: dict[int, np.ndarray] | None = None):
        super().__init__(spec, identities)
        self.models = dict(models or {})

    def update(self, uploads, rnd):
        models = dict(self.models)
        for u in uploads:
            models[u.client_id] = u.weights.flatten()
        records = [_plain_record(rnd, t, m) for t, m in _groups(uploads, self.identities)]
        return LocalServer(self.spec, self.identities, models), records

    def allocate(self, task_id, client_id):
        flat = self.models.get(client_id)
        return None if flat is None else ModelWeights.from_flat(flat, self.spec)

    def eval_models(self, task_ids, n_clients):
        return {(c, t): self.models[c] for t in task_ids for c in range(n_clients)
                if c in self.models}

    def tensors(self):
        return {f"client/{c}": self.models[c] for c in sorted(self.models)}


def make_server(mode: str, spec: ModelSpec, identities: TaskRegistry, *, n_z: int, d: int,
                seed: int, server_config: amr.ServerConfig) -> Server:
    if mode in ("full", "no_lr", "no_ws"):
        hp = HyperParams.init(spec, n_z, d, np.random.default_rng([seed, 0x4E7]))
        return HypernetServer(amr.ServerState(hp, identities, server_config))
    if mode == "no_dahyper":
        return TaskAverageServer(spec, identities)
    if mode == "fedavg_cl":
        return GlobalAverageServer(spec, identities)
    if mode == "local_only":
        return LocalServer(spec, identities)
    raise ValueError(mode)
