"""Round-based simulation of clients with asynchronous task streams.

Rounds are synchronous: every client with a task left trains ``E`` epochs,
the server consumes all uploads, and clients get their next-round weights.
A client stays on a task for ``T`` rounds, then moves to the next entry of
its stream.
"""

from __future__ import annotations

import copy
import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import amr
from .checkpoint import save_checkpoint
from .client import FAMILIES, ClientUpdate, SyntheticTask, evaluate, local_train, make_task, random_init
from .config import ExperimentConfig
from .errors import ConfigurationError
from .hypernet import ModelSpec, ModelWeights, TaskRegistry
from .servers import Server, make_server

METRIC_COLUMNS = ("round", "client_id", "eval_task_id", "test_loss", "test_accuracy")


@dataclass
class TaskStream:
    client_id: int
    entries: list[tuple[str, int]]  # (task_id, start_round)
    shared_initial: list[str]
    unique: list[str]

    @property
    def task_ids(self) -> list[str]:
        return [t for t, _ in self.entries]


def _seed_int(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def build_streams(cfg: ExperimentConfig, seed: int | None = None) -> list[TaskStream]:
    """Shared-initial tasks first, then a per-client permutation of shared + unique."""
    seed = cfg.seed if seed is None else seed
    owner: dict[str, int] = {}
    for c, pool in enumerate(cfg.unique_tasks):
        for t in pool:
            if t in owner and owner[t] != c:
                raise ConfigurationError(
                    f"task {t!r} is in the unique pools of clients {owner[t]} and {c}")
            owner[t] = c
    if set(owner) & (set(cfg.shared) | set(cfg.shared_initial)):
        raise ConfigurationError("a unique task is also listed as shared")
    streams = []
    for c, pool in enumerate(cfg.unique_tasks):
        rng = np.random.default_rng([seed, c, 0x57EA])
        rest = list(cfg.shared) + list(pool)
        order = list(cfg.shared_initial) + [rest[i] for i in rng.permutation(len(rest))]
        entries = [(t, i * cfg.T + 1) for i, t in enumerate(order)]
        streams.append(TaskStream(c, entries, list(cfg.shared_initial), list(pool)))
    return streams


@dataclass
class ClientState:
    client_id: int
    stream: TaskStream
    pointer: int = 0
    weights: ModelWeights | None = None
    rounds_on_task: int = 0
    rounds_per_task: dict[str, int] = field(default_factory=dict)

    @property
    def current_task(self) -> str | None:
        return self.stream.entries[self.pointer][0] if self.pointer < len(self.stream.entries) else None


@dataclass
class SimState:
    round: int
    server: Server
    identities: TaskRegistry
    clients: list[ClientState]
    spec: ModelSpec
    cfg: ExperimentConfig
    data: dict[tuple[int, str], SyntheticTask]
    metrics: list[tuple] = field(default_factory=list)
    reports: list[dict] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return all(c.current_task is None for c in self.clients)


def server_config(cfg: ExperimentConfig) -> amr.ServerConfig:
    beta, beta1, beta2 = cfg.beta, cfg.beta1, cfg.beta2
    if cfg.mode == "no_lr":
        beta = beta1 = beta2 = 0.0
    return amr.ServerConfig(
        beta=beta, beta1=beta1, beta2=beta2, lr=cfg.lr_server, n_inner=cfg.n_inner,
        n_server=cfg.n_server, bins=cfg.bins, smoothing=cfg.smoothing,
        candidate_optimizer=cfg.candidate_optimizer, ws_mode=cfg.ws_mode,
        ws_override=0.0 if cfg.mode == "no_ws" else None, snapshot=cfg.snapshot)


def model_spec(cfg: ExperimentConfig) -> ModelSpec:
    return ModelSpec.mlp([2, *cfg.hidden, 1])


def build_data(cfg: ExperimentConfig, n_clients: int) -> dict[tuple[int, str], SyntheticTask]:
    """Every client holds its own sample of every task (tests span all tasks)."""
    for fam in cfg.families:
        if fam not in FAMILIES or fam == "radial":
            raise ConfigurationError(
                f"families: {fam!r} is not a regression family (choose from sine, poly)")
    data = {}
    for idx, task_id in enumerate(cfg.all_tasks()):
        family = cfg.families[idx % len(cfg.families)]
        coef_seed = _seed_int(cfg.seed, idx, 0xF00)
        for c in range(n_clients):
            data[(c, task_id)] = make_task(family, coef_seed, cfg.samples_per_task, cfg.noise,
                                           sample_seed=_seed_int(cfg.seed, idx, c, 0x5A),
                                           task_id=task_id)
    return data


def init_state(cfg: ExperimentConfig) -> SimState:
    spec = model_spec(cfg)
    identities = TaskRegistry(cfg.n_z, cfg.seed, cfg.mu_spacing, cfg.sigma)
    server = make_server(cfg.mode, spec, identities, n_z=cfg.n_z, d=cfg.d, seed=cfg.seed,
                         server_config=server_config(cfg))
    streams = build_streams(cfg)
    clients = [ClientState(s.client_id, s) for s in streams]
    state = SimState(0, server, identities, clients, spec, cfg, build_data(cfg, len(clients)))
    for c in clients:
        if c.current_task is not None:
            c.weights = _warm_start(state, c, c.current_task)
    return state


def _warm_start(state: SimState, client: ClientState, task_id: str) -> ModelWeights:
    if task_id in state.identities:
        w = state.server.allocate(task_id, client.client_id)
        if w is not None:
            return w
    idx = state.cfg.all_tasks().index(task_id)
    return random_init(state.spec, np.random.default_rng([state.cfg.seed, client.client_id, idx, 0x1217]))


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def _evaluate_all(state: SimState, rnd: int) -> list[tuple]:
    seen = state.identities.task_ids()
    models = state.server.eval_models(seen, len(state.clients))
    rows = []
    for c in state.clients:
        for t in seen:
            flat = models.get((c.client_id, t))
            if flat is None:
                continue
            ev = evaluate(flat, state.data[(c.client_id, t)], state.spec)
            rows.append((rnd, c.client_id, t, ev.loss, ev.accuracy))
    return rows


def run_round(state: SimState) -> SimState:
    """One communication round; returns a new state and leaves ``state`` untouched."""
    cfg = state.cfg
    new = copy.copy(state)
    new.clients = [copy.copy(c) for c in state.clients]
    for c in new.clients:
        c.rounds_per_task = dict(c.rounds_per_task)
    new.metrics = list(state.metrics)
    new.reports = list(state.reports)
    rnd = state.round + 1
    new.round = rnd
    active = [c for c in new.clients if c.current_task is not None]
    if not active:
        return new
    n_registered = len(state.identities)
    try:
        uploads: list[ClientUpdate] = []
        for c in active:
            task = c.current_task
            uploads.append(local_train(c.weights, state.data[(c.client_id, task)], state.spec,
                                       epochs=cfg.E, lr=cfg.lr_client, seed=cfg.seed,
                                       client_id=c.client_id, round=rnd))
        for u in uploads:
            if u.task_id not in new.identities:
                new.identities.register(u.task_id)
        new.server, records = state.server.update(uploads, rnd)
        new.reports.extend(records)
        for c, u in zip(active, uploads):
            c.rounds_on_task += 1
            c.rounds_per_task[u.task_id] = c.rounds_per_task.get(u.task_id, 0) + 1
            if c.rounds_on_task >= cfg.T:
                c.pointer += 1
                c.rounds_on_task = 0
                nxt = c.current_task
                c.weights = None if nxt is None else _warm_start(new, c, nxt)
            else:
                alloc = new.server.allocate(u.task_id, c.client_id)
                c.weights = alloc if alloc is not None else u.weights
        new.metrics.extend(_evaluate_all(new, rnd))
    except BaseException:
        state.identities.truncate(n_registered)
        raise
    return new


@dataclass
class ExperimentResult:
    state: SimState
    out_dir: Path | None

    @property
    def metrics(self) -> list[tuple]:
        return self.state.metrics


def write_metrics(rows: Sequence[tuple], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for rnd, cid, task, loss, acc in rows:
            w.writerow([rnd, cid, task, _fmt(loss), _fmt(acc)])


def write_reports(records: Sequence[dict], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None,
                   write: bool = True, max_rounds: int | None = None) -> ExperimentResult:
    """Run rounds until every stream is exhausted; write metrics.csv,
    rounds.jsonl, checkpoint.fdah, config.yaml and summary.json."""
    from .metrics import summarize

    state = init_state(cfg)
    while not state.done and (max_rounds is None or state.round < max_rounds):
        state = run_round(state)
    path = None
    if write:
        path = Path(out_dir if out_dir is not None else cfg.output_dir)
        path.mkdir(parents=True, exist_ok=True)
        write_metrics(state.metrics, path / "metrics.csv")
        write_reports(state.reports, path / "rounds.jsonl")
        save_checkpoint(path / "checkpoint.fdah", state.server.tensors(), list(state.identities))
        cfg.dump(path / "config.yaml")
        summary = summarize(state.metrics)
        summary["mode"] = cfg.mode
        summary["seed"] = cfg.seed
        summary["rounds"] = state.round
        (path / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return ExperimentResult(state, path)
