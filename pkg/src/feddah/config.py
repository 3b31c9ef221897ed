"""Experiment configuration: YAML file, CLI overrides, strict validation.

Precedence is flags > file > defaults. Unknown keys are rejected so a typo in
a hyperparameter name cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigurationError

MODES = ("full", "no_lr", "no_ws", "no_dahyper", "fedavg_cl", "local_only")
ABLATION_MODES = ("full", "no_lr", "no_ws", "no_dahyper", "fedavg_cl")


def _default_unique() -> list[list[str]]:
    return [[f"u{c}a", f"u{c}b"] for c in range(1, 5)]


@dataclass
class ExperimentConfig:
    seed: int = 0
    # per-client unique task pools; the number of clients is len(unique_tasks)
    unique_tasks: list[list[str]] = field(default_factory=_default_unique)
    shared_initial: list[str] = field(default_factory=lambda: ["init-a", "init-b"])
    shared: list[str] = field(default_factory=lambda: [f"shared-{i}" for i in range(1, 6)])
    E: int = 5
    T: int = 20
    n_z: int = 32
    d: int = 64
    mu_spacing: float = 2.0
    sigma: float = 0.5
    beta: float = 0.01
    beta1: float = 0.01
    beta2: float = 0.01
    n_inner: int = 1
    n_server: int = 20
    lr_client: float = 1e-3
    lr_server: float = 1e-3
    bins: int = 64
    smoothing: float = 1e-8
    mode: str = "full"
    output_dir: str = "runs/default"
    # client model and synthetic data
    hidden: list[int] = field(default_factory=lambda: [32, 32])
    families: list[str] = field(default_factory=lambda: ["sine", "poly"])
    samples_per_task: int = 100
    noise: float = 0.1
    # server variants left open by the method description
    candidate_optimizer: str = "adam"
    ws_mode: str = "generated"
    snapshot: str = "round"

    def __post_init__(self):
        self.validate()

    @property
    def n_clients(self) -> int:
        return len(self.unique_tasks)

    def all_tasks(self) -> list[str]:
        """Canonical task order: shared-initial, shared, then unique pools by client."""
        out = list(self.shared_initial) + list(self.shared)
        for pool in self.unique_tasks:
            out.extend(pool)
        return out

    def validate(self) -> None:
        for key in ("lr_client", "lr_server"):
            if not getattr(self, key) > 0:
                raise ConfigurationError(f"{key}: must be > 0, got {getattr(self, key)}")
        for key in ("mu_spacing",):
            if getattr(self, key) < 0:
                raise ConfigurationError(f"{key}: must be >= 0")
        if not self.sigma > 0:
            raise ConfigurationError(f"sigma: must be > 0, got {self.sigma}")
        for key in ("beta", "beta1", "beta2", "noise", "smoothing"):
            if getattr(self, key) < 0:
                raise ConfigurationError(f"{key}: must be >= 0, got {getattr(self, key)}")
        if self.E < 0:
            raise ConfigurationError(f"E: must be >= 0, got {self.E}")
        if self.T < 1:
            raise ConfigurationError(f"T: must be >= 1, got {self.T}")
        for key in ("n_z", "d"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key}: must be >= 1, got {getattr(self, key)}")
        if self.bins < 2:
            raise ConfigurationError(f"bins: must be >= 2, got {self.bins}")
        if self.n_inner < 0 or self.n_server < 0:
            raise ConfigurationError("n_inner / n_server: must be >= 0")
        if self.samples_per_task < 2:
            raise ConfigurationError("samples_per_task: must be >= 2")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode: {self.mode!r} is not one of {', '.join(MODES)}")
        if not self.families:
            raise ConfigurationError("families: must name at least one task family")
        dup = _dups(self.all_tasks())
        if dup:
            raise ConfigurationError(f"tasks listed more than once (shared/unique pools overlap?): {dup}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def dump(self, path: str | os.PathLike) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _dups(names: list[str]) -> list[str]:
    seen, dup = set(), []
    for n in names:
        if n in seen and n not in dup:
            dup.append(n)
        seen.add(n)
    return dup


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(key: str, value: Any) -> Any:
    default = ExperimentConfig.__dataclass_fields__[key]
    proto = default.default if default.default is not dataclasses.MISSING else default.default_factory()
    if isinstance(proto, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(proto, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, str) and value.lstrip("-").isdigit():
                return int(value)
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(proto, float):
        if isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(proto, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{key}: expected a string, got {value!r}")
        return value
    if key == "unique_tasks":
        if not isinstance(value, list) or not all(isinstance(p, list) for p in value):
            raise ConfigurationError(f"{key}: expected a list of lists of task names")
        for i, pool in enumerate(value):
            for j, t in enumerate(pool):
                if not isinstance(t, str):
                    raise ConfigurationError(f"{key}[{i}][{j}]: expected a string, got {t!r}")
        return [list(p) for p in value]
    if isinstance(proto, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if not isinstance(value, list):
            raise ConfigurationError(f"{key}: expected a list, got {value!r}")
        kind = int if key == "hidden" else str
        out = []
        for i, v in enumerate(value):
            if kind is int:
                if isinstance(v, bool) or not isinstance(v, (int, str)) or (isinstance(v, str) and not v.isdigit()):
                    raise ConfigurationError(f"{key}[{i}]: expected an integer, got {v!r}")
                out.append(int(v))
            else:
                if not isinstance(v, str):
                    raise ConfigurationError(f"{key}[{i}]: expected a string, got {v!r}")
                out.append(v)
        return out
    return value


def from_mapping(data: dict[str, Any] | None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    merged: dict[str, Any] = {}
    for source in (data or {}), (overrides or {}):
        if not isinstance(source, dict):
            raise ConfigurationError("config root must be a mapping")
        for key, value in source.items():
            if key not in _FIELDS:
                raise ConfigurationError(f"{key}: unknown config key")
            if value is None:
                continue
            merged[key] = _coerce(key, value)
    return ExperimentConfig(**merged)


def parse_config(path: str | os.PathLike | None = None,
                 overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Load a YAML config (may be empty or absent) and apply flag overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text())
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{p}: not valid YAML ({exc})") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigurationError(f"{p}: config root must be a mapping")
        data = loaded or {}
    cfg = from_mapping(data, overrides)
    env_out = os.environ.get("FEDDAH_OUT")
    if env_out:
        cfg.output_dir = env_out
    return cfg
