"""Binary checkpoint: named float64 tensors plus the task-identity registry.

Layout (all integers little-endian)::

    b"FDAH" | u32 version
    u32 n_tensors, then per tensor:
        u32 name_len | name (utf-8) | u32 rank | u64 dims[rank] | f64 data (row-major)
    u32 n_identities, then per identity:
        u32 id_len | task_id (utf-8) | u32 index | f64 mu | f64 sigma | u32 n_z | f64 z[n_z]
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Iterable

import numpy as np

from .errors import ConfigurationError
from .hypernet import (ENC_W, HEAD_W, HyperParams, ModelSpec, TaskIdentity, TaskRegistry,
                       tensor_name)

MAGIC = b"FDAH"
VERSION = 1


def _write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise ConfigurationError("checkpoint is truncated")
    return raw


def _read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray],
                    identities: Iterable[TaskIdentity] = ()) -> None:
    identities = list(identities)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            _write_str(fh, name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
        fh.write(struct.pack("<I", len(identities)))
        for t in identities:
            _write_str(fh, t.task_id)
            fh.write(struct.pack("<IddI", t.index, t.mu, t.sigma, t.z.size))
            fh.write(np.ascontiguousarray(t.z, dtype="<f8").tobytes())


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], list[TaskIdentity]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise ConfigurationError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(n):
            name = _read_str(fh)
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            tensors[name] = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        (m,) = struct.unpack("<I", _read_exact(fh, 4))
        identities = []
        for _ in range(m):
            task_id = _read_str(fh)
            index, mu, sigma, n_z = struct.unpack("<IddI", _read_exact(fh, 24))
            z = np.frombuffer(_read_exact(fh, 8 * n_z), dtype="<f8").astype(np.float64)
            z.setflags(write=False)
            identities.append(TaskIdentity(task_id, index, z, mu, sigma))
        if fh.read(1):
            raise ConfigurationError(f"{path}: trailing bytes after checkpoint")
    return tensors, identities


def hyperparams_from_tensors(tensors: dict[str, np.ndarray], prefix: str = "hyper/") -> HyperParams:
    """Rebuild a HyperParams (and its tanh-MLP spec) from checkpoint tensors."""
    hp = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    sizes = []
    j = 1
    while tensor_name(j, HEAD_W) in hp:
        chunks, d, ctx = hp[tensor_name(j, HEAD_W)].shape
        n_z = hp[tensor_name(j, ENC_W)].shape[0]
        if j == 1:
            sizes.append(chunks - 1)
        sizes.append(hp[tensor_name(j, "out_w")].shape[0])
        j += 1
    if j == 1:
        raise ConfigurationError("checkpoint holds no hypernetwork tensors")
    return HyperParams(ModelSpec.mlp(sizes), n_z, d, hp)


def registry_from_identities(identities: Iterable[TaskIdentity], seed: int = 0,
                             mu_spacing: float = 2.0) -> TaskRegistry:
    identities = sorted(identities, key=lambda t: t.index)
    n_z = identities[0].z.size if identities else 1
    sigma = identities[0].sigma if identities else 0.5
    reg = TaskRegistry(n_z, seed, mu_spacing, sigma)
    for t in identities:
        reg.restore(t)
    return reg
