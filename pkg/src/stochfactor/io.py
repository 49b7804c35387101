"""Binary ensemble files and CSV/JSON exports.

Ensemble layout (little-endian)::

    4s   magic  b"PENS"
    u16  version (1)
    u16  label length L
    L    label, UTF-8
    f64  T
    u32  N
    u64  M
    u64  master seed (2**64 - 1 when unknown)
    f64  x0
    M*(N+1) f64, row-major (path by path)
"""
from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .paths import PathEnsemble, TimeGrid

__all__ = ["MAGIC", "VERSION", "EmptyEnsembleError", "write_ensemble", "read_ensemble", "write_csv",
           "write_random_variable_csv", "write_ensemble_csv", "write_field_csv", "write_u_table_csv",
           "write_json", "canonical_json"]

MAGIC = b"PENS"
VERSION = 1
_NO_SEED = 2 ** 64 - 1
_HEAD = struct.Struct("<4sHH")
_TAIL = struct.Struct("<dIQQd")


class EmptyEnsembleError(ValueError):
    """Ensemble has no paths; nothing to export."""


def write_ensemble(path, ens: PathEnsemble) -> None:
    label = ens.label.encode()
    seed = ens.seed.get("master_seed") if isinstance(ens.seed, dict) else None
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(label)))
        fh.write(label)
        fh.write(_TAIL.pack(ens.grid.T, ens.grid.N, ens.M, _NO_SEED if seed is None else int(seed), ens.x0))
        fh.write(np.ascontiguousarray(ens.paths, dtype="<f8").tobytes())


def read_ensemble(path) -> PathEnsemble:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n_label = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not an ensemble file")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = _HEAD.size
    label = raw[off: off + n_label].decode()
    off += n_label
    T, N, M, seed, x0 = _TAIL.unpack_from(raw, off)
    off += _TAIL.size
    data = np.frombuffer(raw, dtype="<f8", offset=off)
    if data.size != M * (N + 1):
        raise ValueError(f"{path}: expected {M * (N + 1)} values, found {data.size}")
    paths = data.reshape(M, N + 1).astype(float)
    meta = None if seed == _NO_SEED else {"master_seed": seed}
    return PathEnsemble(TimeGrid(T, N), paths, label, x0, seed=meta)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write rows; floats use ``repr`` so values round-trip exactly."""
    rows = list(rows)
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    os.replace(tmp, path)


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(canonical_json(obj))


def write_random_variable_csv(path, values) -> None:
    """Columns ``path_id, value``."""
    write_csv(path, ("path_id", "value"), enumerate(np.asarray(values, dtype=float)))


def write_ensemble_csv(path, ens: PathEnsemble) -> None:
    """Long format ``path_id, t, value``; meant for small ensembles."""
    if ens.M == 0:
        raise EmptyEnsembleError("ensemble is empty")
    t = ens.grid.nodes
    write_csv(path, ("path_id", "t", "value"),
              ((m, t[i], ens.paths[m, i]) for m in range(ens.M) for i in range(ens.grid.N + 1)))


def write_field_csv(path, field) -> None:
    """Spectral field samples as ``x, value``."""
    write_csv(path, ("x", "value"), zip(field.x, field.values))


def write_u_table_csv(path, solution) -> None:
    """Backward Kolmogorov solution as ``t, x, value``."""
    write_csv(path, ("t", "x", "value"), solution.table())
