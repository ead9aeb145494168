"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic       8 bytes  b"UOLOCKPT"
    version     u32
    header      u32 length + UTF-8 JSON (architecture config echo, step, ledger state)
    n_params    u32, then per record:
                  u32 name length, name bytes, u32 rank, rank * u32 extents,
                  float64 payload (row-major)
    n_optim     u32, then per record: same named-array record layout

Running batch-norm statistics are stored as parameter records named
``stats.<layer>.mean`` / ``stats.<layer>.var``; Adam moments as optimizer
records ``<param>.m`` / ``<param>.v`` with the step count ``<param>.t``
stored as a rank-0 array.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, DataError

MAGIC = b"UOLOCKPT"
VERSION = 1

__all__ = ["MAGIC", "VERSION", "write_checkpoint", "read_checkpoint"]


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError("checkpoint truncated")
    return data


def _read_record(fh) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, n).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape)
    return name, arr.astype(np.float64)


def write_checkpoint(path, header: dict, params: dict[str, np.ndarray],
                     optimizer: dict[str, np.ndarray]) -> Path:
    """Write atomically; a failed write leaves no partial file behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            blob = json.dumps(header, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", len(params)))
            for name, arr in params.items():
                _write_record(fh, name, arr)
            fh.write(struct.pack("<I", len(optimizer)))
            for name, arr in optimizer.items():
                _write_record(fh, name, arr)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DataError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, n).decode("utf-8"))
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4))
        params = dict(_read_record(fh) for _ in range(n_params))
        (n_opt,) = struct.unpack("<I", _read_exact(fh, 4))
        optimizer = dict(_read_record(fh) for _ in range(n_opt))
    return header, params, optimizer
