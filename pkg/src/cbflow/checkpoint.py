"""Binary checkpoints.

Layout (all little-endian):

    8s   magic b"CBFCHKPT"
    u32  format version
    u32  n
    n*u64  axis sizes
    n*f64  periods
    f64  s0
    16s  variant tag (ASCII, NUL padded)
    f64  t
    u64  step
    payload: g_ij for i <= j in row-major (i, j) order, each a C-order grid of f64;
             then the pressure field (zeros for variants without pressure)
    8s   blake2b-64 digest of every preceding byte

Monitor and solver statistics that a resumed run needs live in a JSON sidecar
(``<path>.json``), outside the checksummed binary.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .mesh import Grid, MetricField

MAGIC = b"CBFCHKPT"
VERSION = 1
_DIGEST = 8


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    grid: Grid
    s0: float
    variant: str
    t: float
    step: int
    g: np.ndarray
    p: np.ndarray


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_DIGEST).digest()


def encode(ck: Checkpoint) -> bytes:
    grid = ck.grid
    n = grid.dim
    tag = ck.variant.encode("ascii")
    if len(tag) > 16:
        raise CheckpointError(f"variant tag {ck.variant!r} longer than 16 bytes")
    head = MAGIC + struct.pack(f"<II{n}Q{n}dd16sdQ", VERSION, n, *grid.sizes, *grid.periods,
                               ck.s0, tag, ck.t, ck.step)
    parts = [head]
    for i in range(n):
        for j in range(i, n):
            parts.append(np.ascontiguousarray(ck.g[i, j], dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(ck.p, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + _digest(body)


def decode(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 8 + _DIGEST or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if _digest(body) != digest:
        raise CheckpointError("checksum mismatch")
    version, n = struct.unpack_from("<II", body, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fmt = f"<{n}Q{n}dd16sdQ"
    off = 16
    vals = struct.unpack_from(fmt, body, off)
    off += struct.calcsize(fmt)
    sizes, periods = vals[:n], vals[n:2 * n]
    s0, tag, t, step = vals[2 * n:]
    grid = Grid(tuple(int(s) for s in sizes), tuple(periods))
    npts = grid.npoints
    count = n * (n + 1) // 2 + 1
    if len(body) - off != 8 * npts * count:
        raise CheckpointError("payload size does not match the header")
    flat = np.frombuffer(body, dtype="<f8", offset=off).reshape((count,) + grid.shape)
    g = np.empty((n, n) + grid.shape)
    k = 0
    for i in range(n):
        for j in range(i, n):
            g[i, j] = g[j, i] = flat[k]
            k += 1
    return Checkpoint(grid, s0, tag.rstrip(b"\0").decode("ascii"), t, int(step), g,
                      flat[k].astype(float))


def write(path, ck: Checkpoint, extra: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ck))
    tmp.replace(path)
    if extra is not None:
        Path(str(path) + ".json").write_text(json.dumps(extra, indent=1, sort_keys=True))


def read(path) -> tuple[Checkpoint, dict | None]:
    path = Path(path)
    ck = decode(path.read_bytes())
    side = Path(str(path) + ".json")
    extra = json.loads(side.read_text()) if side.exists() else None
    return ck, extra


def from_state(state) -> Checkpoint:
    p = state.p if state.p is not None else np.zeros(state.metric.grid.shape)
    return Checkpoint(state.metric.grid, state.s0, state.variant, state.t, state.step,
                      state.metric.g, p)


def sidecar(state, monitor) -> dict:
    return {"monitor": monitor.state_dict(), "solve": asdict(state.solve),
            "has_pressure": state.p is not None}


def metric_of(ck: Checkpoint) -> MetricField:
    return MetricField(ck.grid, ck.g)
