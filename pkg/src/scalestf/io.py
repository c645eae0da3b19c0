"""Binary dataset (STFD) and checkpoint (STFC) formats, CSV/JSON helpers.

STFD layout (little-endian)::

    b"STFD" | u32 version=1 | u32 N | u32 T | u32 d_in
    | f32[T·N·d_in] in (t, n, c) order
    | optional: u32 edge_count, then edge_count × (u32 i, u32 j, f32 w)

STFC layout::

    b"STFC" | u32 version=1 | u32 config_len | config JSON (utf-8)
    | u32 n_arrays | per array: u32 name_len, name, u32 ndim, u32[ndim] shape, f64[...] data
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .data import SpatiotemporalSeries
from .errors import DataError
from .graphs import Graph
from .model import ModelConfig

STFD_MAGIC = b"STFD"
STFC_MAGIC = b"STFC"
VERSION = 1
_EDGE = np.dtype([("i", "<u4"), ("j", "<u4"), ("w", "<f4")])


def encode_dataset(series: SpatiotemporalSeries, graph: Graph | None = None) -> bytes:
    n, t, d = series.data.shape
    parts = [STFD_MAGIC, struct.pack("<4I", VERSION, n, t, d)]
    parts.append(np.ascontiguousarray(np.transpose(series.data, (1, 0, 2)), dtype="<f4").tobytes())
    if graph is not None:
        edges = np.array([(i, j, w) for i, j, w in graph.edges], dtype=_EDGE)
        parts.append(struct.pack("<I", len(edges)))
        parts.append(edges.tobytes())
    return b"".join(parts)


def write_dataset(path, series: SpatiotemporalSeries, graph: Graph | None = None) -> str:
    """Write an STFD file and return its sha256 content hash."""
    blob = encode_dataset(series, graph)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def decode_dataset(blob: bytes) -> tuple[SpatiotemporalSeries, Graph | None]:
    if blob[:4] != STFD_MAGIC:
        raise DataError("not an STFD dataset (bad magic)")
    version, n, t, d = struct.unpack_from("<4I", blob, 4)
    if version != VERSION:
        raise DataError(f"unsupported STFD version {version}")
    off = 20
    count = n * t * d
    end = off + 4 * count
    if len(blob) < end:
        raise DataError("truncated STFD data section")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(t, n, d)
    series = SpatiotemporalSeries(np.transpose(data, (1, 0, 2)).astype(np.float64))
    graph = None
    if len(blob) > end:
        (m,) = struct.unpack_from("<I", blob, end)
        edges = np.frombuffer(blob, dtype=_EDGE, count=m, offset=end + 4)
        graph = Graph(n, tuple((int(e["i"]), int(e["j"]), float(e["w"])) for e in edges))
    return series, graph


def read_dataset(path) -> tuple[SpatiotemporalSeries, Graph | None]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"dataset not found: {p}")
    return decode_dataset(p.read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset_csv(path, series: SpatiotemporalSeries) -> None:
    """Long-format mirror (t, node, channel, value) for inspection."""
    n, t, d = series.data.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node", "channel", "value"])
        for step in range(t):
            for node in range(n):
                for c in range(d):
                    w.writerow([step, node, c, repr(float(np.float32(series.data[node, step, c])))])


# ---------------------------------------------------------------- checkpoints


def write_checkpoint(path, cfg: ModelConfig, params: dict[str, np.ndarray]) -> None:
    conf = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    parts = [STFC_MAGIC, struct.pack("<II", VERSION, len(conf)), conf, struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    blob = p.read_bytes()
    if blob[:4] != STFC_MAGIC:
        raise DataError("not an STFC checkpoint (bad magic)")
    version, clen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DataError(f"unsupported STFC version {version}")
    off = 12
    cfg = ModelConfig.from_dict(json.loads(blob[off:off + clen].decode()))
    off += clen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return cfg, params


# ---------------------------------------------------------------- tables


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
