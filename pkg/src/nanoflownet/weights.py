"""``NFNW`` binary tensor container.

Layout (little-endian)::

    b"NFNW" | u32 version | u32 count
    count x ( u32 name_len | utf-8 name | u8 dtype | u32 rank | rank x u32 dim | payload )
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NFNW"
VERSION = 1

DTYPE_TAGS = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("i1"),
    3: np.dtype("<i4"),
    4: np.dtype("<i8"),
    5: np.dtype("u1"),
}
TAG_OF = {dt: tag for tag, dt in DTYPE_TAGS.items()}


class WeightsFormatError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        tag = TAG_OF.get(np.dtype(dt))
        if tag is None:
            raise WeightsFormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BI", tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    return b"".join(out)


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise WeightsFormatError("bad magic: not an NFNW container")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise WeightsFormatError(f"unsupported container version {version}")
        pos = 12
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BI", data, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            dt = DTYPE_TAGS.get(tag)
            if dt is None:
                raise WeightsFormatError(f"unknown dtype tag {tag}")
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(data):
                raise WeightsFormatError(f"truncated payload for {name!r}")
            tensors[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize,
                                          offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise WeightsFormatError(f"truncated container: {exc}") from exc
    if pos != len(data):
        raise WeightsFormatError("trailing bytes after last tensor")
    return tensors


def save(path, tensors: dict[str, np.ndarray]) -> None:
    from .flowio import atomic_write

    atomic_write(path, dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def graph_tensors(graph) -> dict[str, np.ndarray]:
    """Checkpoint payload: parameters and batch-norm buffers."""
    t = {f"param/{k}": v for k, v in sorted(graph.params.items())}
    t.update({f"buffer/{k}": v for k, v in sorted(graph.buffers.items())})
    return t


def load_into_graph(graph, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
    """Copy checkpoint tensors into ``graph``; extra detail-head weights are ignored."""
    for k in list(graph.params):
        key = f"param/{k}"
        if key not in tensors:
            raise WeightsFormatError(f"checkpoint lacks parameter {k!r}")
        if tensors[key].shape != graph.params[k].shape:
            raise WeightsFormatError(f"shape mismatch for {k!r}")
        graph.params[k] = tensors[key].astype(np.float64)
    for k in list(graph.buffers):
        key = f"buffer/{k}"
        if key in tensors:
            graph.buffers[k] = tensors[key].astype(np.float64)
        elif strict:
            raise WeightsFormatError(f"checkpoint lacks buffer {k!r}")


def _meta(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8).copy()


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict, kind: str = "float") -> None:
    """NFNW file carrying its network config and kind (``float`` or ``int8``) as JSON bytes."""
    payload = {"meta/config": _meta(config), "meta/kind": _meta(kind)}
    payload.update(tensors)
    save(path, payload)


def load_checkpoint(path) -> tuple[dict, str, dict[str, np.ndarray]]:
    """Returns ``(config dict, kind, tensors)``."""
    t = load(path)
    try:
        config = json.loads(t.pop("meta/config").tobytes())
        kind = json.loads(t.pop("meta/kind").tobytes())
    except KeyError as exc:
        raise WeightsFormatError(f"{path}: not a checkpoint (missing {exc.args[0]})") from exc
    return config, kind, t
