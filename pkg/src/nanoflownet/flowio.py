"""Middlebury ``.flo`` files, PGM/PPM images, flow colouring and EPE evaluation."""
from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .losses import endpoint_error

FLO_MAGIC = 202021.25
FLO_TAG = struct.pack("<f", FLO_MAGIC)  # b"PIEH"
MAX_FLOW_MAGNITUDE = 1e9


class FlowFormatError(ValueError):
    pass


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def validate_flow(flow: np.ndarray) -> np.ndarray:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FlowFormatError(f"flow must be (H, W, 2), got {flow.shape}")
    if not np.all(np.isfinite(flow)) or np.any(np.abs(flow) >= MAX_FLOW_MAGNITUDE):
        raise FlowFormatError("flow contains non-finite or sentinel-sized values")
    return flow


def write_flo(flow: np.ndarray) -> bytes:
    flow = validate_flow(flow)
    h, w = flow.shape[:2]
    return FLO_TAG + struct.pack("<ii", w, h) + flow.astype("<f4").tobytes()


def read_flo(data: bytes) -> np.ndarray:
    """Parse ``.flo`` bytes into a float32 ``(H, W, 2)`` array."""
    if len(data) < 12:
        raise FlowFormatError("truncated header")
    if data[:4] != FLO_TAG:
        raise FlowFormatError("bad magic: not a .flo file")
    w, h = struct.unpack("<ii", data[4:12])
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"invalid dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(data) < need:
        raise FlowFormatError(f"truncated payload: need {need} bytes, got {len(data)}")
    if len(data) > need:
        raise FlowFormatError("trailing bytes after payload")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


def save_flo(path, flow) -> None:
    atomic_write(path, write_flo(flow))


def load_flo(path) -> np.ndarray:
    return read_flo(Path(path).read_bytes())


# --------------------------------------------------------------------------
# netpbm


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(img: np.ndarray) -> bytes:
    """Binary P5 from a float image in [0, 1] (or uint8)."""
    a = img if img.dtype == np.uint8 else to_uint8(img)
    h, w = a.shape
    return f"P5\n{w} {h}\n255\n".encode() + a.tobytes()


def write_ppm(img: np.ndarray) -> bytes:
    a = img if img.dtype == np.uint8 else to_uint8(img)
    h, w, _ = a.shape
    return f"P6\n{w} {h}\n255\n".encode() + a.tobytes()


def _read_netpbm(data: bytes, magic: bytes):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise FlowFormatError(f"expected {magic!r} image, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FlowFormatError("only 8-bit netpbm images are supported")
    return w, h, data[pos + 1:]


def read_pgm(data: bytes) -> np.ndarray:
    """P5 bytes -> float image in [0, 1]."""
    w, h, payload = _read_netpbm(data, b"P5")
    return np.frombuffer(payload[:w * h], dtype=np.uint8).reshape(h, w) / 255.0


def read_ppm(data: bytes) -> np.ndarray:
    w, h, payload = _read_netpbm(data, b"P6")
    return np.frombuffer(payload[:w * h * 3], dtype=np.uint8).reshape(h, w, 3) / 255.0


# --------------------------------------------------------------------------
# colour wheel


def hsv_to_rgb(h, s, v):
    """Vectorized HSV -> RGB, all components in [0, 1]."""
    h = np.mod(h, 1.0) * 6.0
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros(np.shape(h) + (3,))
    for k, (r, g, b) in enumerate(choices):
        m = i == k
        rgb[..., 0] = np.where(m, r, rgb[..., 0])
        rgb[..., 1] = np.where(m, g, rgb[..., 1])
        rgb[..., 2] = np.where(m, b, rgb[..., 2])
    return rgb


def flow_hue(flow: np.ndarray) -> np.ndarray:
    """Hue in [0, 1): the flow direction ``atan2(v, u)`` mapped around the wheel."""
    return np.mod(np.arctan2(flow[..., 1], flow[..., 0]) / (2 * np.pi), 1.0)


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """RGB float image: hue from direction, saturation from relative magnitude.

    Zero flow is white; saturation reaches 1 at ``max_mag`` (defaults to the
    largest magnitude in the field).
    """
    mag = np.hypot(flow[..., 0], flow[..., 1])
    if max_mag is None:
        max_mag = float(mag.max()) if mag.size else 0.0
    sat = np.clip(mag / max_mag, 0.0, 1.0) if max_mag > 0 else np.zeros_like(mag)
    return hsv_to_rgb(flow_hue(flow), sat, np.ones_like(mag))


# --------------------------------------------------------------------------
# evaluation


def evaluate_epe(pred_dir, gt_dir, pattern: str = "*.flo"):
    """Per-frame and mean EPE over matching ``.flo`` files.

    Files are matched by name. Returns ``(rows, mean, csv_text)`` where rows
    are ``(name, epe)``.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = sorted(p.name for p in pred_dir.glob(pattern))
    gts = sorted(p.name for p in gt_dir.glob(pattern))
    if preds != gts:
        raise FlowFormatError(f"file lists differ: {len(preds)} predictions vs {len(gts)} ground truths")
    rows = []
    for name in preds:
        p, g = load_flo(pred_dir / name), load_flo(gt_dir / name)
        if p.shape != g.shape:
            raise FlowFormatError(f"{name}: shape {p.shape} vs {g.shape}")
        rows.append((name, endpoint_error(p.astype(float), g.astype(float))))
    mean = float(np.mean([r[1] for r in rows])) if rows else float("nan")
    buf = io.StringIO()
    wr = csv.writer(buf)
    wr.writerow(["frame", "epe"])
    for name, e in rows:
        wr.writerow([name, f"{e:.6f}"])
    wr.writerow(["mean", f"{mean:.6f}"])
    return rows, mean, buf.getvalue()
