"""Synthetic optical-flow scenes with exact flow and motion-boundary ground truth.

A scene is a stack of textured layers: a full-frame background and a few
foreground blobs, each moving with its own affine motion about its centre.
Frame 0 shows every layer at rest; frame 1 is rendered by inverse-mapping
each pixel into every layer (front to back) so the ground-truth flow is
exact. Occluded background takes the occluder's flow, as in FlyingChairs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from . import flowio


@dataclass
class SyntheticCfg:
    height: int = 112
    width: int = 160
    min_objects: int = 1
    max_objects: int = 4
    max_displacement: float = 4.0
    # max |A - I| entry of the affine motions (rotation / zoom / shear)
    max_deformation: float = 0.03
    min_radius: float = 0.12  # fraction of the shorter image side
    max_radius: float = 0.3
    octaves: tuple[int, ...] = (16, 8, 4)  # value-noise cell sizes in px
    boundary_min_jump: float = 0.5

    def validate(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("image size must be positive")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("object count range is empty")
        if self.max_displacement < 0:
            raise ValueError("max_displacement must be >= 0")


@dataclass
class Texture:
    """Multi-octave value noise, evaluable at any real coordinate."""

    grids: list[np.ndarray]
    cells: tuple[int, ...]
    margin: float
    brightness: float
    contrast: float

    @classmethod
    def random(cls, rng: np.random.Generator, height, width, cells, margin):
        grids = []
        for c in cells:
            gh = int(np.ceil((height + 2 * margin) / c)) + 4
            gw = int(np.ceil((width + 2 * margin) / c)) + 4
            grids.append(rng.uniform(-1.0, 1.0, size=(gh, gw)))
        return cls(grids, tuple(cells), float(margin),
                   float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.25, 0.45)))

    def sample(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        acc = np.zeros(np.shape(y))
        amp, norm = 1.0, 0.0
        for grid, c in zip(self.grids, self.cells):
            coords = np.stack([(y + self.margin) / c + 1.0, (x + self.margin) / c + 1.0])
            acc += amp * map_coordinates(grid, coords, order=3, mode="nearest")
            norm += amp
            amp *= 0.5
        return np.clip(self.brightness + self.contrast * acc / norm, 0.0, 1.0)


@dataclass
class Layer:
    """One rigid-ish layer.

    The silhouette is a rotated super-ellipse (``radii=None`` means the
    layer covers the whole plane). A point ``p`` of frame 0 moves to
    ``p + deform @ (p - center) + translation`` in frame 1; vectors are
    ``(y, x)`` ordered.
    """

    texture: Texture
    center: np.ndarray
    translation: np.ndarray
    deform: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    radii: tuple[float, float] | None = None
    angle: float = 0.0
    power: float = 2.0

    def inside(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.radii is None:
            return np.ones(np.shape(y), dtype=bool)
        dy, dx = y - self.center[0], x - self.center[1]
        c, s = np.cos(self.angle), np.sin(self.angle)
        a = (c * dy + s * dx) / self.radii[0]
        b = (-s * dy + c * dx) / self.radii[1]
        return np.abs(a) ** self.power + np.abs(b) ** self.power <= 1.0

    def displacement(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Forward motion (frame 0 -> frame 1) as ``(..., 2)`` in (y, x)."""
        d = np.stack([y - self.center[0], x - self.center[1]], axis=-1)
        return d @ self.deform.T + self.translation

    def inverse_displacement(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Offset from a frame-1 point back to its frame-0 source."""
        a_inv = np.linalg.inv(np.eye(2) + self.deform)
        d = np.stack([y - self.center[0], x - self.center[1]], axis=-1)
        return d @ (a_inv - np.eye(2)).T - a_inv @ self.translation


@dataclass
class SyntheticSample:
    frame0: np.ndarray
    frame1: np.ndarray
    flow: np.ndarray  # (H, W, 2) as (u, v) = (dx, dy)
    boundary: np.ndarray  # (H, W) in {0, 1}
    seed: int
    labels0: np.ndarray | None = None
    labels1: np.ndarray | None = None


def _composite(layers: list[Layer], y: np.ndarray, x: np.ndarray, inverse: bool):
    """Front-to-back painter's algorithm. Returns (image, label map, source coords)."""
    img = np.zeros(y.shape)
    labels = np.full(y.shape, -1, dtype=int)
    for li in range(len(layers) - 1, -1, -1):
        layer = layers[li]
        todo = labels < 0
        if not todo.any():
            break
        yy, xx = y[todo], x[todo]
        if inverse:
            off = layer.inverse_displacement(yy, xx)
            yy, xx = yy + off[:, 0], xx + off[:, 1]
        hit = layer.inside(yy, xx)
        idx = np.flatnonzero(todo)[hit]
        img.flat[idx] = layer.texture.sample(yy[hit], xx[hit])
        labels.flat[idx] = li
    return img, labels


def motion_boundaries(flow: np.ndarray, labels: np.ndarray, min_jump: float = 0.5) -> np.ndarray:
    """Pixels on either side of a layer edge across which the flow jumps."""
    out = np.zeros(labels.shape, dtype=bool)
    for axis in (0, 1):
        a = [slice(None)] * 2
        b = [slice(None)] * 2
        a[axis], b[axis] = slice(None, -1), slice(1, None)
        a, b = tuple(a), tuple(b)
        jump = np.hypot(*(flow[a] - flow[b]).transpose(2, 0, 1)) > min_jump
        edge = (labels[a] != labels[b]) & jump
        out[a] |= edge
        out[b] |= edge
    return out.astype(np.float64)


def render_scene(layers: list[Layer], height: int, width: int, min_jump: float = 0.5,
                 seed: int = 0) -> SyntheticSample:
    """Render a scene; ``layers[0]`` is the back-most (usually the background)."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    frame0, labels0 = _composite(layers, y, x, inverse=False)
    frame1, labels1 = _composite(layers, y, x, inverse=True)
    flow = np.zeros((height, width, 2))
    for li, layer in enumerate(layers):
        m = labels0 == li
        d = layer.displacement(y[m], x[m])
        flow[m, 0], flow[m, 1] = d[:, 1], d[:, 0]
    boundary = motion_boundaries(flow, labels0, min_jump)
    return SyntheticSample(frame0, frame1, flow, boundary, seed, labels0, labels1)


def _random_motion(rng, max_def):
    return rng.uniform(-max_def, max_def, size=(2, 2)), rng.uniform(-1.0, 1.0, size=2)


def random_layers(cfg: SyntheticCfg, rng: np.random.Generator) -> list[Layer]:
    h, w = cfg.height, cfg.width
    margin = cfg.max_displacement + 8.0
    short = min(h, w)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    deform, trans = _random_motion(rng, cfg.max_deformation)
    layers = [Layer(Texture.random(rng, h, w, cfg.octaves, margin), center, trans, deform)]
    for _ in range(int(rng.integers(cfg.min_objects, cfg.max_objects + 1))):
        r0 = rng.uniform(cfg.min_radius, cfg.max_radius) * short
        r1 = rng.uniform(cfg.min_radius, cfg.max_radius) * short
        c = np.array([rng.uniform(0, h - 1), rng.uniform(0, w - 1)])
        deform, trans = _random_motion(rng, cfg.max_deformation)
        layers.append(Layer(Texture.random(rng, h, w, cfg.octaves, margin), c, trans, deform,
                            (r0, r1), float(rng.uniform(0, np.pi)), float(rng.uniform(1.5, 4.0))))
    # scale every motion so the largest displacement over the frame hits the cap
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    for layer in layers:
        peak = np.abs(layer.displacement(y, x)).max()
        target = cfg.max_displacement * rng.uniform(0.3, 1.0)
        k = target / peak if peak > 0 else 0.0
        layer.deform = layer.deform * k
        layer.translation = layer.translation * k
    return layers


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_sample(cfg: SyntheticCfg, seed: int, index: int = 0) -> SyntheticSample:
    s = sample_seed(seed, index)
    rng = np.random.default_rng(s)
    return render_scene(random_layers(cfg, rng), cfg.height, cfg.width, cfg.boundary_min_jump, s)


def generate_synthetic(count: int, cfg: SyntheticCfg | None = None, seed: int = 0) -> list[SyntheticSample]:
    if count < 0:
        raise ValueError("sample count must be >= 0")
    cfg = cfg or SyntheticCfg()
    cfg.validate()
    return [generate_sample(cfg, seed, i) for i in range(count)]


def backwarp(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample ``img`` at ``p + flow(p)`` (bilinear, edge-clamped)."""
    h, w = img.shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return map_coordinates(img, [y + flow[..., 1], x + flow[..., 0]], order=1, mode="nearest")


def non_occluded(sample: SyntheticSample) -> np.ndarray:
    """Pixels whose frame-0 layer is still visible around ``p + flow`` in frame 1."""
    h, w = sample.labels0.shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    ty, tx = y + sample.flow[..., 1], x + sample.flow[..., 0]
    ok = (ty >= 0) & (ty <= h - 1) & (tx >= 0) & (tx <= w - 1)
    y0 = np.clip(np.floor(ty).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(tx).astype(int), 0, w - 1)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        ok &= sample.labels1[yy, xx] == sample.labels0
    return ok


def photometric_error(sample: SyntheticSample) -> float:
    """Mean |frame0 - frame1(p + flow)| over non-occluded pixels."""
    m = non_occluded(sample)
    return float(np.abs(sample.frame0 - backwarp(sample.frame1, sample.flow))[m].mean())


# --------------------------------------------------------------------------
# on-disk layout


def save_dataset(samples: list[SyntheticSample], out_dir, cfg: SyntheticCfg | None = None, seed=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"{i:06d}"
        names = {"frame0": f"{stem}_img0.pgm", "frame1": f"{stem}_img1.pgm",
                 "flow": f"{stem}_flow.flo", "boundary": f"{stem}_mb.pgm"}
        flowio.atomic_write(out / names["frame0"], flowio.write_pgm(s.frame0))
        flowio.atomic_write(out / names["frame1"], flowio.write_pgm(s.frame1))
        flowio.save_flo(out / names["flow"], s.flow)
        flowio.atomic_write(out / names["boundary"], flowio.write_pgm(s.boundary))
        entries.append({"index": i, "seed": s.seed, **names})
    manifest = {"count": len(samples), "seed": seed,
                "config": None if cfg is None else {k: (list(v) if isinstance(v, tuple) else v)
                                                    for k, v in cfg.__dict__.items()},
                "samples": entries}
    flowio.atomic_write(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return out / "manifest.json"


def load_dataset(data_dir) -> list[SyntheticSample]:
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    samples = []
    for e in manifest["samples"]:
        samples.append(SyntheticSample(
            flowio.read_pgm((d / e["frame0"]).read_bytes()),
            flowio.read_pgm((d / e["frame1"]).read_bytes()),
            flowio.load_flo(d / e["flow"]).astype(np.float64),
            (flowio.read_pgm((d / e["boundary"]).read_bytes()) > 0.5).astype(np.float64),
            int(e["seed"])))
    return samples
