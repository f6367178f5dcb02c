"""2.5D world, kinematic vehicle and closed-loop flow-balance episodes.

World frame: x north, y east, heading psi measured from x toward y, so a
positive yaw rate turns right. Camera frame: X right, Y down, Z forward.
Walls and cylinders are infinitely tall, so depth is constant per column.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .control import (CONTROL_DT, ControllerConfig, ControllerState, flow_balance_error,
                      oscillation_offset, oscillation_setpoint, yaw_rate)
from .flowio import atomic_write

VEHICLE_RADIUS = 0.06
HOVER_ALTITUDE = 1.0
CEILING = 2.5
AVOID_RADIUS = 2.0
AVOID_TURN = math.radians(30.0)


class WorldError(ValueError):
    pass


# --------------------------------------------------------------------------
# world


@dataclass
class World:
    enclosure: list[tuple[float, float]]
    cylinders: list[tuple[float, float, float]] = field(default_factory=list)
    walls: list[tuple[float, float, float, float]] = field(default_factory=list)
    texture_seed: int = 0
    start: tuple[float, float, float] = (0.0, 0.0, 0.0)  # x, y, psi
    name: str = "world"

    def validate(self) -> None:
        if len(self.enclosure) < 3:
            raise WorldError("enclosure needs at least 3 vertices")
        for cx, cy, r in self.cylinders:
            if r <= 0:
                raise WorldError("cylinder radius must be positive")
        x, y, _ = self.start
        if not self.inside(x, y):
            raise WorldError("start pose lies outside the enclosure")
        if self.clearance(x, y) < VEHICLE_RADIUS:
            raise WorldError("start pose is in contact with an obstacle")

    # geometry tables ---------------------------------------------------
    def segments(self, include_enclosure: bool = True) -> np.ndarray:
        segs = []
        if include_enclosure:
            pts = self.enclosure
            segs += [(*pts[i], *pts[(i + 1) % len(pts)]) for i in range(len(pts))]
        segs += [tuple(w) for w in self.walls]
        return np.array(segs, dtype=np.float64).reshape(-1, 4)

    def circles(self) -> np.ndarray:
        return np.array(self.cylinders, dtype=np.float64).reshape(-1, 3)

    def inside(self, x: float, y: float) -> bool:
        """Even-odd point-in-polygon test for the enclosure."""
        pts = self.enclosure
        c = False
        for i in range(len(pts)):
            x1, y1 = pts[i]
            x2, y2 = pts[(i + 1) % len(pts)]
            if (y1 > y) != (y2 > y) and x < x1 + (y - y1) * (x2 - x1) / (y2 - y1):
                c = not c
        return c

    def obstacle_distances(self, x: float, y: float) -> np.ndarray:
        """Surface distance to each cylinder and wall panel (enclosure excluded)."""
        d = [math.hypot(x - cx, y - cy) - r for cx, cy, r in self.cylinders]
        d += [_point_segment_distance(x, y, *w) for w in self.walls]
        return np.array(d, dtype=np.float64)

    def clearance(self, x: float, y: float) -> float:
        d = [_point_segment_distance(x, y, *s) for s in self.segments()]
        d += [math.hypot(x - cx, y - cy) - r for cx, cy, r in self.cylinders]
        return min(d)

    def mirrored(self) -> "World":
        """Reflection across the x axis (y -> -y, psi -> -psi)."""
        return World([(x, -y) for x, y in self.enclosure],
                     [(x, -y, r) for x, y, r in self.cylinders],
                     [(x1, -y1, x2, -y2) for x1, y1, x2, y2 in self.walls],
                     self.texture_seed, (self.start[0], -self.start[1], -self.start[2]),
                     self.name + "-mirrored")

    # serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["enclosure"] = [list(p) for p in self.enclosure]
        d["cylinders"] = [list(c) for c in self.cylinders]
        d["walls"] = [list(w) for w in self.walls]
        d["start"] = list(self.start)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        try:
            w = cls([tuple(map(float, p)) for p in d["enclosure"]],
                    [tuple(map(float, c)) for c in d.get("cylinders", [])],
                    [tuple(map(float, s)) for s in d.get("walls", [])],
                    int(d.get("texture_seed", 0)),
                    tuple(map(float, d.get("start", (0.0, 0.0, 0.0)))),
                    str(d.get("name", "world")))
        except (KeyError, TypeError, ValueError) as exc:
            raise WorldError(f"malformed world config: {exc}") from exc
        w.validate()
        return w

    def save(self, path) -> None:
        atomic_write(path, json.dumps(self.to_dict(), indent=2).encode())

    @classmethod
    def load(cls, path) -> "World":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _point_segment_distance(px, py, x1, y1, x2, y2) -> float:
    dx, dy = x2 - x1, y2 - y1
    L2 = dx * dx + dy * dy
    t = 0.0 if L2 == 0 else min(1.0, max(0.0, ((px - x1) * dx + (py - y1) * dy) / L2))
    return math.hypot(px - (x1 + t * dx), py - (y1 + t * dy))


def _square(half: float) -> list[tuple[float, float]]:
    return [(-half, -half), (half, -half), (half, half), (-half, half)]


def open_world(texture_seed: int = 0, start=(0.0, 0.0, 0.0)) -> World:
    """8 x 8 m room with obstacles only along its outline."""
    cyl = []
    for k in range(-3, 4, 2):
        for s in (-3.4, 3.4):
            cyl.append((float(k), s, 0.25))
            cyl.append((s, float(k), 0.25))
    return World(_square(4.0), cyl, [], texture_seed, start, "open")


def cluttered_world(texture_seed: int = 0, start=(0.0, 0.0, 0.0), layout_seed: int = 1) -> World:
    """10 x 10 m room with a jittered 4 x 4 grid of cylinders 2.5 m apart."""
    rng = np.random.default_rng([layout_seed, 71])
    cyl = []
    for a in np.arange(-3.75, 5.0, 2.5):
        for b in np.arange(-3.75, 5.0, 2.5):
            jx, jy = rng.uniform(-0.5, 0.5, size=2)
            cyl.append((float(a + jx), float(b + jy), float(rng.uniform(0.2, 0.35))))
    w = World(_square(5.0), cyl, [], texture_seed, start, "cluttered")
    return w if w.clearance(*start[:2]) >= VEHICLE_RADIUS else random_start(w, layout_seed)


WORLD_PRESETS = {"open": open_world, "cluttered": cluttered_world}


def random_start(world: World, seed: int, margin: float = 1.0, attempts: int = 1000) -> World:
    """Copy of ``world`` with a seeded start pose at least ``margin`` from any surface."""
    rng = np.random.default_rng([seed, 31])
    pts = np.array(world.enclosure)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    for _ in range(attempts):
        x, y = rng.uniform(lo, hi)
        psi = rng.uniform(-math.pi, math.pi)
        if world.inside(x, y) and world.clearance(x, y) >= margin:
            return replace(world, start=(float(x), float(y), float(psi)))
    raise WorldError("no admissible start pose found")


# --------------------------------------------------------------------------
# camera and raycasting


@dataclass(frozen=True)
class CameraModel:
    fov: float = math.radians(87.0)
    height: int = 112
    width: int = 160

    @property
    def focal(self) -> float:
        return (self.width / 2.0) / math.tan(self.fov / 2.0)

    def column_x(self) -> np.ndarray:
        return np.arange(self.width) + 0.5 - self.width / 2.0

    def row_y(self) -> np.ndarray:
        return np.arange(self.height) + 0.5 - self.height / 2.0

    def column_angles(self) -> np.ndarray:
        """Ray bearing of each column relative to the heading (positive = right)."""
        return np.arctan(self.column_x() / self.focal)


def _ray_hits(world: World, x: float, y: float, angles: np.ndarray):
    """Range and hit surface per ray: ``(t, surface_index, surface_param)``."""
    dx, dy = np.cos(angles), np.sin(angles)
    n = angles.size
    best = np.full(n, np.inf)
    surf = np.full(n, -1)
    param = np.zeros(n)
    segs = world.segments()
    for k, (x1, y1, x2, y2) in enumerate(segs):
        ex, ey = x2 - x1, y2 - y1
        ax, ay = x1 - x, y1 - y
        den = dx * ey - dy * ex
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (ax * ey - ay * ex) / den
            s = (ax * dy - ay * dx) / den
        ok = (den != 0) & (t > 0) & (s >= 0) & (s <= 1) & (t < best)
        best = np.where(ok, t, best)
        surf = np.where(ok, k, surf)
        param = np.where(ok, s * math.hypot(ex, ey), param)
    for k, (cx, cy, r) in enumerate(world.circles()):
        ox, oy = x - cx, y - cy
        b = ox * dx + oy * dy
        c = ox * ox + oy * oy - r * r
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t = np.where(-b - root > 0, -b - root, -b + root)
        ok = (disc >= 0) & (t > 0) & (t < best)
        hx, hy = x + t * dx - cx, y + t * dy - cy
        best = np.where(ok, t, best)
        surf = np.where(ok, len(segs) + k, surf)
        param = np.where(ok, r * np.arctan2(hy, hx), param)
    return best, surf, param


def raycast_depth(world: World, pose: tuple[float, float, float], camera: CameraModel = CameraModel()) -> np.ndarray:
    """Planar depth ``Z`` (along the optical axis) per image column."""
    x, y, psi = pose
    if not world.inside(x, y):
        raise WorldError("pose lies outside the enclosure")
    theta = camera.column_angles()
    t, _, _ = _ray_hits(world, x, y, psi + theta)
    if not np.all(np.isfinite(t)):
        raise WorldError("ray escaped the enclosure")
    return t * np.cos(theta)


# --------------------------------------------------------------------------
# motion field


def synthesize_flow(depth: np.ndarray, ego: tuple[float, float, float, float],
                    camera: CameraModel = CameraModel(), dt: float = CONTROL_DT,
                    rotation: bool = True) -> np.ndarray:
    """Pinhole motion field ``(H, W, 2)`` in pixels per frame.

    ``ego`` is ``(forward, right, up, yaw_rate)`` in m/s and rad/s. With
    ``rotation=False`` only the depth-dependent translational part is
    returned, as after gyro-based derotation.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (camera.width,):
        raise ValueError(f"expected {camera.width} column depths, got {depth.shape}")
    if np.any(depth <= 0):
        raise ValueError("depths must be positive")
    vf, vr, vu, wz = ego
    f = camera.focal
    x = camera.column_x()[None, :]
    y = camera.row_y()[:, None]
    tx, ty, tz = vr, -vu, vf
    inv_z = 1.0 / depth[None, :]
    u = (-f * tx + x * tz) * inv_z + 0.0 * y
    v = (-f * ty + y * tz) * inv_z
    if rotation:
        u = u - (f + x * x / f) * wz
        v = v - (x * y / f) * wz
    return np.stack([u, v], axis=-1) * dt


def motion_field_point(x: float, y: float, z: float, ego, f: float) -> tuple[float, float]:
    """Instantaneous motion field at one image point (pixels per second)."""
    vf, vr, vu, wz = ego
    tx, ty, tz = vr, -vu, vf
    return (-f * tx + x * tz) / z - (f + x * x / f) * wz, (-f * ty + y * tz) / z - (x * y / f) * wz


# --------------------------------------------------------------------------
# rendering


def _texture(seed: int, surface: np.ndarray, s: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Smooth procedural pattern indexed by surface id, arc position and height."""
    rng = np.random.default_rng([seed, 97])
    freqs = rng.uniform(2.0, 9.0, size=(6, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(6,))
    offset = (surface.astype(np.float64) * 1.618)[None, :]
    out = np.zeros(np.broadcast(s, z).shape)
    for (fs, fz), ph in zip(freqs, phases):
        out += np.sin(fs * (s + offset) + ph) * np.cos(fz * z + 0.5 * ph)
    return 0.5 + 0.08 * out


def render_frame(world: World, pose: tuple[float, float, float], altitude: float = HOVER_ALTITUDE,
                 camera: CameraModel = CameraModel()) -> np.ndarray:
    """Grayscale ``(H, W)`` image in ``[0, 1]``."""
    x, y, psi = pose
    theta = camera.column_angles()
    t, surf, s = _ray_hits(world, x, y, psi + theta)
    depth = t * np.cos(theta)
    f = camera.focal
    zw = altitude - camera.row_y()[:, None] * depth[None, :] / f
    img = _texture(world.texture_seed, surf, s[None, :], zw)
    img = img / (1.0 + 0.15 * depth[None, :])
    floor = zw < 0
    ceil = zw > CEILING
    img = np.where(floor, 0.2 + 0.05 * np.tanh(depth)[None, :], img)
    img = np.where(ceil, 0.85, img)
    return np.clip(img, 0.0, 1.0)


def render_frames(world: World, pose0, pose1, camera: CameraModel = CameraModel(),
                  altitude0: float = HOVER_ALTITUDE, altitude1: float | None = None):
    a1 = altitude0 if altitude1 is None else altitude1
    return render_frame(world, pose0, altitude0, camera), render_frame(world, pose1, a1, camera)


# --------------------------------------------------------------------------
# episodes


@dataclass
class VehicleState:
    x: float
    y: float
    z: float
    psi: float
    speed: float
    vz: float = 0.0
    t: float = 0.0


@dataclass
class EpisodeConfig:
    max_time: float = 120.0
    dt: float = CONTROL_DT
    flow_source: str = "analytic"  # analytic | network
    derotate: bool = True
    flow_noise: float = 0.0  # px, Gaussian, seeded
    seed: int = 0
    camera: CameraModel = field(default_factory=CameraModel)

    def validate(self) -> None:
        if self.max_time <= 0 or self.dt <= 0:
            raise ValueError("max_time and dt must be positive")
        if self.flow_source not in ("analytic", "network"):
            raise ValueError("flow_source must be 'analytic' or 'network'")
        if self.flow_noise < 0:
            raise ValueError("flow_noise must be >= 0")


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    psi: np.ndarray
    e_rl: np.ndarray
    yaw_rate: np.ndarray
    collision: np.ndarray
    world: World

    @property
    def collided(self) -> bool:
        return bool(self.collision.any())

    @property
    def duration(self) -> float:
        return float(self.t[-1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["t", "x", "y", "z", "psi", "e_rl", "yaw_rate", "collision"])
        for row in zip(self.t, self.x, self.y, self.z, self.psi, self.e_rl, self.yaw_rate, self.collision):
            w.writerow([repr(float(v)) for v in row[:7]] + [int(row[7])])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        atomic_write(path, self.to_csv().encode())

    def plot(self, size: int = 400) -> np.ndarray:
        """Top-view RGB raster of the world and the flown path."""
        pts = np.array(self.world.enclosure)
        lo, hi = pts.min(axis=0) - 0.2, pts.max(axis=0) + 0.2
        scale = (size - 1) / float(np.max(hi - lo))
        img = np.full((size, size, 3), 255, dtype=np.uint8)

        def pix(px, py):
            # north up, east right
            return (np.clip(((hi[0] - px) * scale).astype(int), 0, size - 1),
                    np.clip(((py - lo[1]) * scale).astype(int), 0, size - 1))

        def line(x1, y1, x2, y2, colour):
            n = int(max(abs(x2 - x1), abs(y2 - y1)) * scale * 2) + 2
            r, c = pix(np.linspace(x1, x2, n), np.linspace(y1, y2, n))
            img[r, c] = colour

        for x1, y1, x2, y2 in self.world.segments():
            line(x1, y1, x2, y2, (0, 0, 0))
        for cx, cy, rad in self.world.cylinders:
            a = np.linspace(0, 2 * np.pi, 200)
            r, c = pix(cx + rad * np.cos(a), cy + rad * np.sin(a))
            img[r, c] = (90, 90, 90)
        for i in range(len(self.t) - 1):
            line(self.x[i], self.y[i], self.x[i + 1], self.y[i + 1], (200, 30, 30))
        r, c = pix(self.x[:1], self.y[:1])
        img[max(r[0] - 2, 0):r[0] + 3, max(c[0] - 2, 0):c[0] + 3] = (30, 30, 200)
        return img

    def save_plot(self, path, size: int = 400) -> None:
        from .flowio import write_ppm

        atomic_write(path, write_ppm(self.plot(size)))


def run_episode(world: World, controller: ControllerConfig = ControllerConfig(),
                episode: EpisodeConfig = EpisodeConfig(), network=None) -> Trajectory:
    """Fly until collision or ``max_time``.

    Each step observes the flow produced by the previous step's motion,
    forms the left/right error, commands a yaw rate and integrates the
    kinematic vehicle. ``network`` is a flow graph (network-in-the-loop
    mode) taking stacked grayscale frames at the camera resolution.
    """
    world.validate()
    controller.validate()
    episode.validate()
    if episode.flow_source == "network" and network is None:
        raise ValueError("network flow source requires a graph")
    cam = episode.camera
    dt = episode.dt
    rng = np.random.default_rng([episode.seed, 53])
    x, y, psi = world.start
    st = VehicleState(x, y, HOVER_ALTITUDE, psi, controller.forward_velocity)
    cstate = ControllerState()
    cmd = 0.0
    prev_pose, prev_alt = (x, y, psi), st.z
    rows = [(0.0, x, y, st.z, psi, 0.0, 0.0, False)]
    n_steps = int(math.ceil(episode.max_time / dt - 1e-9))
    for k in range(1, n_steps + 1):
        # integrate the motion commanded at the previous step
        st.vz = oscillation_setpoint(st.t, controller)
        st.psi += cmd * dt
        st.x += st.speed * math.cos(st.psi) * dt
        st.y += st.speed * math.sin(st.psi) * dt
        st.t = k * dt
        st.z = max(0.0, HOVER_ALTITUDE + oscillation_offset(st.t, controller))
        collided = world.clearance(st.x, st.y) < VEHICLE_RADIUS or not world.inside(st.x, st.y)
        if collided:
            rows.append((st.t, st.x, st.y, st.z, st.psi, 0.0, 0.0, True))
            break
        pose = (st.x, st.y, st.psi)
        if episode.flow_source == "analytic":
            depth = raycast_depth(world, pose, cam)
            flow = synthesize_flow(depth, (st.speed, 0.0, st.vz, cmd), cam, dt,
                                   rotation=not episode.derotate)
        else:
            from .stdc import stack_frames

            f0, f1 = render_frames(world, prev_pose, pose, cam, prev_alt, st.z)
            flow = network.forward(stack_frames(f0[None, ..., None], f1[None, ..., None]))["flow"][0]
            if episode.derotate:
                flow = flow - synthesize_flow(np.ones(cam.width), (0.0, 0.0, 0.0, cmd), cam, dt)
        if episode.flow_noise > 0:
            flow = flow + rng.normal(0.0, episode.flow_noise, flow.shape)
        e = flow_balance_error(flow, controller.center_weighting, controller.reduction)
        cmd, cstate = yaw_rate(e, cstate, dt, controller)
        prev_pose, prev_alt = pose, st.z
        rows.append((st.t, st.x, st.y, st.z, st.psi, e, cmd, False))
    cols = list(zip(*rows))
    return Trajectory(*(np.array(c, dtype=np.float64) for c in cols[:7]),
                      np.array(cols[7], dtype=bool), world)


def count_avoidances(traj: Trajectory, radius: float = AVOID_RADIUS, min_turn: float = AVOID_TURN) -> int:
    """Completed obstacle encounters with a heading change of at least ``min_turn``.

    An encounter is a contiguous interval during which one obstacle is the
    nearest one within ``radius``; the heading change is the largest
    deviation from the heading at entry. Encounters ending in contact and
    any interval still open at the end of the run do not count.
    """
    world = traj.world
    if not world.cylinders and not world.walls:
        return 0
    count = 0
    current, entry_psi, max_dev = -1, 0.0, 0.0
    psi = np.unwrap(traj.psi)
    for i in range(len(traj.t)):
        if traj.collision[i]:
            return count
        d = world.obstacle_distances(traj.x[i], traj.y[i])
        k = int(np.argmin(d))
        near = k if d[k] <= radius else -1
        if near != current:
            if current >= 0 and max_dev >= min_turn:
                count += 1
            current, entry_psi, max_dev = near, psi[i], 0.0
        elif current >= 0:
            max_dev = max(max_dev, abs(psi[i] - entry_psi))
    return count
