"""Synthetic crossroad scenes shared by the LiDAR simulator and the channel model.

A scene is a ground plane ``z = 0`` plus axis-aligned boxes (vehicles and
buildings).  The LiDAR point cloud is produced by casting rays against the
boxes and the ground; the propagation paths (line of sight plus specular
single bounces off nearby vehicles and building walls) are traced on the very same
geometry, which is what makes the LiDAR features informative about the
channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channel import ChannelPath, NoPropagationPath, steering_from_azimuth

SPEED_OF_LIGHT = 2.998e8
GROUND = -1
LABELS = ("vehicle", "building")


class SceneInfeasible(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    label: str = "vehicle"

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.lo) + np.asarray(self.hi)) / 2

    def contains(self, p, tol: float = 1e-9) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= np.asarray(self.lo) - tol) and np.all(p <= np.asarray(self.hi) + tol))

    def overlaps(self, other: "Box", gap: float = 0.0) -> bool:
        """Horizontal footprints closer than ``gap`` (boxes all stand on the ground)."""
        return all(self.lo[a] < other.hi[a] + gap and other.lo[a] < self.hi[a] + gap for a in (0, 1))


def _default_buildings() -> tuple[Box, ...]:
    # two street-canyon blocks per side, split by a cross street at x in [40, 50]
    return (
        Box((5.0, 13.0, 0.0), (40.0, 30.0, 20.0), "building"),
        Box((50.0, 13.0, 0.0), (95.0, 30.0, 25.0), "building"),
        Box((5.0, -30.0, 0.0), (40.0, -13.0, 15.0), "building"),
        Box((50.0, -30.0, 0.0), (95.0, -13.0, 22.0), "building"),
    )


@dataclass(frozen=True)
class SceneSpec:
    rng_seed: int = 0
    road_extent: tuple[float, float, float, float] = (8.0, 80.0, -9.0, 9.0)  # xmin, xmax, ymin, ymax
    n_vehicles: int = 8
    vehicle_dims_range: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (3.8, 1.7, 1.4), (5.2, 2.1, 1.9))  # (length, width, height) min / max
    building_boxes: tuple[Box, ...] = field(default_factory=_default_buildings)
    tx_position: tuple[float, float, float] = (0.0, 0.0, 5.0)
    rx_height: float = 1.0
    rx_vehicle_index: int = 0
    min_gap: float = 1.5
    max_attempts: int = 2000

    def __post_init__(self):
        if self.n_vehicles < 1:
            raise ValueError("need at least one vehicle (the receiver)")
        if not 0 <= self.rx_vehicle_index < self.n_vehicles:
            raise ValueError(f"rx_vehicle_index {self.rx_vehicle_index} out of range")
        xmin, xmax, ymin, ymax = self.road_extent
        if xmax <= xmin or ymax <= ymin:
            raise ValueError("empty road extent")


@dataclass(frozen=True)
class Scene:
    boxes: tuple[Box, ...]
    tx_position: tuple[float, float, float]
    rx_position: tuple[float, float, float]
    rx_box_index: int
    seed: int = 0

    @property
    def tx_height(self) -> float:
        return self.tx_position[2]

    @property
    def rx_height(self) -> float:
        return self.rx_position[2]

    def vehicle_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.boxes) if b.label == "vehicle"]

    def to_array(self) -> np.ndarray:
        """Row 0: tx xyz, rx xyz, rx box index; then one row per box: lo, hi, label code."""
        rows = [list(self.tx_position) + list(self.rx_position) + [self.rx_box_index]]
        rows += [list(b.lo) + list(b.hi) + [LABELS.index(b.label)] for b in self.boxes]
        return np.asarray(rows, dtype=np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray, seed: int = 0) -> "Scene":
        arr = np.asarray(arr, dtype=np.float64)
        head = arr[0]
        boxes = tuple(Box(tuple(map(float, r[:3])), tuple(map(float, r[3:6])), LABELS[int(r[6])]) for r in arr[1:])
        return cls(boxes=boxes, tx_position=tuple(map(float, head[:3])),
                   rx_position=tuple(map(float, head[3:6])), rx_box_index=int(head[6]), seed=seed)


@dataclass(frozen=True)
class LidarConfig:
    a_h: float = 0.36  # degrees
    f_up: float = 15.0  # degrees
    f_down: float = 25.0  # degrees, magnitude of the downward field of view
    M_b: int = 64
    max_range: float = 100.0
    mount_position: tuple[float, float, float] = (0.0, 0.0, 5.0)

    def __post_init__(self):
        ratio = 360.0 / self.a_h
        if abs(ratio - round(ratio)) > 1e-6:
            raise ValueError(f"360 / a_h = {ratio} is not an integer")
        if self.f_up + self.f_down <= 0:
            raise ValueError("vertical field of view must be positive")
        if self.M_b < 1:
            raise ValueError("need at least one beam")

    @property
    def w(self) -> int:
        return int(round(360.0 / self.a_h))

    @property
    def h(self) -> int:
        return self.M_b

    @property
    def fov(self) -> float:
        return self.f_up + self.f_down


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3) world coordinates
    hit_box_index: np.ndarray  # (n,) int, GROUND for ground returns
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask) -> "PointCloud":
        return PointCloud(self.points[mask], self.hit_box_index[mask], self.origin)

    def to_xyz(self, path) -> None:
        """ASCII export, one ``x y z label`` line per point."""
        with open(path, "w") as fh:
            for (x, y, z), lab in zip(self.points, self.hit_box_index):
                fh.write(f"{x:.6f} {y:.6f} {z:.6f} {int(lab)}\n")

    def to_array(self) -> np.ndarray:
        return np.column_stack([self.points, self.hit_box_index]).astype(np.float64)


def build_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.rng_seed)
    xmin, xmax, ymin, ymax = spec.road_extent
    dmin, dmax = (np.asarray(d, dtype=float) for d in spec.vehicle_dims_range)
    placed: list[Box] = []
    for v in range(spec.n_vehicles):
        for _ in range(spec.max_attempts):
            length, width, height = rng.uniform(dmin, dmax)
            along_x = rng.random() < 0.5
            sx, sy = (length, width) if along_x else (width, length)
            if sx > xmax - xmin or sy > ymax - ymin:
                continue
            cx = rng.uniform(xmin + sx / 2, xmax - sx / 2)
            cy = rng.uniform(ymin + sy / 2, ymax - sy / 2)
            box = Box((cx - sx / 2, cy - sy / 2, 0.0), (cx + sx / 2, cy + sy / 2, height), "vehicle")
            if any(box.overlaps(o, spec.min_gap) for o in placed):
                continue
            if any(box.overlaps(b) for b in spec.building_boxes):
                continue
            placed.append(box)
            break
        else:
            raise SceneInfeasible(
                f"scene infeasible: could not place vehicle {v + 1}/{spec.n_vehicles} "
                f"after {spec.max_attempts} attempts")
    boxes = tuple(placed) + tuple(spec.building_boxes)
    rx_box = boxes[spec.rx_vehicle_index]
    c = rx_box.center
    rx = (float(c[0]), float(c[1]), float(spec.rx_height))
    return Scene(boxes=boxes, tx_position=tuple(map(float, spec.tx_position)), rx_position=rx,
                 rx_box_index=spec.rx_vehicle_index, seed=spec.rng_seed)


def _box_arrays(boxes: Sequence[Box]) -> tuple[np.ndarray, np.ndarray]:
    if not boxes:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.array([b.lo for b in boxes], dtype=float), np.array([b.hi for b in boxes], dtype=float)


def ray_box_distances(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab-method ray/box distances, shape ``(n_rays, n_boxes)``; ``inf`` on a miss.

    Rays starting inside a box report the exit distance.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    if len(lo) == 0:
        return np.full((len(dirs), 0), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs  # (R, 3)
        t1 = (lo[None, :, :] - origins[:, None, :]) * inv[:, None, :]
        t2 = (hi[None, :, :] - origins[:, None, :]) * inv[:, None, :]
    # parallel to a slab: inside -> unbounded, outside -> miss
    par = (dirs == 0)[:, None, :]
    inside = (origins[:, None, :] >= lo[None]) & (origins[:, None, :] <= hi[None])
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    t_near = np.minimum(t1, t2).max(axis=2)
    t_far = np.maximum(t1, t2).min(axis=2)
    hit = (t_far >= np.maximum(t_near, 0.0)) & np.isfinite(t_far)
    t = np.where(t_near > 0, t_near, t_far)
    return np.where(hit, t, np.inf)


def lidar_rays(cfg: LidarConfig) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions for every (beam, azimuth bin), beams ordered bottom to top."""
    az = np.deg2rad((np.arange(cfg.w) + 0.5) * cfg.a_h)
    el = np.deg2rad(np.linspace(-cfg.f_down, cfg.f_up, cfg.M_b))
    E, Az = np.meshgrid(el, az, indexing="ij")
    dirs = np.stack([np.cos(E) * np.cos(Az), np.cos(E) * np.sin(Az), np.sin(E)], axis=-1).reshape(-1, 3)
    return dirs, np.stack([E.ravel(), Az.ravel()], axis=1)


def raycast_lidar(scene: Scene, cfg: LidarConfig) -> PointCloud:
    origin = np.asarray(cfg.mount_position, dtype=float)
    dirs, _ = lidar_rays(cfg)
    lo, hi = _box_arrays(scene.boxes)
    t_box = ray_box_distances(origin[None], dirs, lo, hi)
    if t_box.shape[1]:
        idx = np.argmin(t_box, axis=1)
        t_best = t_box[np.arange(len(dirs)), idx]
    else:
        idx = np.full(len(dirs), GROUND)
        t_best = np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
    ground_first = t_ground < t_best
    t = np.where(ground_first, t_ground, t_best)
    hit = np.where(ground_first, GROUND, idx)
    keep = np.isfinite(t) & (t <= cfg.max_range)
    pts = origin[None] + dirs[keep] * t[keep, None]
    return PointCloud(points=pts, hit_box_index=hit[keep].astype(np.int64), origin=origin)


def segment_blocked(p0, p1, boxes: Sequence[Box], skip: Sequence[int] = (), tol: float = 1e-9) -> bool:
    """True if the open segment ``p0 -> p1`` passes through any box not in ``skip``."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    d = p1 - p0
    keep = [i for i in range(len(boxes)) if i not in set(skip)]
    if not keep:
        return False
    lo, hi = _box_arrays([boxes[i] for i in keep])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - p0) / d
        t2 = (hi - p0) / d
    par = d == 0
    inside = (p0 >= lo) & (p0 <= hi)
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    t_near = np.minimum(t1, t2).max(axis=1)
    t_far = np.maximum(t1, t2).min(axis=1)
    return bool(np.any((t_near < t_far - tol) & (t_far > tol) & (t_near < 1 - tol)))


def two_ray_loss_db(distance, f_c: float, h_t: float, h_r: float):
    """Path loss ``40 lg d + 20 lg f_c - 20 lg(h_t h_r)`` with ``f_c`` in GHz."""
    return 40 * np.log10(distance) + 20 * np.log10(f_c) - 20 * np.log10(h_t * h_r)


def _specular_points(tx: np.ndarray, rx: np.ndarray, box: Box):
    """Specular reflection points on the vertical faces of ``box``.

    Faces are treated as tall enough to reflect at whatever height the
    mirrored ray crosses them; only the horizontal extent is checked.
    """
    out = []
    for axis in (0, 1):
        other = 1 - axis
        for c, outward in ((box.lo[axis], -1.0), (box.hi[axis], 1.0)):
            if outward * (tx[axis] - c) <= 0 or outward * (rx[axis] - c) <= 0:
                continue
            mirror = rx.copy()
            mirror[axis] = 2 * c - rx[axis]
            t = (c - tx[axis]) / (mirror[axis] - tx[axis])
            p = tx + t * (mirror - tx)
            if box.lo[other] <= p[other] <= box.hi[other]:
                out.append(p)
    return out


def derive_paths(scene: Scene, max_paths: int = 8, f_c: float = 28.0, bandwidth: float = 1e8,
                 scatter_radius: float = 10.0, building_reflections: bool = True,
                 synchronize: bool = True) -> list[ChannelPath]:
    """Trace the line-of-sight and single-bounce paths from the transmitter to the receiver.

    Reflectors are the vehicles whose centre lies within ``scatter_radius``
    of the receiver and, with ``building_reflections``, every building wall.

    Delays are in sampling intervals ``1 / bandwidth``.  With ``synchronize``
    the receiver is assumed timing-locked to the first arrival, so delays are
    measured relative to the shortest path.
    """
    tx = np.asarray(scene.tx_position, dtype=float)
    rx = np.asarray(scene.rx_position, dtype=float)
    rxb = scene.rx_box_index
    found = []  # (kind, length, first-hop point)
    if not segment_blocked(tx, rx, scene.boxes, skip=(rxb,)):
        found.append(("los", float(np.linalg.norm(rx - tx)), rx))
    bounces = []
    for i, box in enumerate(scene.boxes):
        if i == rxb:
            continue
        if box.label == "building" and not building_reflections:
            continue
        if box.label == "vehicle" and np.linalg.norm(box.center[:2] - rx[:2]) > scatter_radius:
            continue
        for p in _specular_points(tx, rx, box):
            if segment_blocked(tx, p, scene.boxes, skip=(i, rxb)):
                continue
            if segment_blocked(p, rx, scene.boxes, skip=(i, rxb)):
                continue
            bounces.append(("bounce", float(np.linalg.norm(p - tx) + np.linalg.norm(rx - p)), p))
    bounces.sort(key=lambda b: b[1])
    found = (found + bounces)[:max_paths]
    if not found:
        raise NoPropagationPath("no propagation path: line of sight blocked and no reflector")

    ts = 1.0 / bandwidth
    ref = min(f[1] for f in found) if synchronize else 0.0
    rng = np.random.default_rng([scene.seed, 0x9A7E])
    phases = rng.uniform(0.0, 2 * math.pi, size=len(found))
    paths = []
    for (kind, length, p), phi in zip(found, phases):
        d = p - tx
        psi = steering_from_azimuth(math.atan2(d[1], d[0]))
        amp = 10 ** (-two_ray_loss_db(length, f_c, scene.tx_height, scene.rx_height) / 20)
        tau = (length - ref) / SPEED_OF_LIGHT / ts
        paths.append(ChannelPath(alpha=complex(amp), theta=psi, tau=tau, phi=float(phi), kind=kind, length=length))
    return paths
