"""LiDAR processing: ground removal, DBSCAN clustering, receiver/scatterer
labelling, spherical range-image projection and the three-channel
signal-propagation feature image (range, fading labels, path loss)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .channel import steering_from_azimuth
from .scene import GROUND, LidarConfig, PointCloud, Scene, two_ray_loss_db

NOISE = -1
LABEL_OTHER, LABEL_SCATTERER, LABEL_RECEIVER = 0, 1, 2


class ReceiverNotDetected(RuntimeError):
    pass


@dataclass
class ClusterLabels:
    assignment: np.ndarray
    receiver_set: np.ndarray
    scatterer_set: np.ndarray
    theta_k: float
    receiver_azimuth: float = float("nan")
    receiver_centroid: np.ndarray | None = None

    def point_labels(self, n: int) -> np.ndarray:
        lab = np.full(n, LABEL_OTHER, dtype=np.int64)
        lab[self.scatterer_set] = LABEL_SCATTERER
        lab[self.receiver_set] = LABEL_RECEIVER
        return lab


@dataclass
class RangeImage:
    pixels: np.ndarray  # (h, w) range in metres, 0 = empty
    point_index: np.ndarray  # (h, w) index of the winning point, -1 = empty
    cfg: LidarConfig


@dataclass
class SpFeatureImage:
    data: np.ndarray  # (3, h, w)


def filter_ground(pc: PointCloud, z_tol: float = 0.2) -> PointCloud:
    if z_tol <= 0:
        raise ValueError("z_tol must be positive")
    keep = (np.abs(pc.points[:, 2]) > z_tol) & (pc.hit_box_index != GROUND)
    return pc.subset(keep)


def dbscan(points, eps: float = 1.0, min_pts: int = 8) -> np.ndarray:
    """Density-based clustering; returns a cluster id per point, ``NOISE`` for noise.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``.  The result matches the classic sequential algorithm
    visiting points in index order: clusters are the connected components of
    the core-point graph numbered by their lowest core index, and a border
    point joins the lowest-numbered cluster among its core neighbours.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=float)
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(pts).query_pairs(r=eps, output_type="ndarray")
    i, j = pairs[:, 0], pairs[:, 1]
    degree = np.bincount(np.concatenate([i, j]), minlength=n) + 1
    core = degree >= min_pts

    labels = np.full(n, NOISE, dtype=np.int64)
    cc = core[i] & core[j]
    graph = coo_matrix((np.ones(cc.sum()), (i[cc], j[cc])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    core_idx = np.flatnonzero(core)
    if len(core_idx) == 0:
        return labels
    # renumber components by their first core point
    first = {}
    for p in core_idx:
        first.setdefault(comp[p], len(first))
    labels[core_idx] = [first[comp[p]] for p in core_idx]

    # border points: core neighbour with the smallest cluster id
    src = np.concatenate([i, j])
    dst = np.concatenate([j, i])
    m = core[src] & ~core[dst]
    if m.any():
        border = np.full(n, np.iinfo(np.int64).max)
        np.minimum.at(border, dst[m], labels[src[m]])
        hit = border != np.iinfo(np.int64).max
        labels[hit] = border[hit]
    return labels


def label_clusters(pc: PointCloud, assignment: np.ndarray, scene: Scene, rho: float = 10.0,
                   rho_match: float = 5.0, max_vehicle_extent: float = 7.0,
                   max_vehicle_height: float = 3.0) -> ClusterLabels:
    """Pick the receiver cluster and nearby vehicle clusters (potential scatterers).

    Distances are horizontal.  A cluster counts as a vehicle when its
    footprint and height fit ``max_vehicle_extent`` / ``max_vehicle_height``.
    """
    ids = [c for c in np.unique(assignment) if c != NOISE]
    if not ids:
        raise ReceiverNotDetected("receiver not detected: no clusters")
    pts = pc.points
    rx = np.asarray(scene.rx_position, dtype=float)
    cents = np.array([pts[assignment == c].mean(axis=0) for c in ids])
    dist = np.linalg.norm(cents[:, :2] - rx[None, :2], axis=1)
    r = int(np.argmin(dist))
    if dist[r] > rho_match:
        raise ReceiverNotDetected(f"receiver not detected: nearest cluster {dist[r]:.2f} m away")
    rx_id = ids[r]
    rx_cent = cents[r]
    scatterers = []
    for c, cent in zip(ids, cents):
        if c == rx_id:
            continue
        member = pts[assignment == c]
        ext = member.max(axis=0) - member.min(axis=0)
        if max(ext[0], ext[1]) > max_vehicle_extent or member[:, 2].max() > max_vehicle_height:
            continue
        if np.linalg.norm(cent[:2] - rx_cent[:2]) <= rho:
            scatterers.append(c)
    origin = pc.origin
    az = math.atan2(rx_cent[1] - origin[1], rx_cent[0] - origin[0])
    return ClusterLabels(
        assignment=assignment,
        receiver_set=np.flatnonzero(assignment == rx_id),
        scatterer_set=np.flatnonzero(np.isin(assignment, scatterers)),
        theta_k=steering_from_azimuth(az),
        receiver_azimuth=az,
        receiver_centroid=rx_cent,
    )


def image_coordinates(rel: np.ndarray, cfg: LidarConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous (u, v) image coordinates and range for sensor-frame points."""
    x, y, z = rel[:, 0], rel[:, 1], rel[:, 2]
    r = np.linalg.norm(rel, axis=1)
    f_up = math.radians(cfg.f_up)
    f = math.radians(cfg.fov)
    u = 0.5 * (1.0 - np.arctan2(y, x) / math.pi) * cfg.w
    v = (1.0 - (np.arcsin(np.clip(z / np.where(r > 0, r, 1.0), -1, 1)) + f_up) / f) * cfg.h
    return u, v, r


def range_project(pc: PointCloud, cfg: LidarConfig) -> RangeImage:
    pixels = np.zeros((cfg.h, cfg.w))
    index = np.full((cfg.h, cfg.w), -1, dtype=np.int64)
    if len(pc) == 0:
        return RangeImage(pixels, index, cfg)
    u, v, r = image_coordinates(pc.points - pc.origin[None], cfg)
    ui = np.clip(np.floor(u).astype(np.int64), 0, cfg.w - 1)
    vi = np.clip(np.floor(v).astype(np.int64), 0, cfg.h - 1)
    flat = vi * cfg.w + ui
    # nearest surface wins: visit points far-to-near so the closest write lands last;
    # a stable sort keeps the result independent of ties in input order
    order = np.lexsort((np.arange(len(r)), -r))
    pix = pixels.ravel()
    idx = index.ravel()
    pix[flat[order]] = r[order]
    idx[flat[order]] = order
    return RangeImage(pix.reshape(cfg.h, cfg.w), idx.reshape(cfg.h, cfg.w), cfg)


def sp_feature_image(ri: RangeImage, labels: ClusterLabels, pc: PointCloud, f_c: float,
                     scene: Scene) -> SpFeatureImage:
    """Stack range, equivalent small-scale fading labels and large-scale path loss."""
    rng_ch = ri.pixels
    occupied = ri.point_index >= 0
    lab = labels.point_labels(len(pc))
    lab_ch = np.zeros_like(rng_ch)
    lab_ch[occupied] = lab[ri.point_index[occupied]]
    pl_ch = np.zeros_like(rng_ch)
    pl_ch[occupied] = two_ray_loss_db(rng_ch[occupied], f_c, scene.tx_height, scene.rx_height)
    return SpFeatureImage(np.stack([rng_ch, lab_ch, pl_ch]))


def azimuth_column(az: float, cfg: LidarConfig) -> int:
    u = 0.5 * (1.0 - az / math.pi) * cfg.w
    return int(np.clip(math.floor(u), 0, cfg.w - 1))


def crop_columns(img: np.ndarray, center_col: int, width: int = 128) -> np.ndarray:
    """Cylindrical crop of ``width`` columns centred on ``center_col``."""
    cols = (np.arange(width) - width // 2 + center_col) % img.shape[-1]
    return np.take(img, cols, axis=-1)
