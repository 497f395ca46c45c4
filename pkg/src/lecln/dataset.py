"""Paired LiDAR / CSI samples generated from synthetic scenes."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .channel import NoPropagationPath, assemble_wideband, normalize_channel
from .codebook import UloDftCodebook, project_measurements, ulo_dft_codebook
from .config import RunConfig
from .lidar import (ReceiverNotDetected, azimuth_column, crop_columns, dbscan, filter_ground, label_clusters,
                    range_project, sp_feature_image)
from .pilots import AnalogPrecoder, PilotPlan, make_precoder, noise_for_snr, pilot_symbols, transmit_pilots
from .scene import ChannelPath, Scene, SceneInfeasible, build_scene, derive_paths, raycast_lidar
from .tensorio import read_tensor, write_tensor

log = logging.getLogger(__name__)

SPLITS = {"train": 1, "val": 2, "test": 3, "eval": 4}
MAX_SCENE_ATTEMPTS = 50


class SampleGenerationFailed(RuntimeError):
    pass


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class Realization:
    scene: Scene
    paths: list[ChannelPath]
    H: np.ndarray  # (N_t, N_s), unit mean entry power
    user: int  # 1-based
    codebook: UloDftCodebook
    crop: np.ndarray  # (3, h, crop_w) SP-feature crop
    pilot_set: tuple[int, ...]
    seed: int

    @property
    def theta_k(self) -> float:
        return float(self.codebook.theta_k)

    @property
    def H_P(self) -> np.ndarray:
        return self.H[:, np.asarray(self.pilot_set) - 1]


def pilot_plan(cfg: RunConfig, budget: int) -> PilotPlan:
    return PilotPlan.build(N_s=cfg.system.N_s, K_P=cfg.features.K_P, N_P=budget, K=cfg.system.K)


@lru_cache(maxsize=32)
def _precoder(system, seed: int, n_blocks: int) -> AnalogPrecoder:
    return make_precoder(system, seed, n_blocks)


def budget_precoder(cfg: RunConfig, budget: int) -> AnalogPrecoder:
    """Fixed RF combiner for a measurement budget: one ``N_t x N_RF`` block per ``N_RF`` pilot symbols."""
    n_rf = cfg.system.N_RF
    if budget % n_rf:
        raise ValueError(f"budget {budget} is not a multiple of N_RF={n_rf}")
    return _precoder(cfg.system, cfg.features.precoder_seed + budget, budget // n_rf)


def build_realization(cfg: RunConfig, seed: int, user: int) -> Realization:
    """One scene with its channel and SP-feature crop.

    Scenes where placement fails, no path exists or the receiver is not
    detected are redrawn with the next derived seed.
    """
    fc = cfg.features
    last = None
    for attempt in range(MAX_SCENE_ATTEMPTS):
        scene_seed = derive_seed(seed, attempt)
        try:
            scene = build_scene(cfg.scene.spec(scene_seed))
            paths = derive_paths(scene, max_paths=fc.max_paths, f_c=cfg.system.f_c,
                                 bandwidth=cfg.system.bandwidth, scatter_radius=fc.rho)
            pc = filter_ground(raycast_lidar(scene, cfg.lidar), fc.z_tol)
            assignment = dbscan(pc.points, fc.dbscan_eps, fc.min_pts)
            labels = label_clusters(pc, assignment, scene, rho=fc.rho, rho_match=fc.rho_match)
        except (SceneInfeasible, NoPropagationPath, ReceiverNotDetected) as e:
            last = e
            continue
        H = normalize_channel(assemble_wideband(paths, cfg.system).H)
        cb = ulo_dft_codebook(labels.theta_k, N_t=cfg.system.N_t, D=fc.D, N_w=fc.N_w)
        img = sp_feature_image(range_project(pc, cfg.lidar), labels, pc, cfg.system.f_c, scene).data
        col = azimuth_column(labels.receiver_azimuth, cfg.lidar)
        crop = crop_columns(img, col, fc.crop_w).astype(np.float32)
        plan = PilotPlan.build(N_s=cfg.system.N_s, K_P=fc.K_P, N_P=fc.K_P, K=cfg.system.K)
        return Realization(scene=scene, paths=paths, H=H, user=user, codebook=cb, crop=crop,
                           pilot_set=plan.indices(user), seed=scene_seed)
    raise SampleGenerationFailed(f"no usable scene after {MAX_SCENE_ATTEMPTS} attempts (seed {seed}): {last}")


@dataclass
class Observation:
    y: np.ndarray  # (2, D, N_P) projected pilots
    Y_P: np.ndarray  # (N_RF, N_P)
    S_P: np.ndarray
    sigma2: float
    precoder: AnalogPrecoder
    snr_db: float


def observe(cfg: RunConfig, real: Realization, budget: int, snr_db: float, noise_seed: int) -> Observation:
    """Pilot observation at the requested average received SNR, projected onto the user's codebook."""
    prec = budget_precoder(cfg, budget)
    S_P = pilot_symbols(cfg.features.K_P, budget)
    sigma2 = noise_for_snr(prec.F_R, real.H, snr_db, per_subcarrier=True)
    obs = transmit_pilots(real.H_P, S_P, prec, sigma2, noise_seed, plan=pilot_plan(cfg, budget))
    y = project_measurements(real.codebook, prec.F_R, obs.Y_P, n_rf=prec.n_rf)
    return Observation(y=y.astype(np.float32), Y_P=obs.Y_P, S_P=S_P, sigma2=sigma2, precoder=prec, snr_db=snr_db)


# --- datasets on disk ----------------------------------------------------------

@dataclass
class Split:
    H: np.ndarray  # (n, N_t, N_s) complex
    img: np.ndarray  # (n, 3, h, w)
    users: np.ndarray
    theta_k: np.ndarray
    o1: np.ndarray
    snr_db: np.ndarray
    y: dict  # budget -> (n, 2, D, N_P)

    def __len__(self) -> int:
        return len(self.H)

    def pilot_sets(self, cfg: RunConfig) -> dict:
        plan = PilotPlan.build(N_s=cfg.system.N_s, K_P=cfg.features.K_P, N_P=cfg.features.K_P, K=cfg.system.K)
        return {k: plan.indices(k) for k in range(1, cfg.system.K + 1)}

    def H_P(self, cfg: RunConfig) -> np.ndarray:
        sets = self.pilot_sets(cfg)
        return np.stack([self.H[i][:, np.asarray(sets[int(k)]) - 1] for i, k in enumerate(self.users)])


def generate_split(cfg: RunConfig, split: str, n: int, budgets=None) -> Split:
    budgets = tuple(budgets or cfg.data.budgets)
    code = SPLITS[split]
    H, img, users, theta, o1, snr = [], [], [], [], [], []
    ys = {b: [] for b in budgets}
    for i in range(n):
        base = derive_seed(cfg.seed, code, i)
        user = i % cfg.system.K + 1
        real = build_realization(cfg, base, user)
        rng = np.random.default_rng(derive_seed(base, 0x5A))
        s = float(rng.uniform(cfg.data.snr_min, cfg.data.snr_max))
        for b in budgets:
            ys[b].append(observe(cfg, real, b, s, derive_seed(base, 0x9E, b)).y)
        H.append(real.H)
        img.append(real.crop)
        users.append(user)
        theta.append(real.theta_k)
        o1.append(real.codebook.o1)
        snr.append(s)
        if (i + 1) % 200 == 0:
            log.info("%s: %d / %d samples", split, i + 1, n)
    N_t, N_s = cfg.system.N_t, cfg.system.N_s
    return Split(H=np.asarray(H, dtype=np.complex64).reshape(n, N_t, N_s),
                 img=np.asarray(img, dtype=np.float32).reshape(n, 3, cfg.lidar.h, cfg.features.crop_w),
                 users=np.asarray(users, dtype=np.int64), theta_k=np.asarray(theta, dtype=np.float64),
                 o1=np.asarray(o1, dtype=np.int64), snr_db=np.asarray(snr, dtype=np.float64),
                 y={b: np.asarray(ys[b], dtype=np.float32).reshape(n, 2, cfg.features.D, b) for b in budgets})


def save_split(directory, name: str, s: Split) -> None:
    root = Path(directory) / name
    root.mkdir(parents=True, exist_ok=True)
    write_tensor(root / "H.lecl", s.H)
    write_tensor(root / "img.lecl", s.img)
    # user, o1 are small integers and theta_k is stored in float32 on disk as well
    write_tensor(root / "meta.lecl", np.column_stack([s.users, s.o1, s.theta_k, s.snr_db]).astype(np.float32)
                 if len(s) else np.zeros((0, 4), dtype=np.float32))
    for b, y in s.y.items():
        write_tensor(root / f"y_b{b}.lecl", y)


def load_split(directory, name: str, budgets) -> Split:
    root = Path(directory) / name
    meta = read_tensor(root / "meta.lecl").astype(np.float64)
    return Split(H=read_tensor(root / "H.lecl"), img=read_tensor(root / "img.lecl"),
                 users=meta[:, 0].astype(np.int64), o1=meta[:, 1].astype(np.int64),
                 theta_k=meta[:, 2], snr_db=meta[:, 3],
                 y={b: read_tensor(root / f"y_b{b}.lecl") for b in budgets})


def write_dataset(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sizes = {"train": cfg.data.n_train, "val": cfg.data.n_val, "test": cfg.data.n_test}
    for name, n in sizes.items():
        save_split(out, name, generate_split(cfg, name, n))
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "overrides": cfg.overrides(),
        "splits": sizes,
        "budgets": list(cfg.data.budgets),
        "seeds": {name: [derive_seed(cfg.seed, SPLITS[name], 0)] if n else [] for name, n in sizes.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_manifest(directory) -> dict:
    p = Path(directory) / "manifest.json"
    if not p.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {p}")
    return json.loads(p.read_text())
