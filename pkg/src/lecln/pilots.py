"""Pilot scheduling, quantized analog combiners and the hybrid measurement model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .channel import SystemConfig


class PilotPlanInfeasible(ValueError):
    pass


class InfiniteSNR(ZeroDivisionError):
    pass


def pilot_subcarriers(k: int, N_s: int, K_P: int, K: int) -> tuple[int, ...]:
    """1-based pilot subcarrier indices of user ``k`` (1-based)."""
    if K * K_P > N_s:
        raise PilotPlanInfeasible(f"pilot plan infeasible: K*K_P = {K * K_P} > N_s = {N_s}")
    if not 1 <= k <= K:
        raise ValueError(f"user index {k} outside 1..{K}")
    delta_v = N_s // K_P
    return tuple(k + i * delta_v for i in range(K_P))


@dataclass(frozen=True)
class PilotPlan:
    K_P: int = 8
    N_P: int = 8
    N_s: int = 64
    K: int = 2
    subcarriers: dict = field(default_factory=dict, compare=False)

    @property
    def delta_v(self) -> int:
        return self.N_s // self.K_P

    @classmethod
    def build(cls, N_s: int = 64, K_P: int = 8, N_P: int = 8, K: int = 2) -> "PilotPlan":
        sets = {k: pilot_subcarriers(k, N_s, K_P, K) for k in range(1, K + 1)}
        return cls(K_P=K_P, N_P=N_P, N_s=N_s, K=K, subcarriers=sets)

    def indices(self, k: int) -> tuple[int, ...]:
        return self.subcarriers[k]

    def to_json(self) -> dict:
        return dict(K_P=self.K_P, N_P=self.N_P, N_s=self.N_s, K=self.K, delta_v=self.delta_v,
                    subcarriers={str(k): list(v) for k, v in self.subcarriers.items()})


@dataclass(frozen=True)
class AnalogPrecoder:
    """Quantized-phase RF combiner.

    ``F_R`` holds ``n_blocks`` independent ``N_t x n_rf`` combiners side by
    side; a single-block precoder is the usual ``N_t x N_RF`` matrix.  Every
    entry is ``exp(j*2*pi*n/Q) / sqrt(N_t)`` so that each block satisfies
    ``||F_R||_F^2 = N_RF``.
    """

    F_R: np.ndarray
    B: int
    seed: int
    n_rf: int

    @property
    def n_blocks(self) -> int:
        return self.F_R.shape[1] // self.n_rf

    def block(self, b: int) -> np.ndarray:
        return self.F_R[:, b * self.n_rf:(b + 1) * self.n_rf]


def make_precoder(cfg: SystemConfig, seed: int, n_blocks: int = 1) -> AnalogPrecoder:
    if cfg.B < 1:
        raise ValueError("B must be >= 1")
    Q = 2 ** cfg.B
    rng = np.random.default_rng(seed)
    n = rng.integers(1, Q + 1, size=(cfg.N_t, cfg.N_RF * n_blocks))
    F_R = np.exp(2j * np.pi * n / Q) / np.sqrt(cfg.N_t)
    return AnalogPrecoder(F_R=F_R, B=cfg.B, seed=seed, n_rf=cfg.N_RF)


def pilot_symbols(K_P: int, N_P: int) -> np.ndarray:
    """Rows of the unitary ``K_P``-point DFT, tiled to ``N_P`` columns, with ``S S^H = I``."""
    if N_P < K_P:
        raise ValueError(f"need N_P >= K_P for full-rank pilots, got N_P={N_P}, K_P={K_P}")
    k = np.arange(K_P)
    dft = np.exp(-2j * np.pi * np.outer(k, k) / K_P) / np.sqrt(K_P)
    S = np.tile(dft, (1, math.ceil(N_P / K_P)))[:, :N_P]
    if N_P % K_P == 0:
        return S / np.sqrt(N_P // K_P)
    # truncated tiling: whiten so S S^H is exactly the identity
    w, V = np.linalg.eigh(S @ S.conj().T)
    return (V / np.sqrt(w)) @ V.conj().T @ S


@dataclass
class PilotObservation:
    Y_P: np.ndarray
    S_P: np.ndarray
    sigma2: float
    plan: Optional[PilotPlan]
    precoder: AnalogPrecoder


def transmit_pilots(H_P: np.ndarray, S_P: np.ndarray, precoder: AnalogPrecoder, sigma2: float,
                    seed: int, plan: Optional[PilotPlan] = None) -> PilotObservation:
    """Received pilot block ``Y_P = F_R^H (H_P S_P + N)``, one combiner per symbol block."""
    N_t, K_P = H_P.shape
    if S_P.shape[0] != K_P or precoder.F_R.shape[0] != N_t:
        raise ValueError(f"shape mismatch: H_P {H_P.shape}, S_P {S_P.shape}, F_R {precoder.F_R.shape}")
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    N_P = S_P.shape[1]
    nb = precoder.n_blocks
    if N_P % nb:
        raise ValueError(f"N_P={N_P} is not divisible into {nb} combiner blocks")
    rng = np.random.default_rng(seed)
    noise = np.sqrt(sigma2 / 2) * (rng.standard_normal((N_t, N_P)) + 1j * rng.standard_normal((N_t, N_P)))
    rx = H_P @ S_P + noise
    cols = N_P // nb
    Y = np.empty((precoder.n_rf, N_P), dtype=complex)
    for b in range(nb):
        sl = slice(b * cols, (b + 1) * cols)
        Y[:, sl] = precoder.block(b).conj().T @ rx[:, sl]
    return PilotObservation(Y_P=Y, S_P=S_P, sigma2=float(sigma2), plan=plan, precoder=precoder)


def received_power_ratio(F_R: np.ndarray, H: np.ndarray, per_subcarrier: bool = False) -> float:
    """``||F_R^H H||_F^2 / ||F_R||_F^2``, optionally divided by the number of columns of ``H``."""
    ratio = float(np.linalg.norm(F_R.conj().T @ H) ** 2 / np.linalg.norm(F_R) ** 2)
    return ratio / H.shape[1] if per_subcarrier else ratio


def measure_snr(F_R: np.ndarray, H: np.ndarray, sigma2: float, per_subcarrier: bool = False) -> float:
    """Average received SNR in dB.

    The plain form is ``||F_R^H H||_F^2 / (sigma2 ||F_R||_F^2)``.  With
    ``per_subcarrier`` the signal energy is averaged over the columns of
    ``H``, which gives the SNR of a single received measurement.
    """
    if sigma2 == 0:
        raise InfiniteSNR("infinite SNR: sigma2 = 0")
    if sigma2 < 0:
        raise ValueError("sigma2 must be positive")
    return 10 * math.log10(received_power_ratio(F_R, H, per_subcarrier) / sigma2)


def noise_for_snr(F_R: np.ndarray, H: np.ndarray, snr_db: float, per_subcarrier: bool = False) -> float:
    """Noise variance giving the requested average received SNR."""
    return received_power_ratio(F_R, H, per_subcarrier) / 10 ** (snr_db / 10)
