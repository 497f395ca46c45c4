"""Wideband multipath channel synthesis for a uniform linear array.

The steering variable ``psi`` lives in [0, 2*pi) and enters the array
response as ``exp(-1j * i * psi)`` for antenna ``i = 0..N_t-1``.  A
geometric azimuth ``az`` (radians, measured from the array broadside, the
+x axis) maps to ``psi = pi * sin(az) + pi`` wrapped into [0, 2*pi).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class NoPropagationPath(ValueError):
    """Raised when a channel is requested from an empty path list."""


@dataclass(frozen=True)
class SystemConfig:
    N_t: int = 32
    N_RF: int = 8
    N_s: int = 64
    K: int = 2
    f_c: float = 28.0  # GHz
    bandwidth: float = 1e8  # Hz
    B: int = 3

    def __post_init__(self):
        if not self.N_RF < self.N_t:
            raise ValueError(f"need N_RF < N_t, got N_RF={self.N_RF}, N_t={self.N_t}")
        if self.N_s < 1 or self.K < 1 or self.B < 1:
            raise ValueError("N_s, K and B must be positive")

    @property
    def sampling_interval(self) -> float:
        return 1.0 / self.bandwidth


@dataclass(frozen=True)
class ChannelPath:
    """One propagation path.

    ``alpha`` is the linear amplitude, ``theta`` the steering variable at the
    base-station array, ``tau`` the delay in sampling intervals and ``phi``
    the path phase in radians.
    """

    alpha: complex
    theta: float
    tau: float
    phi: float
    kind: str = "los"
    length: float = float("nan")

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError(f"negative delay {self.tau}")
        if not abs(self.alpha) > 0:
            raise ValueError("path amplitude must be non-zero")


@dataclass
class WidebandChannel:
    H: np.ndarray  # (N_t, N_s) complex
    paths: list[ChannelPath] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.H.shape


def steering_from_azimuth(az):
    """Map a physical azimuth (radians) to the steering variable in [0, 2*pi)."""
    psi = np.pi * np.sin(az) + np.pi
    psi = np.mod(psi, 2 * np.pi)
    return float(psi) if np.ndim(psi) == 0 else psi


def array_response(theta: float, N_t: int) -> np.ndarray:
    if not np.isfinite(theta):
        raise ValueError("steering value must be finite")
    i = np.arange(N_t)
    return np.exp(-1j * i * theta) / np.sqrt(N_t)


def array_manifold(thetas: Sequence[float], N_t: int) -> np.ndarray:
    """Stack array responses column-wise, shape ``(N_t, len(thetas))``."""
    thetas = np.asarray(thetas, dtype=float)
    i = np.arange(N_t)[:, None]
    return np.exp(-1j * i * thetas[None, :]) / np.sqrt(N_t)


def subcarrier_channel(paths: Sequence[ChannelPath], m: int, N_s: int, N_t: int = 32) -> np.ndarray:
    """Channel vector at 1-based subcarrier ``m``."""
    if not paths:
        raise NoPropagationPath("no propagation path")
    if not 1 <= m <= N_s:
        raise ValueError(f"subcarrier index {m} outside 1..{N_s}")
    h = np.zeros(N_t, dtype=complex)
    for p in paths:
        h += p.alpha * np.exp(1j * (p.phi - 2 * np.pi * m / N_s * p.tau)) * array_response(p.theta, N_t)
    return h


def assemble_wideband(paths: Sequence[ChannelPath], cfg: SystemConfig) -> WidebandChannel:
    if not paths:
        raise NoPropagationPath("no propagation path")
    alpha = np.array([p.alpha for p in paths], dtype=complex)
    phi = np.array([p.phi for p in paths])
    tau = np.array([p.tau for p in paths])
    m = np.arange(1, cfg.N_s + 1)
    # (L, N_s) per-path frequency response times (N_t, L) manifold
    freq = alpha[:, None] * np.exp(1j * (phi[:, None] - 2 * np.pi * np.outer(tau, m) / cfg.N_s))
    A = array_manifold([p.theta for p in paths], cfg.N_t)
    return WidebandChannel(H=A @ freq, paths=list(paths))


def normalize_channel(H: np.ndarray) -> np.ndarray:
    """Scale ``H`` to unit mean entry power, ``||H||_F^2 = H.size``."""
    power = np.vdot(H, H).real
    if power <= 0:
        raise ValueError("cannot normalize an all-zero channel")
    return H * np.sqrt(H.size / power)
