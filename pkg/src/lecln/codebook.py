"""User-localized over-complete DFT codebook and sensing-matrix projection.

The angular grid is a plain DFT-like grid over [0, 2*pi) with one dense
window of half the baseline spacing centred on the user's coarse steering
value.  Pilot observations are projected through the pseudo-inverse of the
sensing matrix ``Theta = F_R^H (A^H)^+`` to give a real ``2 x D x N_P``
tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .channel import array_manifold

TWO_PI = 2.0 * math.pi
# guards floor() against round-off when the argument is an exact multiple
_FLOOR_GUARD = 1e-9


class CodebookError(ValueError):
    pass


class ProjectionUnstable(RuntimeError):
    def __init__(self, cond: float):
        super().__init__(f"projection unstable: cond(Theta) = {cond:.3e}")
        self.cond = cond


@dataclass(frozen=True)
class UloDftCodebook:
    Phi: np.ndarray
    A: np.ndarray
    endpoints: Optional[tuple[float, float, float, float]] = None
    epsilon: Optional[float] = None
    epsilon_o: Optional[float] = None
    epsilon_g: Optional[float] = None
    N_o: int = 0
    N_w: Optional[int] = None
    theta_k: Optional[float] = None
    o1: int = 0  # grid index of the first over-sampled point

    @property
    def D(self) -> int:
        return len(self.Phi)

    @property
    def N_t(self) -> int:
        return self.A.shape[0]

    def A_H_pinv(self) -> np.ndarray:
        """Right inverse of ``A^H``: ``(A A^H)^{-1} A``, shape ``(N_t, D)``."""
        A = self.A
        return np.linalg.solve(A @ A.conj().T, A)


@dataclass(frozen=True)
class SensingProjection:
    Theta: np.ndarray  # (N_RF, D)
    Theta_pinv: np.ndarray  # (D, N_RF)
    A_H_pinv: np.ndarray  # (N_t, D)


def _floor(x: float) -> int:
    return math.floor(x + _FLOOR_GUARD)


def oversampled_endpoints(theta_k: float, N_w: int, N_t: int) -> tuple[float, float]:
    if not 0 <= theta_k < TWO_PI:
        raise ValueError(f"theta_k={theta_k} outside [0, 2pi)")
    if N_w < 1 or N_w % 2 == 0:
        raise ValueError(f"N_w must be a positive odd integer, got {N_w}")
    eps = TWO_PI / (2 * N_t)
    half = eps * (N_w - 1) / 2
    lo = theta_k - half
    phi_o1 = eps * _floor(lo / eps) if lo >= 0 else 0.0
    n2 = _floor((theta_k + half) / eps)
    # the dense window never wraps past 2*pi
    n2 = min(n2, 2 * N_t - 1)
    return phi_o1, eps * n2


def build_grid(endpoints: tuple[float, float], D: int, N_t: int) -> tuple[np.ndarray, dict]:
    """Angular grid of exactly ``D`` points plus its layout description."""
    phi_o1, phi_o2 = endpoints
    eps = TWO_PI / (2 * N_t)
    eps_o = eps / 2
    N_o = int(round((phi_o2 - phi_o1) / eps_o))
    if D <= N_o:
        raise CodebookError(f"codebook too small: D={D} <= N_o={N_o}")
    eps_g = (TWO_PI - N_o * eps_o) / (D - N_o)

    n_before = math.ceil(phi_o1 / eps_g - _FLOOR_GUARD) if phi_o1 > 0 else 0
    n_after = D - N_o - n_before
    before = np.arange(n_before) * eps_g
    dense = phi_o1 + np.arange(N_o) * eps_o
    after = phi_o2 + np.arange(n_after) * eps_g
    Phi = np.concatenate([before, dense, after])

    phi_g1 = before[-1] if n_before else None
    phi_g2 = after[0] if n_after else None
    layout = dict(
        epsilon=eps, epsilon_o=eps_o, epsilon_g=eps_g, N_o=N_o, o1=n_before,
        endpoints=(phi_o1, phi_o2, phi_g1, phi_g2),
    )
    return Phi, layout


def build_codebook(Phi, **layout) -> UloDftCodebook:
    Phi = np.asarray(Phi, dtype=float)
    if Phi.ndim != 1 or len(Phi) == 0:
        raise CodebookError("grid must be a non-empty vector")
    if np.any(np.diff(Phi) <= 0):
        raise CodebookError("codebook degenerate: grid not strictly increasing (duplicate values)")
    N_t = layout.pop("N_t", None)
    if N_t is None:
        raise CodebookError("N_t is required")
    A = array_manifold(Phi, N_t)
    if np.linalg.matrix_rank(A) < N_t:
        raise CodebookError("codebook degenerate: A is not row full rank")
    return UloDftCodebook(Phi=Phi, A=A, **layout)


def ulo_dft_codebook(theta_k: float, N_t: int = 32, D: int = 64, N_w: int = 13) -> UloDftCodebook:
    if D < N_t:
        raise CodebookError(f"need D >= N_t, got D={D}, N_t={N_t}")
    endpoints = oversampled_endpoints(theta_k, N_w, N_t)
    Phi, layout = build_grid(endpoints, D, N_t)
    return build_codebook(Phi, N_t=N_t, N_w=N_w, theta_k=theta_k, **layout)


def sensing_projection(cb: UloDftCodebook, F_R: np.ndarray, max_cond: float = 1e12) -> SensingProjection:
    G = cb.A_H_pinv()
    Theta = F_R.conj().T @ G
    s = np.linalg.svd(Theta, compute_uv=False)
    cond = s[0] / s[-1] if s[-1] > 0 else math.inf
    if cond > max_cond:
        raise ProjectionUnstable(cond)
    Theta_pinv = np.linalg.pinv(Theta, rcond=1e-10)
    return SensingProjection(Theta=Theta, Theta_pinv=Theta_pinv, A_H_pinv=G)


def project_measurements(cb: UloDftCodebook, F_R: np.ndarray, Y_P: np.ndarray, n_rf: Optional[int] = None) -> np.ndarray:
    """Project pilot observations into the codebook's angular space.

    ``F_R`` may hold several RF combiners side by side (``N_t x n_blocks*n_rf``);
    the pilot columns are then split into ``n_blocks`` consecutive blocks and
    each block is projected with its own sensing matrix.  Returns a real array
    of shape ``(2, D, N_P)`` holding the real and imaginary planes.
    """
    n_rf = n_rf or F_R.shape[1]
    if F_R.shape[0] != cb.N_t or F_R.shape[1] % n_rf:
        raise ValueError(f"F_R shape {F_R.shape} incompatible with N_t={cb.N_t}, n_rf={n_rf}")
    n_blocks = F_R.shape[1] // n_rf
    if Y_P.shape[0] != n_rf or Y_P.shape[1] % n_blocks:
        raise ValueError(f"Y_P shape {Y_P.shape} incompatible with {n_blocks} blocks of {n_rf} RF chains")
    cols = Y_P.shape[1] // n_blocks
    out = np.empty((cb.D, Y_P.shape[1]), dtype=complex)
    for b in range(n_blocks):
        proj = sensing_projection(cb, F_R[:, b * n_rf:(b + 1) * n_rf])
        out[:, b * cols:(b + 1) * cols] = proj.Theta_pinv @ Y_P[:, b * cols:(b + 1) * cols]
    return np.stack([out.real, out.imag])
