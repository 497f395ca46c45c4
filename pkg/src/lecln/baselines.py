"""Classical channel estimators: least squares, OMP and AMP in the codebook's
angular domain, plus frequency-domain interpolation to the full band."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class LsEstimate:
    H_P: np.ndarray
    rank: int
    underdetermined: bool


def stacked_operator(F_R: np.ndarray, S_P: np.ndarray, n_rf: Optional[int] = None) -> np.ndarray:
    """Matrix ``M`` with ``vec(Y_P) = M vec(H_P)`` (column-major ``vec``).

    With several combiner blocks, block ``b`` of ``F_R`` acts on the matching
    block of pilot columns: ``vec(F_b^H H S_b) = (S_b^T kron F_b^H) vec(H)``.
    """
    n_rf = n_rf or F_R.shape[1]
    nb = F_R.shape[1] // n_rf
    cols = S_P.shape[1] // nb
    rows = []
    for b in range(nb):
        Fb = F_R[:, b * n_rf:(b + 1) * n_rf]
        Sb = S_P[:, b * cols:(b + 1) * cols]
        rows.append(np.kron(Sb.T, Fb.conj().T))
    return np.vstack(rows)


def ls_estimate(Y_P: np.ndarray, F_R: np.ndarray, S_P: np.ndarray, n_rf: Optional[int] = None) -> LsEstimate:
    """Minimum-norm least-squares solve of ``Y_P = F_R^H H_P S_P`` for ``H_P``."""
    N_t, K_P = F_R.shape[0], S_P.shape[0]
    M = stacked_operator(F_R, S_P, n_rf)
    if M.shape[0] != Y_P.size:
        raise ValueError(f"operator has {M.shape[0]} rows for {Y_P.size} observations")
    x, _, rank, _ = np.linalg.lstsq(M, Y_P.reshape(-1, order="F"), rcond=None)
    under = rank < N_t * K_P
    return LsEstimate(H_P=x.reshape(N_t, K_P, order="F"), rank=int(rank), underdetermined=bool(under))


@dataclass
class SparseEstimate:
    x_hat: np.ndarray
    support: tuple[int, ...]
    residual_norm: float
    history: list[float] = field(default_factory=list)


def omp_estimate(y: np.ndarray, Theta: np.ndarray, k: int, tol: float = 0.0) -> SparseEstimate:
    """Orthogonal matching pursuit with least-squares re-projection each step.

    Stops after ``k`` atoms or once the residual norm drops to ``tol``.
    Correlations use unit-normalized atoms.
    """
    m, D = Theta.shape
    if k > m:
        raise ValueError(f"sparsity {k} exceeds the {m} measurement rows")
    y = np.asarray(y, dtype=complex)
    norms = np.linalg.norm(Theta, axis=0)
    norms = np.where(norms > 0, norms, np.inf)
    x = np.zeros(D, dtype=complex)
    r = y.copy()
    support: list[int] = []
    hist = [float(np.linalg.norm(r))]
    scale = hist[0]
    while len(support) < k and hist[-1] > tol and hist[-1] > 1e-13 * max(scale, 1e-300):
        corr = np.abs(Theta.conj().T @ r) / norms
        corr[support] = -1.0
        d = int(np.argmax(corr))
        if corr[d] <= 1e-13 * scale:
            break
        support.append(d)
        coef, *_ = np.linalg.lstsq(Theta[:, support], y, rcond=None)
        r = y - Theta[:, support] @ coef
        hist.append(float(np.linalg.norm(r)))
    if support:
        x[support] = coef
    return SparseEstimate(x_hat=x, support=tuple(support), residual_norm=hist[-1], history=hist)


@dataclass
class AmpResult:
    x_hat: np.ndarray
    residuals: list[float]
    diverged: bool
    best_iteration: int


def soft_threshold(r: np.ndarray, tau: float) -> np.ndarray:
    mag = np.abs(r)
    shrink = np.maximum(mag - tau, 0.0)
    return np.where(mag > 0, r / np.where(mag > 0, mag, 1.0) * shrink, 0.0)


def amp_estimate(y: np.ndarray, Theta: np.ndarray, iterations: int = 30, damping: float = 0.7,
                 alpha: float = 1.4) -> AmpResult:
    """Complex AMP with soft thresholding and the Onsager correction.

    Columns are normalized internally and the estimate is mapped back.  The
    threshold is ``alpha`` times the residual standard deviation
    ``||z|| / sqrt(M)``.  ``damping`` blends each update with the previous
    iterate (1.0 means undamped).  If the residual grows ten-fold within five
    iterations the run stops, logs "amp diverged" and returns the best iterate.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    y = np.asarray(y, dtype=complex)
    M, N = Theta.shape
    norms = np.linalg.norm(Theta, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    A = Theta / norms
    delta = M / N
    x = np.zeros(N, dtype=complex)
    z = y.copy()
    res = [float(np.linalg.norm(y))]
    best_x, best_res, best_it = x.copy(), res[0], 0
    diverged = False
    if res[0] == 0:
        return AmpResult(x_hat=x, residuals=res, diverged=False, best_iteration=0)
    for it in range(1, iterations + 1):
        pseudo = x + A.conj().T @ z
        tau = alpha * np.linalg.norm(z) / math.sqrt(M)
        x_new = soft_threshold(pseudo, tau)
        mag = np.abs(pseudo)
        active = mag > tau
        # average divergence of the complex soft threshold
        eta_prime = np.sum(1.0 - tau / (2.0 * mag[active])) / N if active.any() else 0.0
        z_new = y - A @ x_new + z * eta_prime / delta
        x = damping * x_new + (1 - damping) * x
        z = damping * z_new + (1 - damping) * z
        r = float(np.linalg.norm(y - A @ x))
        res.append(r)
        if r < best_res:
            best_x, best_res, best_it = x.copy(), r, it
        window = res[max(0, len(res) - 6):-1]
        if not np.isfinite(r) or r > 10 * min(window):
            diverged = True
            log.warning("amp diverged at iteration %d (residual %.3g); returning iteration %d", it, r, best_it)
            break
    return AmpResult(x_hat=best_x / norms, residuals=res, diverged=diverged, best_iteration=best_it)


def interpolate_freq(H_P_hat: np.ndarray, V_k: Sequence[int], N_s: int) -> np.ndarray:
    """Per-antenna linear interpolation of real and imaginary parts across subcarriers.

    Outside the pilot span the nearest pilot value is held.  With fewer than
    two pilots every subcarrier takes the nearest (only) pilot column.
    """
    H_P_hat = np.asarray(H_P_hat)
    V = np.asarray(V_k, dtype=float)
    if len(V) < 2:
        return replicate_nearest(H_P_hat, V_k, N_s)
    m = np.arange(1, N_s + 1, dtype=float)
    out = np.empty((H_P_hat.shape[0], N_s), dtype=complex)
    for a in range(H_P_hat.shape[0]):
        out[a] = np.interp(m, V, H_P_hat[a].real) + 1j * np.interp(m, V, H_P_hat[a].imag)
    return out


def replicate_nearest(H_P_hat: np.ndarray, V_k: Sequence[int], N_s: int) -> np.ndarray:
    """Copy each subcarrier from the nearest pilot column (ties go to the lower pilot)."""
    V = np.asarray(V_k)
    m = np.arange(1, N_s + 1)
    nearest = np.argmin(np.abs(m[:, None] - V[None, :]), axis=1)
    return np.asarray(H_P_hat)[:, nearest]


# --- angular-domain helpers shared by OMP and AMP --------------------------------

def decorrelate(Y_P: np.ndarray, S_P: np.ndarray, n_blocks: int) -> np.ndarray:
    """Undo the pilot mixing per combiner block, giving ``F_b^H H_P`` stacked over blocks."""
    cols = S_P.shape[1] // n_blocks
    out = []
    for b in range(n_blocks):
        Sb = S_P[:, b * cols:(b + 1) * cols]
        out.append(Y_P[:, b * cols:(b + 1) * cols] @ np.linalg.pinv(Sb))
    return np.vstack(out)


def angular_estimate(method: str, Y_P: np.ndarray, F_R: np.ndarray, S_P: np.ndarray, A: np.ndarray,
                     n_rf: int, sigma2: float = 0.0, sparsity: int = 8) -> np.ndarray:
    """Pilot-position CSI from OMP or AMP run column by column in the angular domain of ``A``."""
    nb = F_R.shape[1] // n_rf
    Z = decorrelate(Y_P, S_P, nb)
    F_stack = np.vstack([F_R[:, b * n_rf:(b + 1) * n_rf].conj().T for b in range(nb)])
    Theta = F_stack @ A
    K_P = S_P.shape[0]
    # per-entry noise variance after decorrelation: sigma2 * ||S_b^+ row||^2 * ||F column||^2
    Sb = S_P[:, : S_P.shape[1] // nb]
    noise_var = sigma2 * float(np.mean(np.sum(np.abs(np.linalg.pinv(Sb)) ** 2, axis=0)))
    noise_var *= float(np.mean(np.sum(np.abs(F_R) ** 2, axis=0)))
    tol = math.sqrt(Theta.shape[0] * noise_var)
    X = np.zeros((A.shape[1], K_P), dtype=complex)
    for i in range(K_P):
        if method == "omp":
            X[:, i] = omp_estimate(Z[:, i], Theta, min(sparsity, Theta.shape[0]), tol=tol).x_hat
        elif method == "amp":
            X[:, i] = amp_estimate(Z[:, i], Theta).x_hat
        else:
            raise ValueError(f"unknown angular method {method!r}")
    return A @ X
