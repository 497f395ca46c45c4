import itertools
import math

import numpy as np
import pytest
import torch

from lecln.baselines import (amp_estimate, angular_estimate, interpolate_freq, ls_estimate, omp_estimate,
                             replicate_nearest, soft_threshold, stacked_operator)
from lecln.channel import ChannelPath, SystemConfig, assemble_wideband, normalize_channel
from lecln.codebook import ulo_dft_codebook
from lecln.eval import nmse
from lecln.model import CiCnn, ModelDims, from_planes, stage_b_tensors, train_stage_b
from lecln.nn import TrainConfig
from lecln.pilots import make_precoder, noise_for_snr, pilot_symbols, transmit_pilots


def random_h(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def ls_setup(N_P, seed=0):
    prec = make_precoder(SystemConfig(), seed, n_blocks=N_P // 8)
    return prec, pilot_symbols(8, N_P)


def test_stacked_operator_matches_observation():
    rng = np.random.default_rng(0)
    prec, S = ls_setup(16)
    H = random_h(rng, (32, 8))
    Y = transmit_pilots(H, S, prec, 0.0, 0).Y_P
    M = stacked_operator(prec.F_R, S, 8)
    np.testing.assert_allclose(M @ H.reshape(-1, order="F"), Y.reshape(-1, order="F"), atol=1e-12)


def test_ls_noiseless_exact_recovery():
    rng = np.random.default_rng(1)
    prec, S = ls_setup(32)
    H = random_h(rng, (32, 8))
    est = ls_estimate(transmit_pilots(H, S, prec, 0.0, 0).Y_P, prec.F_R, S, 8)
    assert not est.underdetermined
    assert np.linalg.norm(est.H_P - H) / np.linalg.norm(H) < 1e-9


def test_ls_underdetermined_flag():
    prec, S = ls_setup(8)
    est = ls_estimate(np.zeros((8, 8), dtype=complex), prec.F_R, S, 8)
    assert est.underdetermined
    assert est.rank == 64


def ls_nmse_slope(snrs=np.arange(-3, 22, 3), trials=60, seed=0):
    rng = np.random.default_rng(seed)
    prec, S = ls_setup(32, seed)
    H = random_h(rng, (32, 8))
    curve = []
    for snr in snrs:
        s2 = noise_for_snr(prec.F_R, H, snr)
        errs = [nmse(ls_estimate(transmit_pilots(H, S, prec, s2, 1000 * t + int(snr) + 7).Y_P,
                                 prec.F_R, S, 8).H_P, H) for t in range(trials)]
        curve.append(10 * math.log10(np.mean(errs)))
    return np.polyfit(snrs, curve, 1)[0]


def test_ls_nmse_slope_minus_one():
    slope = ls_nmse_slope()
    assert abs(slope + 1) <= 0.1


def test_omp_one_sparse_exact():
    rng = np.random.default_rng(2)
    cb = ulo_dft_codebook(1.7)
    Theta = make_precoder(SystemConfig(), 0).F_R.conj().T @ cb.A
    for _ in range(20):
        d = rng.integers(64)
        c = complex(rng.standard_normal(), rng.standard_normal())
        est = omp_estimate(c * Theta[:, d], Theta, 1)
        assert est.support == (d,)
        assert est.x_hat[d] == pytest.approx(c, abs=1e-10)


def test_omp_orthogonal_atoms_brute_force():
    rng = np.random.default_rng(3)
    D, k = 12, 3
    Q, _ = np.linalg.qr(random_h(rng, (16, D)))
    x = np.zeros(D, dtype=complex)
    x[rng.choice(D, k, replace=False)] = random_h(rng, k) + 1
    y = Q @ x
    est = omp_estimate(y, Q, k)
    # exhaustive search over every support of size k
    best = min(itertools.combinations(range(D), k),
               key=lambda s: np.linalg.norm(y - Q[:, s] @ np.linalg.lstsq(Q[:, s], y, rcond=None)[0]))
    assert set(est.support) == set(best)
    np.testing.assert_allclose(est.x_hat, x, atol=1e-10)


def test_omp_zero_measurement():
    est = omp_estimate(np.zeros(8), np.eye(8), 3)
    assert est.support == ()
    assert not est.x_hat.any()


def test_omp_never_repeats_atoms():
    rng = np.random.default_rng(4)
    Theta = random_h(rng, (8, 20))
    est = omp_estimate(random_h(rng, 8), Theta, 8)
    assert len(set(est.support)) == len(est.support)
    assert all(b <= a + 1e-12 for a, b in zip(est.history, est.history[1:]))


def test_amp_oversampled_two_sparse():
    rng = np.random.default_rng(5)
    for _ in range(10):
        Theta = random_h(rng, (96, 32)) / math.sqrt(96)
        x = np.zeros(32, dtype=complex)
        x[rng.choice(32, 2, replace=False)] = random_h(rng, 2)
        r = amp_estimate(Theta @ x, Theta, iterations=100)
        assert 10 * math.log10(nmse(r.x_hat, x)) < -30


def test_amp_zero_measurement():
    r = amp_estimate(np.zeros(8), random_h(np.random.default_rng(0), (8, 16)))
    assert not r.x_hat.any()
    assert not r.diverged


def test_amp_damping_helps_on_quantized_phase_theta():
    rng = np.random.default_rng(6)
    cb = ulo_dft_codebook(1.0)
    damped, undamped = [], []
    for t in range(20):
        F = make_precoder(SystemConfig(), t, n_blocks=4).F_R
        Theta = np.vstack([F[:, 8 * b:8 * b + 8].conj().T for b in range(4)]) @ cb.A
        x = np.zeros(64, dtype=complex)
        x[rng.choice(64, 3, replace=False)] = random_h(rng, 3)
        y = Theta @ x
        for out, d in ((damped, 0.7), (undamped, 1.0)):
            out.append(np.linalg.norm(y - Theta @ amp_estimate(y, Theta, damping=d).x_hat))
    assert np.median(damped) <= np.median(undamped)


def test_amp_validation():
    with pytest.raises(ValueError):
        amp_estimate(np.ones(4), np.eye(4), damping=0.0)


def test_soft_threshold():
    r = np.array([3 + 4j, 0.1, 0.0])
    np.testing.assert_allclose(soft_threshold(r, 1.0), [(3 + 4j) * 4 / 5, 0, 0])


def test_interpolation_flat_and_linear():
    V = [1, 9, 17, 25, 33, 41, 49, 57]
    flat = np.full((4, 8), 1.5 - 2j)
    np.testing.assert_allclose(interpolate_freq(flat, V, 64), np.full((4, 64), 1.5 - 2j))
    m = np.arange(1, 65)
    lin = (0.3 + 0.1j) * m[None, :] + np.arange(4)[:, None]
    got = interpolate_freq(lin[:, np.asarray(V) - 1], V, 64)
    np.testing.assert_allclose(got[:, :57], lin[:, :57], atol=1e-12)


def test_replicate_nearest_and_single_pilot():
    H = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(replicate_nearest(H, [2, 6], 8), [[1, 1, 1, 1, 2, 2, 2, 2]])  # tie at 4 goes low
    np.testing.assert_array_equal(interpolate_freq(H[:, :1], [3], 4), [[1, 1, 1, 1]])


def test_angular_estimates_recover_sparse_channel():
    cb = ulo_dft_codebook(2.0)
    prec, S = ls_setup(32)
    H = 4 * cb.A[:, [10, 40]] @ np.array([[1.0] * 8, [0.5j] * 8])
    Y = transmit_pilots(H, S, prec, 0.0, 0).Y_P
    for method in ("omp", "amp"):
        est = angular_estimate(method, Y, prec.F_R, S, cb.A, 8, sigma2=0.0, sparsity=2)
        assert nmse(est, H) < 1e-2, method
    with pytest.raises(ValueError):
        angular_estimate("bogus", Y, prec.F_R, S, cb.A, 8)


def test_ci_cnn_beats_interpolation_on_delayed_path():
    rng = np.random.default_rng(0)
    sysc = SystemConfig(N_t=8, N_RF=4, N_s=64)

    def channels(n):
        return np.stack([normalize_channel(assemble_wideband(
            [ChannelPath(alpha=1.0, theta=rng.uniform(0, 2 * math.pi), tau=2.0, phi=rng.uniform(0, 2 * math.pi))],
            sysc).H) for _ in range(n)])

    sets = {1: tuple(range(1, 65, 8))}
    H_tr, H_te = channels(192), channels(32)
    x, t = stage_b_tensors(H_tr, np.ones(192, dtype=int), sets)
    model = CiCnn(ModelDims(N_t=8, N_s=64, K_P=8, ci_ch=(16, 16, 16, 16, 16)), seed=0)
    train_stage_b(model, x, t, TrainConfig(batch_size=32, lr0=3e-3, epochs=30, milestones=(20, 26)))
    x_te, _ = stage_b_tensors(H_te, np.ones(32, dtype=int), sets)
    with torch.no_grad():
        est = from_planes(model.forward(x_te))
    idx = np.asarray(sets[1]) - 1
    e_ci = np.mean([nmse(est[i], H_te[i]) for i in range(32)])
    e_lin = np.mean([nmse(interpolate_freq(h[:, idx], sets[1], 64), h) for h in H_te])
    e_rep = np.mean([nmse(replicate_nearest(h[:, idx], sets[1], 64), h) for h in H_te])
    assert e_lin > 0
    assert e_ci < e_lin
    assert e_ci < e_rep
