import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lecln.channel import SystemConfig
from lecln.pilots import (InfiniteSNR, PilotPlan, PilotPlanInfeasible, make_precoder, measure_snr, noise_for_snr,
                          pilot_subcarriers, pilot_symbols, transmit_pilots)


def test_pilot_set_user_one():
    assert pilot_subcarriers(1, 64, 8, 2) == (1, 9, 17, 25, 33, 41, 49, 57)


def test_pilot_sets_disjoint():
    a = pilot_subcarriers(1, 64, 8, 2)
    b = pilot_subcarriers(2, 64, 8, 2)
    assert b == (2, 10, 18, 26, 34, 42, 50, 58)
    assert not set(a) & set(b)


def test_pilot_plan_infeasible():
    with pytest.raises(PilotPlanInfeasible, match="infeasible"):
        pilot_subcarriers(1, 64, 8, 9)


@given(st.integers(1, 8), st.sampled_from([4, 8, 16]))
def test_pilot_plan_sets_pairwise_disjoint(K, K_P):
    N_s = 64
    if K * K_P > N_s or K > N_s // K_P:
        return
    plan = PilotPlan.build(N_s=N_s, K_P=K_P, K=K)
    all_idx = [i for k in range(1, K + 1) for i in plan.indices(k)]
    assert len(all_idx) == len(set(all_idx))
    assert all(1 <= i <= N_s for i in all_idx)


def test_precoder_quantized_phases():
    F = make_precoder(SystemConfig(B=3), seed=1).F_R
    assert F.shape == (32, 8)
    q = np.round(np.angle(F * math.sqrt(32)) / (2 * math.pi / 8)) % 8
    np.testing.assert_allclose(F * math.sqrt(32), np.exp(2j * math.pi * q / 8), atol=1e-12)
    assert np.linalg.norm(F) ** 2 == pytest.approx(8)


def test_precoder_one_bit():
    F = make_precoder(SystemConfig(B=1), seed=2).F_R * math.sqrt(32)
    np.testing.assert_allclose(np.abs(F.imag), 0, atol=1e-12)
    assert set(np.round(F.real).astype(int).ravel()) <= {-1, 1}


def test_precoder_deterministic_and_blocks():
    a = make_precoder(SystemConfig(), seed=9, n_blocks=2)
    b = make_precoder(SystemConfig(), seed=9, n_blocks=2)
    np.testing.assert_array_equal(a.F_R, b.F_R)
    assert a.n_blocks == 2
    np.testing.assert_array_equal(a.block(1), a.F_R[:, 8:])


@pytest.mark.parametrize("N_P", [8, 12, 16, 32])
def test_pilot_symbols_orthonormal_rows(N_P):
    S = pilot_symbols(8, N_P)
    np.testing.assert_allclose(S @ S.conj().T, np.eye(8), atol=1e-12)


def test_noiseless_identity_pilots():
    rng = np.random.default_rng(0)
    H_P = rng.standard_normal((32, 8)) + 1j * rng.standard_normal((32, 8))
    prec = make_precoder(SystemConfig(), 3)
    obs = transmit_pilots(H_P, np.eye(8), prec, 0.0, seed=0)
    np.testing.assert_allclose(obs.Y_P, prec.F_R.conj().T @ H_P, atol=1e-12)


def test_noise_only_variance():
    prec = make_precoder(SystemConfig(), 4)
    sigma2 = 0.3
    n_draws = 2000
    ys = np.stack([transmit_pilots(np.zeros((32, 8)), np.eye(8), prec, sigma2, seed=s).Y_P for s in range(n_draws)])
    # each entry of F^H n has variance sigma2 * ||F column||^2 = sigma2 (unit-norm columns); 8*8*2000 samples
    var = np.mean(np.abs(ys) ** 2)
    expected = sigma2 * np.mean(np.sum(np.abs(prec.F_R) ** 2, axis=0))
    n = ys.size
    # |z|^2 of a complex Gaussian is exponential: std = mean
    assert abs(var - expected) < 3 * expected / math.sqrt(n)


def test_pilot_linearity():
    rng = np.random.default_rng(1)
    H_P = rng.standard_normal((32, 8)) + 1j * rng.standard_normal((32, 8))
    prec = make_precoder(SystemConfig(), 5)
    S = pilot_symbols(8, 8)
    a = transmit_pilots(H_P, S, prec, 0.1, seed=3).Y_P
    b = transmit_pilots(H_P, 2 * S, prec, 0.1, seed=3).Y_P
    noise = transmit_pilots(np.zeros_like(H_P), S, prec, 0.1, seed=3).Y_P
    np.testing.assert_allclose(b - noise, 2 * (a - noise), atol=1e-12)


def test_pilot_blocks_use_their_own_combiner():
    rng = np.random.default_rng(2)
    H_P = rng.standard_normal((32, 8)) + 1j * rng.standard_normal((32, 8))
    prec = make_precoder(SystemConfig(), 6, n_blocks=2)
    S = pilot_symbols(8, 16)
    Y = transmit_pilots(H_P, S, prec, 0.0, seed=0).Y_P
    np.testing.assert_allclose(Y[:, 8:], prec.block(1).conj().T @ H_P @ S[:, 8:], atol=1e-12)


def test_snr_unit_ratio_is_zero_db():
    rng = np.random.default_rng(3)
    F = make_precoder(SystemConfig(), 1).F_R
    H = rng.standard_normal((32, 64)) + 1j * rng.standard_normal((32, 64))
    sigma2 = np.linalg.norm(F.conj().T @ H) ** 2 / np.linalg.norm(F) ** 2
    assert measure_snr(F, H, sigma2) == pytest.approx(0.0, abs=1e-12)


def test_snr_scaling_and_oracle():
    rng = np.random.default_rng(4)
    F = make_precoder(SystemConfig(), 1).F_R
    H = rng.standard_normal((32, 64)) + 1j * rng.standard_normal((32, 64))
    base = measure_snr(F, H, 0.5)
    assert measure_snr(F, 10 * H, 0.5) == pytest.approx(base + 20)
    num = sum(abs(np.sum(F[:, r].conj() * H[:, m])) ** 2 for r in range(8) for m in range(64))
    den = 0.5 * sum(abs(x) ** 2 for x in F.ravel())
    assert base == pytest.approx(10 * math.log10(num / den))
    assert measure_snr(F, H, 0.5, per_subcarrier=True) == pytest.approx(base - 10 * math.log10(64))


def test_snr_errors():
    F = make_precoder(SystemConfig(), 1).F_R
    H = np.ones((32, 4), dtype=complex)
    with pytest.raises(InfiniteSNR):
        measure_snr(F, H, 0.0)
    with pytest.raises(ValueError):
        measure_snr(F, H, -1.0)


@settings(max_examples=25)
@given(st.floats(-10, 30))
def test_noise_for_snr_inverts_measure(snr):
    rng = np.random.default_rng(5)
    F = make_precoder(SystemConfig(), 2).F_R
    H = rng.standard_normal((32, 64)) + 1j * rng.standard_normal((32, 64))
    for per in (False, True):
        s2 = noise_for_snr(F, H, snr, per_subcarrier=per)
        assert measure_snr(F, H, s2, per_subcarrier=per) == pytest.approx(snr, abs=1e-9)
