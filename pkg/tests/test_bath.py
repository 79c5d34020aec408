import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from epscpmg.bath import (correlation_time, derive_seed, field_at, field_timeline,
                          onsite_field_segments, sample_trajectory, sign_autocorrelation)
from epscpmg.errors import ContractError
from epscpmg.geometry import DensityPair, fixed_configuration, sample_configuration


def test_correlation_time():
    assert correlation_time(23.2) == pytest.approx(50 / 23.2)
    assert correlation_time(23.2) == pytest.approx(2.155, abs=1e-3)
    assert correlation_time(0) == float("inf")
    assert correlation_time(5.0) == pytest.approx(2 * correlation_time(10.0))
    taus = [correlation_time(n) for n in (1, 10, 100, 1e6)]
    assert all(a > b for a, b in zip(taus, taus[1:]))
    assert taus[-1] < 1e-3


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(7, 1, 2) == derive_seed(7, 1, 2)
    seen = {derive_seed(7, r, k) for r in range(50) for k in range(3)}
    assert len(seen) == 150


def test_static_bath_has_no_flips():
    cfg = fixed_configuration(np.zeros((2, 2)), np.ones((2, 3)))
    traj = sample_trajectory(cfg, float("inf"), 10.0, seed=1)
    assert traj.flip_times.size == 0


def test_trajectory_determinism_and_order():
    cfg = sample_configuration(DensityPair(2.1, 23.2), 6, seed=2)
    a = sample_trajectory(cfg, 0.5, 8.0, seed=3)
    b = sample_trajectory(cfg, 0.5, 8.0, seed=3)
    np.testing.assert_array_equal(a.flip_times, b.flip_times)
    np.testing.assert_array_equal(a.flip_spins, b.flip_spins)
    np.testing.assert_array_equal(a.initial_signs, b.initial_signs)
    assert np.all(np.diff(a.flip_times) >= 0)
    assert np.all((a.flip_times > 0) & (a.flip_times < 8.0))


def test_mean_flip_count():
    cfg = fixed_configuration(np.zeros((1, 1)), np.ones((1, 7)))
    horizon, tau_c = 3.0, 0.8
    counts = np.array([sample_trajectory(cfg, tau_c, horizon, s).flip_times.size for s in range(1000)])
    mean = 7 * horizon / tau_c
    assert abs(counts.mean() - mean) < 3 * np.sqrt(mean / counts.size)


def test_per_spin_counts_are_poisson():
    cfg = fixed_configuration(np.zeros((1, 1)), np.ones((1, 1)))
    counts = np.array([sample_trajectory(cfg, 0.5, 2.0, s).flip_times.size for s in range(4000)])
    # Poisson: variance equals mean
    assert counts.var() == pytest.approx(counts.mean(), rel=0.1)
    assert counts.mean() == pytest.approx(4.0, rel=0.05)


def test_autocorrelation():
    tau_c = 1.3
    acf = sign_autocorrelation(tau_c, [0.5 * tau_c, tau_c], n_samples=10_000, seed=4)
    np.testing.assert_allclose(acf, np.exp([-1.0, -2.0]), rtol=0.05)


def test_zero_mean():
    cfg = fixed_configuration(np.zeros((1, 1)), np.ones((1, 1)))
    signs = np.array([sample_trajectory(cfg, 1.3, 2.0, s).signs_at(1.3)[0] for s in range(5000)])
    assert abs(signs.mean()) < 3 / np.sqrt(signs.size)


def test_empty_bath_single_segment():
    cfg = fixed_configuration(np.zeros((2, 2)))
    traj = sample_trajectory(cfg, 1.0, 5.0, seed=0)
    segs = onsite_field_segments(cfg, traj)
    assert len(segs) == 1
    a, b, f = segs[0]
    assert (a, b) == (0.0, 5.0)
    np.testing.assert_array_equal(f, 0.0)


def test_single_telegraph_swaps_sign():
    c = np.array([[0.3], [-0.7]])
    cfg = fixed_configuration(np.zeros((2, 2)), c)
    traj = sample_trajectory(cfg, float("inf"), 4.0, seed=0)
    traj = type(traj)(traj.initial_signs, np.array([1.5]), np.array([0]), 4.0, 0)
    segs = onsite_field_segments(cfg, traj)
    assert [(a, b) for a, b, _ in segs] == [(0.0, 1.5), (1.5, 4.0)]
    s = traj.initial_signs[0]
    np.testing.assert_allclose(segs[0][2], c[:, 0] * s)
    np.testing.assert_allclose(segs[1][2], -c[:, 0] * s)


def test_fields_match_direct_summation():
    cfg = sample_configuration(DensityPair(1.0, 40.0), 4, seed=5)
    traj = sample_trajectory(cfg, 0.3, 6.0, seed=9)
    segs = onsite_field_segments(cfg, traj)
    probes = np.random.default_rng(0).uniform(0, 6.0, 100)
    for t in probes:
        seg = next(f for a, b, f in segs if a <= t < b)
        np.testing.assert_allclose(seg, field_at(cfg, traj, t), atol=1e-12)


@given(t0=st.floats(0, 5), length=st.floats(0, 5), seed=st.integers(0, 10_000))
def test_segments_tile_window(t0, length, seed):
    cfg = fixed_configuration(np.zeros((2, 2)), np.ones((2, 4)))
    traj = sample_trajectory(cfg, 0.2, 10.0, seed)
    t1 = t0 + length
    segs = onsite_field_segments(cfg, traj, t0, t1)
    if t1 <= t0:  # window vanishes after rounding
        assert segs == []
        return
    assert segs[0][0] == t0 and segs[-1][1] == t1
    for (a0, b0, _), (a1, b1, _) in zip(segs, segs[1:]):
        assert b0 == a1
    assert all(b > a for a, b, _ in segs)
    assert sum(b - a for a, b, _ in segs) == pytest.approx(length, abs=1e-12)


def test_window_beyond_horizon():
    cfg = fixed_configuration(np.zeros((1, 1)), np.ones((1, 1)))
    traj = sample_trajectory(cfg, 1.0, 2.0, seed=0)
    with pytest.raises(ContractError):
        onsite_field_segments(cfg, traj, 0.0, 3.0)
    with pytest.raises(ContractError):
        sample_trajectory(cfg, 1.0, 0.0, seed=0)


def test_window_tolerates_rounding_past_horizon():
    cfg = fixed_configuration(np.zeros((1, 1)), [[0.5]])
    traj = sample_trajectory(cfg, float("inf"), 4.8, seed=0)
    tl = field_timeline(cfg, traj)
    dt, fields = tl.window(4.6000000000000005, 4.800000000000002)
    assert dt.sum() == pytest.approx(0.2) and len(fields) == 1
