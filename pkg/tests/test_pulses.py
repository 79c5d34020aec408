import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import random_couplings
from epscpmg import spin_core as sc
from epscpmg.bath import sample_trajectory
from epscpmg.errors import ContractError
from epscpmg.geometry import DensityPair, fixed_configuration, sample_configuration
from epscpmg.pulses import (CoherencePoint, Family, PulseSequenceSpec, SequenceRunner, draw_jitter,
                            readout_time, run_sequence, total_duration)

FAMILIES = [Family.EPS_CPMG, Family.APCPMG, Family.HAHN_ECHO, Family.FREE_EVOLUTION]


def static(config, horizon):
    return sample_trajectory(config, float("inf"), horizon, seed=0)


def test_total_duration_examples():
    assert total_duration(PulseSequenceSpec(n_pulses=0)) == 0
    assert total_duration(PulseSequenceSpec(n_pulses=10, tau=0.25)) == pytest.approx(5.0)
    assert total_duration(PulseSequenceSpec(family="hahn_echo", n_pulses=1, tau=0.7)) == pytest.approx(1.4)
    assert total_duration(PulseSequenceSpec(n_pulses=4, tau=0.25, pulse_duration=0.04)) == pytest.approx(2.16)


def test_spec_validation():
    with pytest.raises(ContractError):
        PulseSequenceSpec(tau=0)
    with pytest.raises(ContractError):
        PulseSequenceSpec(tau=0.1, pulse_duration=0.2)
    with pytest.raises(ContractError):
        PulseSequenceSpec(family="hahn_echo", n_pulses=2)
    np.testing.assert_array_equal(PulseSequenceSpec(family="apcpmg", n_pulses=4).phase_pattern(),
                                  [1, -1, 1, -1])
    np.testing.assert_array_equal(PulseSequenceSpec(n_pulses=3).phase_pattern(), [1, 1, 1])


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("eps", [0.0, 0.4, -1.2])
def test_bare_spin_keeps_coherence(family, eps):
    cfg = fixed_configuration(np.zeros((1, 1)))
    n = 1 if family is Family.HAHN_ECHO else 6
    spec = PulseSequenceSpec(family=family, n_pulses=n, epsilon=eps)
    pts = run_sequence(cfg, static(cfg, total_duration(spec)), spec, list(range(n + 1)))
    for p in pts:
        assert p.coherence == pytest.approx(1.0, abs=1e-12)


def test_static_echo_identity():
    cfg = fixed_configuration(np.zeros((1, 1)), [[0.9, -0.4, 1.7]])
    spec = PulseSequenceSpec(n_pulses=64, tau=0.25)
    pts = run_sequence(cfg, static(cfg, total_duration(spec)), spec, list(range(0, 65, 2)))
    assert all(abs(p.coherence - 1) < 1e-9 for p in pts)


def test_two_spin_dense_oracle():
    j = np.array([[0, 0.8], [0.8, 0]])
    cfg = fixed_configuration(j)
    spec = PulseSequenceSpec(n_pulses=8, tau=0.3)
    traj = static(cfg, total_duration(spec))
    got = [p.coherence for p in run_sequence(cfg, traj, spec, range(9))]
    ref = [oracles.coherence(s) for s in oracles.sequence_states(cfg, traj, spec, 0.0)]
    np.testing.assert_allclose(got, ref, atol=1e-8)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("t_p", [0.0, 0.05])
def test_whole_sequence_oracle_with_flips(rng, family, t_p):
    m = 3
    cfg = fixed_configuration(random_couplings(rng, m, 0.5), rng.normal(0, 1.0, (m, 4)))
    n = 1 if family is Family.HAHN_ECHO else 4
    spec = PulseSequenceSpec(family=family, n_pulses=n, tau=0.3, pulse_duration=t_p)
    traj = sample_trajectory(cfg, 0.2, total_duration(spec), seed=11)
    assert traj.flip_times.size > 5
    eps = [0.0, 0.35, -0.8]
    runner = SequenceRunner(cfg)
    for k, states in runner.iter_states(traj, spec, eps, n):
        for row, e in zip(states, eps):
            ref = oracles.sequence_states(cfg, traj, spec, e)[k]
            assert abs(np.vdot(ref, row)) ** 2 > 1 - 1e-12


def test_apcpmg_pair_is_identity():
    for eps in (0.1, -0.7, 1.3):
        pair = sc.rotation_matrix((0, -1, 0), np.pi + eps) @ sc.rotation_matrix((0, 1, 0), np.pi + eps)
        np.testing.assert_allclose(pair, np.eye(2), atol=1e-15)


def test_apcpmg_cancels_offsets_without_free_evolution():
    # a bath with zero couplings leaves U_free = 1, so every pulse pair telescopes
    cfg = fixed_configuration(np.zeros((1, 1)), [[0.0]])
    spec = PulseSequenceSpec(family="apcpmg", n_pulses=10)
    traj = static(cfg, total_duration(spec))
    runner = SequenceRunner(cfg)
    c = runner.run(traj, spec, [0.0, 0.2, 0.9], [2, 4, 6, 8, 10])
    np.testing.assert_allclose(c, 1.0, atol=1e-12)


@pytest.mark.parametrize("m", [2, 3, 4])
def test_dipolar_transparency(rng, m):
    cfg = fixed_configuration(random_couplings(rng, m, 0.6))
    spec = PulseSequenceSpec(n_pulses=12, tau=0.2)
    free = spec.with_(family="free_evolution")
    traj = static(cfg, total_duration(spec))
    runner = SequenceRunner(cfg)
    np.testing.assert_allclose(runner.run(traj, spec, [0.0], range(13)),
                               runner.run(traj, free, [0.0], range(13)), atol=1e-8)


def test_half_pi_offset_suppresses_dipolar_decay():
    cfg = sample_configuration(DensityPair(2.1, 0.0), 6, seed=2)
    spec = PulseSequenceSpec(n_pulses=32, tau=0.25)
    traj = static(cfg, total_duration(spec))
    c = SequenceRunner(cfg).run(traj, spec, [0.0, np.pi / 2], range(8, 33))
    assert c[1].mean() > c[0].mean()


def test_segment_refinement_is_invisible(rng):
    cfg = fixed_configuration(random_couplings(rng, 3, 0.5), rng.normal(0, 1.0, (3, 6)))
    spec = PulseSequenceSpec(n_pulses=6, tau=0.25, pulse_duration=0.04, family="apcpmg")
    traj = sample_trajectory(cfg, 0.3, total_duration(spec), seed=5)
    eps = np.linspace(-1, 1, 5)
    a = SequenceRunner(cfg).run(traj, spec, eps, range(7))
    b = SequenceRunner(cfg, subdivide=3).run(traj, spec, eps, range(7))
    np.testing.assert_allclose(a, b, atol=1e-10, rtol=0)


def test_bath_sign_flip_symmetry(rng):
    # conjugation by prod sigma^y: B -> -B leaves |+y>, the y pulses and H_dipolar unchanged
    cfg = fixed_configuration(random_couplings(rng, 3, 0.5), rng.normal(0, 1.0, (3, 5)))
    spec = PulseSequenceSpec(n_pulses=6, tau=0.3, pulse_duration=0.05)
    traj = sample_trajectory(cfg, 0.4, total_duration(spec), seed=2)
    flipped = dataclasses.replace(traj, initial_signs=-traj.initial_signs)
    eps = [-0.5, 0.0, 0.3]
    runner = SequenceRunner(cfg)
    np.testing.assert_allclose(runner.run(traj, spec, eps, range(7)),
                               runner.run(flipped, spec, eps, range(7)), atol=1e-12)


def test_offset_reversal_identity(rng):
    # time reversal times prod sigma^z: C(eps, B, J) = C(-eps, -B, -J) for instantaneous pulses
    j = random_couplings(rng, 3, 0.5)
    c = rng.normal(0, 1.0, (3, 5))
    spec = PulseSequenceSpec(n_pulses=6, tau=0.3)
    a_cfg, b_cfg = fixed_configuration(j, c), fixed_configuration(-j, -c)
    traj = sample_trajectory(a_cfg, 0.4, total_duration(spec), seed=2)
    eps = np.array([0.2, 0.7])
    np.testing.assert_allclose(SequenceRunner(a_cfg).run(traj, spec, eps, range(7)),
                               SequenceRunner(b_cfg).run(traj, spec, -eps, range(7)), atol=1e-12)


def test_epsilon_parity_of_noninteracting_average():
    """Without dipolar couplings, the bath-averaged curve is even in eps."""
    eps = np.deg2rad(np.arange(-60, 61, 15.0))
    spec = PulseSequenceSpec(n_pulses=10, tau=0.25)
    acc = []
    for s in range(40):
        cfg = fixed_configuration(np.zeros((2, 2)), np.random.default_rng(s).normal(0, 2.0, (2, 8)))
        traj = sample_trajectory(cfg, 1.0, total_duration(spec), seed=s)
        acc.append(SequenceRunner(cfg).run(traj, spec, eps, [10])[:, 0])
    acc = np.array(acc)
    diff = acc - acc[:, ::-1]
    se = diff.std(axis=0, ddof=1) / np.sqrt(len(acc)) + 1e-15
    assert np.all(np.abs(diff.mean(axis=0)) <= 3 * se)


@given(seed=st.integers(0, 2**31), eps=st.floats(-np.pi, np.pi), t_p=st.sampled_from([0.0, 0.03]),
       family=st.sampled_from([Family.EPS_CPMG, Family.APCPMG]))
def test_coherence_bounded(seed, eps, t_p, family):
    rng = np.random.default_rng(seed)
    cfg = fixed_configuration(random_couplings(rng, 3, 2.0), rng.normal(0, 5.0, (3, 3)))
    spec = PulseSequenceSpec(family=family, n_pulses=4, tau=0.2, pulse_duration=t_p)
    traj = sample_trajectory(cfg, 0.5, total_duration(spec), seed)
    c = SequenceRunner(cfg).run(traj, spec, [eps], range(5))
    assert np.all(np.abs(c) <= 1.0)


def test_horizon_shortfall():
    cfg = fixed_configuration(np.zeros((1, 1)))
    spec = PulseSequenceSpec(n_pulses=10)
    traj = static(cfg, 1.0)
    with pytest.raises(ContractError):
        run_sequence(cfg, traj, spec, [10])
    with pytest.raises(ContractError):
        run_sequence(cfg, static(cfg, 10.0), spec, [11])


def test_coherence_point_times():
    cfg = fixed_configuration(np.zeros((1, 1)))
    spec = PulseSequenceSpec(n_pulses=5, tau=0.25, pulse_duration=0.04)
    pts = run_sequence(cfg, static(cfg, total_duration(spec)), spec, [0, 3, 5])
    assert all(isinstance(p, CoherencePoint) for p in pts)
    assert [p.time for p in pts] == pytest.approx([readout_time(spec, n) for n in (0, 3, 5)])
    assert pts[-1].time == pytest.approx(2 * 0.25 * 5 + 5 * 0.04)


def test_jitter_draws():
    spec = PulseSequenceSpec(n_pulses=5)
    np.testing.assert_array_equal(draw_jitter(spec, np.random.default_rng(0)), 0.0)
    jit = draw_jitter(spec.with_(jitter_sigma=0.1), np.random.default_rng(0))
    assert jit.shape == (5,) and np.all(jit != 0)


def test_jitter_matches_oracle(rng):
    cfg = fixed_configuration(random_couplings(rng, 2, 0.5), rng.normal(0, 1.0, (2, 2)))
    spec = PulseSequenceSpec(n_pulses=4, tau=0.3, pulse_duration=0.05, jitter_sigma=0.2)
    traj = sample_trajectory(cfg, 0.5, total_duration(spec), seed=3)
    jit = draw_jitter(spec, np.random.default_rng(1))
    got = SequenceRunner(cfg).final_states(traj, spec, [0.1], jitter=jit)[0]
    ref = oracles.sequence_states(cfg, traj, spec, 0.1, jit)[-1]
    assert abs(np.vdot(ref, got)) ** 2 > 1 - 1e-12
