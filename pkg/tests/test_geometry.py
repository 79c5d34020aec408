import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from scipy.spatial.distance import pdist

from epscpmg.errors import ContractError, GeometryError, SamplingError
from epscpmg.geometry import (DEFAULT_CONSTANTS, DensityPair, PhysicsConstants, dipolar_coupling,
                              ppm_to_number_density, sample_configuration)

SPOT_A = DensityPair(2.1, 23.2)


def test_ppm_conversion():
    assert ppm_to_number_density(1.0) == pytest.approx(176.3e-6)
    np.testing.assert_allclose(ppm_to_number_density([0, 2]), [0, 2 * 176.3e-6])
    with pytest.raises(ContractError):
        ppm_to_number_density(-1)


def test_coupling_along_and_across_axis():
    axis = np.array([0, 0, 1.0])
    c = DEFAULT_CONSTANTS.system_prefactor
    assert dipolar_coupling([0, 0, 0], [0, 0, 2], axis, c) == pytest.approx(-2 * c / 8)
    assert dipolar_coupling([0, 0, 0], [2, 0, 0], axis, c) == pytest.approx(c / 8)
    # magic angle
    u = np.array([np.sqrt(2), 0, 1]) / np.sqrt(3)
    assert dipolar_coupling([0, 0, 0], 3 * u, axis, c) == pytest.approx(0, abs=1e-12)


def test_exclusion_radius_enforced():
    with pytest.raises(GeometryError):
        dipolar_coupling([0, 0, 0], [0.1, 0, 0])


@given(st.lists(st.floats(-50, 50), min_size=6, max_size=6))
def test_coupling_symmetry(xyz):
    a, b = np.array(xyz[:3]), np.array(xyz[3:])
    if np.linalg.norm(a - b) < 1.0:
        return
    assert dipolar_coupling(a, b) == dipolar_coupling(b, a)


def test_empty_bath():
    cfg = sample_configuration(DensityPair(2.1, 0.0), 6, seed=3)
    assert cfg.n_bath == 0
    assert cfg.bath_couplings.shape == (6, 0)


def test_determinism():
    a = sample_configuration(SPOT_A, 6, seed=99)
    b = sample_configuration(SPOT_A, 6, seed=99)
    for name in ("system_positions", "bath_positions", "system_couplings", "bath_couplings"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.box_edge == b.box_edge


def test_box_edge_and_counts():
    cfg = sample_configuration(SPOT_A, 6, seed=1)
    assert cfg.box_edge == pytest.approx((6 / ppm_to_number_density(2.1)) ** (1 / 3))
    assert cfg.n_system == 6
    assert cfg.n_bath <= cfg.n_bath_drawn


def test_poisson_bath_mean():
    counts = np.array([sample_configuration(SPOT_A, 6, seed=s).n_bath_drawn for s in range(1000)])
    edge = (6 / ppm_to_number_density(2.1)) ** (1 / 3)
    mean = ppm_to_number_density(23.2) * edge**3
    assert abs(counts.mean() - mean) < 3 * np.sqrt(mean / counts.size)


@pytest.mark.parametrize("seed", range(5))
def test_configuration_invariants(seed):
    cfg = sample_configuration(SPOT_A, 6, seed=seed)
    pts = np.vstack([cfg.system_positions, cfg.bath_positions])
    assert pdist(pts).min() >= DEFAULT_CONSTANTS.exclusion_radius
    m = cfg.n_system
    const = cfg.constants
    for i in range(m):
        for j in range(m):
            if i != j:
                ref = dipolar_coupling(cfg.system_positions[i], cfg.system_positions[j], const.axis,
                                       const.system_prefactor)
                assert cfg.system_couplings[i, j] == pytest.approx(ref, rel=1e-12)
        for k in range(cfg.n_bath):
            ref = dipolar_coupling(cfg.system_positions[i], cfg.bath_positions[k], const.axis,
                                   const.bath_prefactor)
            assert cfg.bath_couplings[i, k] == pytest.approx(ref, rel=1e-12)
    # truncation keeps only spins above the threshold
    assert np.all(np.abs(cfg.bath_couplings).max(axis=0) > const.bath_threshold)


def test_statistical_isotropy():
    """(1 - 3 cos^2) of random pairs follows the uniform-direction law.

    Only pairs closer than half the box edge are used: separations of points
    in a cube are biased towards its diagonals at long range.
    """
    axis = DEFAULT_CONSTANTS.axis
    samples = []
    seed = 0
    while len(samples) < 10_000:
        cfg = sample_configuration(DensityPair(2.1, 0.0), 8, seed=seed)
        seed += 1
        p = cfg.system_positions
        d = (p[:, None, :] - p[None, :, :])[np.triu_indices(8, 1)]
        r = np.linalg.norm(d, axis=1)
        keep = r < cfg.box_edge / 2
        u = (d[keep] @ axis) / r[keep]
        samples.extend(1 - 3 * u**2)
    samples = np.array(samples[:10_000])
    result = stats.kstest(samples, lambda x: 1 - np.sqrt((1 - np.asarray(x)) / 3))
    assert result.pvalue > 0.01


def test_local_trace_finite_and_heavy_tailed():
    sums = []
    for s in range(200):
        j = sample_configuration(SPOT_A, 6, seed=s).system_couplings
        sums.append((j**2).sum(axis=1))
    sums = np.concatenate(sums)
    assert np.all(np.isfinite(sums))
    # heavy tail: the maximum sits far above the median
    assert sums.max() > 20 * np.median(sums)


def test_unphysical_density_raises():
    const = PhysicsConstants(exclusion_radius=3.0, max_retries=20)
    with pytest.raises(SamplingError):
        sample_configuration(DensityPair(5e4, 5e4), 6, seed=0, constants=const)


def test_invalid_inputs():
    with pytest.raises(ContractError):
        DensityPair(-1, 2)
    with pytest.raises(ContractError):
        sample_configuration(DensityPair(0, 2), 6, seed=0)
    with pytest.raises(ContractError):
        PhysicsConstants(carbon_density=0)
