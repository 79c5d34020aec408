"""Random spatial configurations of system and bath spins with dipolar couplings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError, GeometryError, SamplingError

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class PhysicsConstants:
    """Material and coupling constants.

    ``system_prefactor`` and ``bath_prefactor`` multiply
    ``(1 - 3 cos^2 theta) / r^3`` and are in rad nm^3 / us.  The defaults are the
    electron-spin dipolar constant ``2 pi 52 MHz nm^3`` divided by 4 (Pauli
    flip-flop form) and by 2 (secular sigma^z field) respectively.
    """

    carbon_density: float = 176.3  # nm^-3
    system_prefactor: float = TWO_PI * 13.0
    bath_prefactor: float = TWO_PI * 26.0
    exclusion_radius: float = 0.5  # nm
    bath_threshold: float = 1e-4  # rad/us
    quantization_axis: tuple = (1.0, 1.0, 1.0)
    max_retries: int = 10_000

    def __post_init__(self):
        for name in ("carbon_density", "system_prefactor", "bath_prefactor", "exclusion_radius"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        if self.bath_threshold < 0:
            raise ContractError("bath_threshold must be non-negative")

    @property
    def axis(self):
        a = np.asarray(self.quantization_axis, dtype=float)
        return a / np.linalg.norm(a)


DEFAULT_CONSTANTS = PhysicsConstants()


@dataclass(frozen=True)
class DensityPair:
    """System and bath spin concentrations in ppm of carbon sites."""

    n_system: float
    n_bath: float

    def __post_init__(self):
        if self.n_system < 0 or self.n_bath < 0:
            raise ContractError(f"densities must be non-negative: {self}")

    def as_tuple(self):
        return (float(self.n_system), float(self.n_bath))


def ppm_to_number_density(x, carbon_density=DEFAULT_CONSTANTS.carbon_density):
    """Convert a ppm concentration to spins per nm^3."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ContractError(f"concentration must be >= 0 ppm, got {x}")
    out = x * 1e-6 * carbon_density
    return float(out) if out.ndim == 0 else out


def _kernel(separation, axis):
    """(1 - 3 cos^2 theta) / r^3 for stacked separation vectors."""
    r2 = np.sum(separation**2, axis=-1)
    r = np.sqrt(r2)
    cos = (separation @ axis) / r
    return (1.0 - 3.0 * cos**2) / (r2 * r), r


def dipolar_coupling(r_a, r_b, axis=DEFAULT_CONSTANTS.axis, prefactor=DEFAULT_CONSTANTS.system_prefactor,
                     exclusion_radius=DEFAULT_CONSTANTS.exclusion_radius):
    """Secular dipolar coupling ``prefactor (1 - 3 cos^2 theta) / |r_a - r_b|^3``.

    Raises
    ------
    GeometryError
        If the two positions are closer than ``exclusion_radius``.
    """
    sep = np.asarray(r_a, dtype=float) - np.asarray(r_b, dtype=float)
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    r = np.linalg.norm(sep)
    if r < exclusion_radius or r == 0:
        raise GeometryError(f"separation {r:.3g} nm is below the exclusion radius")
    k, _ = _kernel(sep, axis)
    return float(prefactor * k)


def system_coupling_matrix(positions, axis, prefactor):
    positions = np.asarray(positions, dtype=float)
    m = positions.shape[0]
    sep = positions[:, None, :] - positions[None, :, :]
    out = np.zeros((m, m))
    iu = np.triu_indices(m, 1)
    if iu[0].size:
        k, _ = _kernel(sep[iu], axis)
        out[iu] = prefactor * k
        out = out + out.T
    return out


def bath_coupling_matrix(system_positions, bath_positions, axis, prefactor):
    """``c_ik``: sigma^z field on system spin i from bath spin k, shape (M, K)."""
    bath_positions = np.asarray(bath_positions, dtype=float).reshape(-1, 3)
    system_positions = np.asarray(system_positions, dtype=float)
    if bath_positions.shape[0] == 0:
        return np.zeros((system_positions.shape[0], 0))
    sep = system_positions[:, None, :] - bath_positions[None, :, :]
    k, _ = _kernel(sep, axis)
    return prefactor * k


@dataclass(frozen=True)
class SpinConfiguration:
    """One disorder realization: positions (nm) and coupling tables (rad/us).

    ``bath_positions`` holds only bath spins kept after the coupling
    threshold; ``n_bath_drawn`` is the Poisson count before truncation.
    """

    system_positions: np.ndarray
    bath_positions: np.ndarray
    quantization_axis: np.ndarray
    system_couplings: np.ndarray
    bath_couplings: np.ndarray
    box_edge: float
    seed: int
    n_bath_drawn: int = 0
    densities: DensityPair | None = None
    constants: PhysicsConstants = field(default=DEFAULT_CONSTANTS)

    @property
    def n_system(self):
        return self.system_positions.shape[0]

    @property
    def n_bath(self):
        return self.bath_positions.shape[0]


def _uniform_box(rng, n, edge):
    return rng.uniform(0.0, edge, size=(n, 3))


def _resolve_exclusion(rng, system, bath, edge, radius, max_retries):
    """Redraw points closer than ``radius`` to any other point (system first)."""
    for _ in range(max_retries):
        pts = np.vstack([system, bath]) if bath.size else system
        tree = cKDTree(pts)
        pairs = tree.query_pairs(radius, output_type="ndarray")
        if pairs.size == 0:
            return system, bath
        # redraw the later index of each offending pair
        bad = np.unique(pairs.max(axis=1))
        n_sys = system.shape[0]
        bad_sys = bad[bad < n_sys]
        bad_bath = bad[bad >= n_sys] - n_sys
        if bad_sys.size:
            system = system.copy()
            system[bad_sys] = _uniform_box(rng, bad_sys.size, edge)
        if bad_bath.size:
            bath = bath.copy()
            bath[bad_bath] = _uniform_box(rng, bad_bath.size, edge)
    raise SamplingError(
        f"exclusion-radius rejection did not converge after {max_retries} rounds; "
        "density is unphysically high"
    )


def sample_configuration(densities, n_spins, seed, constants=DEFAULT_CONSTANTS):
    """Draw system and bath spins uniformly in a cube sized to hold ``n_spins``.

    The cube edge is ``(n_spins / rho_system)^(1/3)``; the bath count is Poisson
    with mean ``rho_bath * edge^3``.  Open boundaries, no periodic images.
    Deterministic in ``seed``.
    """
    if n_spins < 1:
        raise ContractError("need at least one system spin")
    if densities.n_system <= 0:
        raise ContractError("n_system must be positive for a simulation run")
    rho_sys = ppm_to_number_density(densities.n_system, constants.carbon_density)
    rho_bath = ppm_to_number_density(densities.n_bath, constants.carbon_density)
    edge = (n_spins / rho_sys) ** (1.0 / 3.0)
    rng = np.random.default_rng(seed)
    system = _uniform_box(rng, n_spins, edge)
    n_bath = int(rng.poisson(rho_bath * edge**3)) if rho_bath > 0 else 0
    bath = _uniform_box(rng, n_bath, edge) if n_bath else np.zeros((0, 3))
    system, bath = _resolve_exclusion(
        rng, system, bath, edge, constants.exclusion_radius, constants.max_retries
    )
    axis = constants.axis
    j = system_coupling_matrix(system, axis, constants.system_prefactor)
    c = bath_coupling_matrix(system, bath, axis, constants.bath_prefactor)
    if c.shape[1]:
        keep = np.abs(c).max(axis=0) > constants.bath_threshold
        bath, c = bath[keep], c[:, keep]
    return SpinConfiguration(
        system_positions=system,
        bath_positions=bath,
        quantization_axis=axis,
        system_couplings=j,
        bath_couplings=c,
        box_edge=float(edge),
        seed=int(seed),
        n_bath_drawn=n_bath,
        densities=densities,
        constants=constants,
    )


def fixed_configuration(system_couplings, bath_couplings=None, seed=0):
    """Configuration with prescribed coupling tables and no geometry.

    Useful for oracle checks where positions are irrelevant; position arrays
    are filled with NaN.
    """
    j = np.atleast_2d(np.asarray(system_couplings, dtype=float))
    m = j.shape[0]
    if bath_couplings is None:
        c = np.zeros((m, 0))
    else:
        c = np.asarray(bath_couplings, dtype=float).reshape(m, -1)
    return SpinConfiguration(
        system_positions=np.full((m, 3), np.nan),
        bath_positions=np.full((c.shape[1], 3), np.nan),
        quantization_axis=DEFAULT_CONSTANTS.axis,
        system_couplings=j,
        bath_couplings=c,
        box_edge=float("nan"),
        seed=seed,
        n_bath_drawn=c.shape[1],
    )
