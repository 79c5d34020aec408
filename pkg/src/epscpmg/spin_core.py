"""State vectors, Pauli-operator Hamiltonians and propagation for M two-level spins.

Conventions
-----------
* hbar = 1; Hamiltonian coefficients are angular frequencies in rad/us and
  times are in us.
* Qubit 0 is the most significant bit of a basis index.  Bit value 0 is the
  sigma^z = +1 state ``|0> = |+z>``.
* Rotations are ``R_n(theta) = exp(-i theta n.sigma / 2)``.  With this sign the
  preparation pulse that takes ``|+z>`` to ``|+y>`` is ``R_x(-pi/2)``; the
  helper :func:`plus_y_state` builds that state directly.

The Hamiltonian is

    H = sum_i B_i sigma_i^z + sum_{i<j} J_ij (XX + YY - ZZ)_ij
        + (drive / 2) sum_i (axis . sigma_i)

Without drive it conserves total sigma^z, so free evolution is carried out
block by block over magnetization sectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.special import jv

from .errors import CapacityError, ContractError, NumericalError

MAX_SPINS = 12
#: dense eigendecomposition is used for driven evolution up to this many spins
DENSE_LIMIT = 8

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
IDENTITY = np.eye(2, dtype=complex)


def check_capacity(n_spins):
    if n_spins < 1:
        raise ContractError(f"need at least one spin, got {n_spins}")
    if n_spins > MAX_SPINS:
        raise CapacityError(
            f"{n_spins} spins requested; at most {MAX_SPINS} are supported "
            f"(state dimension {2 ** MAX_SPINS})"
        )


@lru_cache(maxsize=None)
def basis_spins(n_spins):
    """sigma^z eigenvalue (+1/-1) of every qubit for each basis index.

    Returns an int8 array of shape ``(2**n_spins, n_spins)``.
    """
    idx = np.arange(2 ** n_spins)
    shifts = np.arange(n_spins - 1, -1, -1)
    bits = (idx[:, None] >> shifts[None, :]) & 1
    out = (1 - 2 * bits).astype(np.int8)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def magnetization_sectors(n_spins):
    """Basis indices grouped by number of down spins (0 .. n_spins)."""
    downs = (basis_spins(n_spins) < 0).sum(axis=1)
    return tuple(np.flatnonzero(downs == k) for k in range(n_spins + 1))


def _unit(axis):
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if axis.shape != (3,) or not np.isfinite(norm) or norm == 0:
        raise ContractError(f"axis must be a non-zero 3-vector, got {axis!r}")
    return axis / norm


@dataclass(frozen=True)
class HamiltonianTerms:
    """Coefficients of the system Hamiltonian (all in rad/us).

    Attributes
    ----------
    onsite_fields : ndarray, shape (M,)
        Coefficient ``B_i`` of ``sigma_i^z``.
    pair_couplings : ndarray, shape (M, M)
        Symmetric ``J_ij`` with zero diagonal, coefficient of
        ``(XX + YY - ZZ)_ij`` for ``i < j``.
    drive_amplitude : float
        Rabi rate ``Omega``; the drive term is ``Omega/2 sum_i axis.sigma_i``.
    drive_axis : 3-vector
        Drive direction, normalised on construction.
    """

    onsite_fields: np.ndarray
    pair_couplings: np.ndarray
    drive_amplitude: float = 0.0
    drive_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.onsite_fields, dtype=float))
        m = b.shape[0]
        check_capacity(m)
        j = np.asarray(self.pair_couplings, dtype=float)
        if j.size == 0 and m == 1:
            j = np.zeros((1, 1))
        if j.shape != (m, m):
            raise ContractError(f"pair_couplings must be {m}x{m}, got {j.shape}")
        if not np.allclose(j, j.T, rtol=0, atol=1e-12 * max(1.0, np.abs(j).max())):
            raise ContractError("pair_couplings must be symmetric")
        if np.any(np.diag(j) != 0):
            raise ContractError("pair_couplings must have a zero diagonal")
        object.__setattr__(self, "onsite_fields", b)
        object.__setattr__(self, "pair_couplings", j)
        object.__setattr__(self, "drive_amplitude", float(self.drive_amplitude))
        object.__setattr__(self, "drive_axis", _unit(self.drive_axis))

    @property
    def n_spins(self):
        return self.onsite_fields.shape[0]

    @property
    def dim(self):
        return 2 ** self.n_spins


def onsite_diagonal(fields):
    """Diagonal of ``sum_i B_i sigma_i^z``; ``fields`` may be stacked ``(..., M)``."""
    fields = np.asarray(fields, dtype=float)
    z = basis_spins(fields.shape[-1])
    return fields @ z.T.astype(float)


@lru_cache(maxsize=64)
def _pair_structure(n_spins):
    z = basis_spins(n_spins).astype(float)
    pairs = [(i, j) for i in range(n_spins) for j in range(i + 1, n_spins)]
    zz = np.array([z[:, i] * z[:, j] for i, j in pairs]).reshape(len(pairs), 2 ** n_spins)
    return pairs, zz


def dipolar_diagonal(couplings):
    """Diagonal of ``-sum_{i<j} J_ij sigma^z_i sigma^z_j``."""
    couplings = np.asarray(couplings, dtype=float)
    m = couplings.shape[0]
    pairs, zz = _pair_structure(m)
    if not pairs:
        return np.zeros(2 ** m)
    jv = np.array([couplings[i, j] for i, j in pairs])
    return -(jv @ zz)


def _flip_flop_entries(couplings):
    """(row, col, value) triplets for ``sum_{i<j} J_ij (XX + YY)``."""
    m = couplings.shape[0]
    idx = np.arange(2 ** m)
    rows, cols, vals = [], [], []
    for i in range(m):
        for j in range(i + 1, m):
            jij = couplings[i, j]
            if jij == 0:
                continue
            bi = 1 << (m - 1 - i)
            bj = 1 << (m - 1 - j)
            differ = ((idx & bi) > 0) != ((idx & bj) > 0)
            src = idx[differ]
            rows.append(src ^ (bi | bj))
            cols.append(src)
            vals.append(np.full(src.size, 2.0 * jij))
    if not rows:
        empty = np.zeros(0, dtype=int)
        return empty, empty, np.zeros(0)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def _drive_entries(n_spins, amplitude, axis):
    idx = np.arange(2 ** n_spins)
    z = basis_spins(n_spins)
    rows, cols, vals = [], [], []
    half = 0.5 * amplitude
    for q in range(n_spins):
        flipped = idx ^ (1 << (n_spins - 1 - q))
        # <flipped| (ax X + ay Y) |idx>; Y|0> = i|1>, Y|1> = -i|0>
        coeff = half * (axis[0] + 1j * axis[1] * z[:, q])
        rows.append(flipped)
        cols.append(idx)
        vals.append(coeff)
    diag = half * axis[2] * z.sum(axis=1)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), diag


def build_hamiltonian(terms, sparse=False):
    """Assemble the Hamiltonian as a dense (or CSR) ``2^M x 2^M`` matrix."""
    m = terms.n_spins
    check_capacity(m)
    dim = 2 ** m
    diag = onsite_diagonal(terms.onsite_fields) + dipolar_diagonal(terms.pair_couplings)
    r, c, v = _flip_flop_entries(terms.pair_couplings)
    rows = [np.arange(dim), r]
    cols = [np.arange(dim), c]
    vals = [diag.astype(complex), v.astype(complex)]
    if terms.drive_amplitude != 0:
        dr, dc, dv, dd = _drive_entries(m, terms.drive_amplitude, terms.drive_axis)
        rows += [dr, np.arange(dim)]
        cols += [dc, np.arange(dim)]
        vals += [dv, dd.astype(complex)]
    h = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(dim, dim),
    ).tocsr()
    h.sum_duplicates()
    return h if sparse else h.toarray()


def dipolar_operator(couplings):
    """Dense ``H_dipolar`` alone."""
    couplings = np.asarray(couplings, dtype=float)
    m = couplings.shape[0]
    return build_hamiltonian(HamiltonianTerms(np.zeros(m), couplings))


def collective_operator(n_spins, axis):
    """Dense ``sum_i axis.sigma_i``."""
    terms = HamiltonianTerms(np.zeros(n_spins), np.zeros((n_spins, n_spins)), 2.0, axis)
    return build_hamiltonian(terms)


def rotation_matrix(axis, angle):
    """Single-spin ``exp(-i angle axis.sigma / 2)``; ``angle`` may be an array."""
    n = _unit(axis)
    angle = np.asarray(angle, dtype=float)
    c = np.cos(angle / 2)[..., None, None]
    s = np.sin(angle / 2)[..., None, None]
    ns = n[0] * SIGMA_X + n[1] * SIGMA_Y + n[2] * SIGMA_Z
    return c * IDENTITY - 1j * s * ns


def apply_single_qubit(states, gates, n_spins):
    """Apply the same 2x2 gate(s) to every qubit.

    ``states`` has shape ``(..., 2**n_spins)``; ``gates`` is ``(2, 2)`` or
    broadcastable ``(..., 2, 2)`` matching the leading dimensions.
    """
    states = np.asarray(states, dtype=complex)
    lead = states.shape[:-1]
    gates = np.broadcast_to(gates, lead + (2, 2)).reshape(-1, 2, 2)
    psi = states.reshape(-1, *([2] * n_spins))
    for q in range(n_spins):
        psi = np.moveaxis(psi, q + 1, 1)
        shape = psi.shape
        flat = psi.reshape(shape[0], 2, -1)
        flat = np.einsum("eab,ebk->eak", gates, flat)
        psi = np.moveaxis(flat.reshape(shape), 1, q + 1)
    return psi.reshape(states.shape)


def apply_rotation(state, axis, angle):
    """Global instantaneous rotation ``prod_i exp(-i angle/2 axis.sigma_i)``."""
    state = np.asarray(state, dtype=complex)
    m = _n_spins_of(state)
    out = apply_single_qubit(state, rotation_matrix(axis, angle), m)
    _check_finite(out)
    return out


def _n_spins_of(state):
    dim = state.shape[-1]
    m = int(round(np.log2(dim)))
    if 2 ** m != dim:
        raise ContractError(f"state length {dim} is not a power of two")
    check_capacity(m)
    return m


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise NumericalError("non-finite amplitudes in state vector")


def product_state(single, n_spins):
    """Tensor power of a single-spin state."""
    check_capacity(n_spins)
    single = np.asarray(single, dtype=complex)
    single = single / np.linalg.norm(single)
    out = np.ones(1, dtype=complex)
    for _ in range(n_spins):
        out = np.kron(out, single)
    return out


def plus_y_state(n_spins):
    """``|+y>^M``, equal to ``R_x(-pi/2)`` applied to ``|+z>^M``."""
    return product_state(np.array([1.0, 1j]) / np.sqrt(2), n_spins)


def sigma_expectations(states, n_spins, op):
    """Per-qubit expectation of a single-qubit Pauli ``op`` in ``'xyz'``.

    Returns an array of shape ``states.shape[:-1] + (n_spins,)``.
    """
    states = np.asarray(states, dtype=complex)
    psi = states.reshape(-1, *([2] * n_spins))
    out = np.empty((psi.shape[0], n_spins))
    for q in range(n_spins):
        moved = np.moveaxis(psi, q + 1, 1).reshape(psi.shape[0], 2, -1)
        a, b = moved[:, 0], moved[:, 1]
        if op == "x":
            val = 2 * np.real(np.sum(np.conj(a) * b, axis=1))
        elif op == "y":
            val = 2 * np.imag(np.sum(np.conj(a) * b, axis=1))
        elif op == "z":
            val = np.sum(np.abs(a) ** 2, axis=1) - np.sum(np.abs(b) ** 2, axis=1)
        else:
            raise ValueError(op)
        out[:, q] = val
    return out.reshape(states.shape[:-1] + (n_spins,))


def mean_sigma_y(state):
    """Average ``<sigma^y>`` over all spins; vectorised over leading axes."""
    state = np.asarray(state, dtype=complex)
    m = _n_spins_of(state)
    val = sigma_expectations(state, m, "y").mean(axis=-1)
    val = np.clip(val, -1.0, 1.0)
    return float(val) if np.ndim(val) == 0 else val


def sector_blocks(matrix, n_spins):
    """Slice a magnetization-conserving matrix into its sector blocks."""
    return [matrix[np.ix_(idx, idx)] for idx in magnetization_sectors(n_spins)]


def _expm_hermitian(h, t):
    w, v = np.linalg.eigh(h)
    return (v * np.exp(-1j * w * t)[..., None, :]) @ np.conj(np.swapaxes(v, -1, -2))


def propagator(terms, duration):
    """Dense ``exp(-i H duration)``."""
    h = build_hamiltonian(terms)
    if terms.drive_amplitude == 0:
        u = np.zeros_like(h)
        for idx in magnetization_sectors(terms.n_spins):
            u[np.ix_(idx, idx)] = _expm_hermitian(h[np.ix_(idx, idx)], duration)
        return u
    return _expm_hermitian(h, duration)


def evolve(state, terms, duration):
    """Return ``exp(-i H duration) state`` for constant ``terms``."""
    if duration < 0:
        raise ContractError(f"duration must be >= 0, got {duration}")
    state = np.asarray(state, dtype=complex)
    _check_finite(state)
    if state.shape[-1] != terms.dim:
        raise ContractError("state and Hamiltonian dimensions differ")
    if duration == 0:
        return state.copy()
    if terms.drive_amplitude == 0 or terms.n_spins <= DENSE_LIMIT:
        out = state @ propagator(terms, duration).T
    else:
        h = build_hamiltonian(terms, sparse=True)
        flat = state.reshape(-1, terms.dim)
        out = chebyshev_evolve(flat, lambda x: (h @ x.T).T, spectral_bound(terms), duration)
        out = out.reshape(state.shape)
    _check_finite(out)
    return out


def spectral_bound(terms):
    """Upper bound on the operator norm of the Hamiltonian."""
    iu = np.triu_indices(terms.n_spins, 1)
    return (
        np.abs(terms.onsite_fields).sum()
        + 3.0 * np.abs(terms.pair_couplings[iu]).sum()
        + 0.5 * abs(terms.drive_amplitude) * terms.n_spins
    )


def chebyshev_evolve(states, matvec, bound, duration, tol=1e-15):
    """Rows of ``states`` propagated by ``exp(-i H duration)`` via a Chebyshev series.

    ``matvec`` maps a ``(n, dim)`` block to ``H`` applied to every row (it may
    act with a different ``H`` per row); ``bound`` is a scalar or per-row upper
    bound on ``||H||``.  The series is truncated once every remaining Bessel
    coefficient is below ``tol``, so the result is exact to rounding error.
    """
    states = np.asarray(states, dtype=complex)
    n = states.shape[0]
    a = np.broadcast_to(np.asarray(bound, dtype=float), (n,)).copy()
    a[a <= 0] = 1.0
    a *= 1.0 + 1e-12
    x = a * duration
    k_max = int(np.ceil(x.max())) + 20
    coeffs = jv(np.arange(k_max + 1)[:, None], x[None, :])
    while np.abs(coeffs[-1]).max() > tol:
        k_max *= 2
        coeffs = jv(np.arange(k_max + 1)[:, None], x[None, :])
    significant = np.flatnonzero(np.abs(coeffs).max(axis=1) > tol)
    k_stop = int(significant.max()) if significant.size else 0
    inv_a = (1.0 / a)[:, None]
    t_prev = states
    out = coeffs[0][:, None] * t_prev
    if k_stop == 0:
        return out
    t_cur = matvec(t_prev) * inv_a
    out = out + 2 * (-1j) * coeffs[1][:, None] * t_cur
    phase = -1j
    for k in range(2, k_stop + 1):
        t_next = 2 * matvec(t_cur) * inv_a - t_prev
        phase *= -1j
        out = out + 2 * phase * coeffs[k][:, None] * t_next
        t_prev, t_cur = t_cur, t_next
    return out
