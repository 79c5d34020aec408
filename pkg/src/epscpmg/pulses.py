"""Pulse-sequence families and exact propagation of one disorder realization.

Timing grid (``N`` pulses, half spacing ``tau``, pulse length ``t_p``)::

    tau | P1 | tau  tau | P2 | tau  ...  tau | PN | tau

Each pulse is preceded and followed by a free interval ``tau``; coherence after
``n`` pulses is read out after the ``tau`` following pulse ``n``, at elapsed
time ``2 tau n + n t_p``.  With ``t_p > 0`` the Hamiltonian stays on during the
pulse and the drive adds ``(theta / t_p) / 2 sum_i (axis . sigma_i)``.

All rotation offsets passed to :meth:`SequenceRunner.run` share one
configuration and bath trajectory, so the free-evolution propagators are
computed once and reused for every offset.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import jv

from . import spin_core as sc
from .bath import field_timeline
from .errors import ContractError, NumericalError


class Family(str, enum.Enum):
    EPS_CPMG = "eps_cpmg"
    APCPMG = "apcpmg"
    HAHN_ECHO = "hahn_echo"
    FREE_EVOLUTION = "free_evolution"


@dataclass(frozen=True)
class PulseSequenceSpec:
    """Pulse train parameters.

    Parameters
    ----------
    family : Family
    n_pulses : int
    tau : float
        Half inter-pulse spacing, us.
    epsilon : float
        Rotation offset from pi, rad.
    pulse_duration : float
        Pulse length, us; 0 means instantaneous.
    jitter_sigma : float
        Standard deviation (rad) of an independent per-pulse offset error.
    """

    family: Family = Family.EPS_CPMG
    n_pulses: int = 10
    tau: float = 0.25
    epsilon: float = 0.0
    pulse_duration: float = 0.0
    jitter_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.n_pulses < 0:
            raise ContractError("n_pulses must be >= 0")
        if not self.tau > 0:
            raise ContractError("tau must be positive")
        if self.pulse_duration < 0:
            raise ContractError("pulse_duration must be >= 0")
        if not 2 * self.tau > self.pulse_duration:
            raise ContractError("pulse_duration must be shorter than 2 tau")
        if self.family is Family.HAHN_ECHO and self.n_pulses != 1:
            raise ContractError("a Hahn echo has exactly one pulse")
        if self.jitter_sigma < 0:
            raise ContractError("jitter_sigma must be >= 0")

    def with_(self, **changes):
        return replace(self, **changes)

    def phase_pattern(self, n=None):
        """Sign of the +y pulse axis for pulses 1..n (APCPMG alternates)."""
        n = self.n_pulses if n is None else n
        if self.family is Family.APCPMG:
            return np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        return np.ones(n)

    @property
    def is_free(self):
        return self.family is Family.FREE_EVOLUTION

    def rotation_angle(self, epsilon=None):
        if self.is_free:
            return 0.0
        return np.pi + (self.epsilon if epsilon is None else epsilon)


@dataclass(frozen=True)
class CoherencePoint:
    n_pulses: int
    time: float
    coherence: float


def total_duration(spec):
    """Elapsed time at the end of the sequence, ``2 tau N + N t_p``."""
    return 2 * spec.tau * spec.n_pulses + spec.n_pulses * spec.pulse_duration


def readout_time(spec, n):
    return 2 * spec.tau * n + n * spec.pulse_duration


def _chain(c, s):
    """Time-ordered product of ``U_p = C_p - i S_p`` kept as real pairs.

    Returns ``(C, S)`` of ``U_{P-1} ... U_1 U_0``.
    """
    while c.shape[0] > 1:
        odd = c.shape[0] % 2
        ce, se = c[0 : c.shape[0] - odd : 2], s[0 : s.shape[0] - odd : 2]
        cl, sl = c[1::2], s[1::2]
        nc = cl @ ce - sl @ se
        ns = cl @ se + sl @ ce
        if odd:
            nc = np.concatenate([nc, c[-1:]])
            ns = np.concatenate([ns, s[-1:]])
        c, s = nc, ns
    return c[0], s[0]


_TAYLOR_LIMIT = 0.5


def _taylor_order(norm, tol=1e-17):
    """Number of ``x^2`` powers needed so the cos/sin series tail is below ``tol``."""
    k, term = 1, norm
    while term > tol:
        k += 1
        term *= norm / k
    return k // 2 + 1


def _cos_sin_stack(h, dt):
    """``cos(h dt)`` and ``sin(h dt)`` for a stack of real symmetric matrices."""
    x = h * dt[:, None, None]
    n = h.shape[-1]
    c = np.empty_like(x)
    s = np.empty_like(x)
    norms = np.abs(x).sum(axis=-1).max(axis=-1)
    small = norms <= _TAYLOR_LIMIT
    if small.any():
        xs = x[small]
        j_max = _taylor_order(norms[small].max())
        y = xs @ xs
        eye = np.eye(n)
        cs = np.broadcast_to(eye, xs.shape).copy()
        ss = cs.copy()
        power = eye
        fact_c, fact_s = 1.0, 1.0
        for j in range(1, j_max + 1):
            power = y if j == 1 else power @ y
            fact_c *= -(2 * j - 1) * (2 * j)
            fact_s *= -(2 * j) * (2 * j + 1)
            cs += power / fact_c
            ss += power / fact_s
        c[small] = cs
        s[small] = xs @ ss
    big = ~small
    if big.any():
        w, v = np.linalg.eigh(h[big])
        theta = w * dt[big][:, None]
        vt = np.swapaxes(v, -1, -2)
        c[big] = (v * np.cos(theta)[:, None, :]) @ vt
        s[big] = (v * np.sin(theta)[:, None, :]) @ vt
    return c, s


def _chebyshev_real(re, im, h0, sx, half, bound, duration, tol=1e-15):
    """Chebyshev propagation by ``exp(-i (h0 + half_r sx) duration)`` for real H.

    ``re`` and ``im`` are the real and imaginary parts of the states (one row
    per drive amplitude ``half_r``).  Keeping them as separate real blocks
    lets every matrix product go through real BLAS.
    """
    n, dim = re.shape
    a = (bound * (1.0 + 1e-12)) * np.ones(n)
    x = a * duration
    k_max = int(np.ceil(x.max())) + 20
    coeffs = jv(np.arange(k_max + 1)[:, None], x[None, :])
    while np.abs(coeffs[-1]).max() > tol:
        k_max *= 2
        coeffs = jv(np.arange(k_max + 1)[:, None], x[None, :])
    significant = np.flatnonzero(np.abs(coeffs).max(axis=1) > tol)
    k_stop = int(significant.max()) if significant.size else 0
    ops = np.hstack([h0, sx])
    scale = (1.0 / a)[:, None]
    drive = (half / a)[:, None]

    def apply(t):
        y = t.reshape(2 * n, dim) @ ops
        y = y.reshape(2, n, 2 * dim)
        return y[..., :dim] * scale + y[..., dim:] * drive

    t_prev = np.stack([re, im])
    c0 = coeffs[0][:, None]
    out_re, out_im = c0 * re, c0 * im
    t_cur = None
    for k in range(1, k_stop + 1):
        if k == 1:
            t_cur = apply(t_prev)
        else:
            t_prev, t_cur = t_cur, 2.0 * apply(t_cur) - t_prev
        c = 2.0 * coeffs[k][:, None]
        # multiply by (-i)^k
        r = k % 4
        if r == 0:
            out_re += c * t_cur[0]
            out_im += c * t_cur[1]
        elif r == 1:
            out_re += c * t_cur[1]
            out_im -= c * t_cur[0]
        elif r == 2:
            out_re -= c * t_cur[0]
            out_im -= c * t_cur[1]
        else:
            out_re -= c * t_cur[1]
            out_im += c * t_cur[0]
    return out_re, out_im


class SequenceRunner:
    """Propagates pulse sequences for one :class:`SpinConfiguration`.

    Parameters
    ----------
    config : SpinConfiguration
    subdivide : int
        Split every constant-field piece into this many equal parts.  This
        changes nothing physically and exists to check segment invariance.
    """

    def __init__(self, config, subdivide=1):
        self.config = config
        self.m = config.n_system
        sc.check_capacity(self.m)
        self.dim = 2 ** self.m
        self.subdivide = int(subdivide)
        j = np.asarray(config.system_couplings, dtype=float)
        self._h_dip = sc.dipolar_operator(j)
        self._z = sc.basis_spins(self.m).astype(float)
        self._sectors = sc.magnetization_sectors(self.m)
        self._h_dip_real = self._h_dip.real.copy()
        self._dip_blocks = [self._h_dip_real[np.ix_(idx, idx)] for idx in self._sectors]
        # |k> -> i^(number of down spins) |k>; turns sum sigma^y into sum sigma^x
        self._phase = (1j) ** (self._z < 0).sum(axis=1)
        self._sx = None
        self._cache = {}

    # -- free evolution -------------------------------------------------
    def free_propagator(self, durations, fields):
        """Dense time-ordered propagator through consecutive constant-field pieces."""
        durations = np.asarray(durations, dtype=float)
        fields = np.asarray(fields, dtype=float).reshape(-1, self.m)
        if self.subdivide > 1:
            durations = np.repeat(durations / self.subdivide, self.subdivide)
            fields = np.repeat(fields, self.subdivide, axis=0)
        key = None
        if durations.size == 1:
            key = (durations[0], fields.tobytes())
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        diag = fields @ self._z.T  # (P, dim)
        u = np.zeros((self.dim, self.dim), dtype=complex)
        for idx, block in zip(self._sectors, self._dip_blocks):
            d = diag[:, idx]
            if idx.size == 1:
                u[idx[0], idx[0]] = np.exp(-1j * np.sum((block[0, 0] + d[:, 0]) * durations))
                continue
            h = np.broadcast_to(block, (d.shape[0],) + block.shape).copy()
            h[:, np.arange(idx.size), np.arange(idx.size)] += d
            c, s = _chain(*_cos_sin_stack(h, durations))
            u[np.ix_(idx, idx)] = c - 1j * s
        if key is not None:
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = u
        return u

    # -- pulses ---------------------------------------------------------
    def _collective_x(self):
        if self._sx is None:
            self._sx = sc.collective_operator(self.m, (1.0, 0.0, 0.0)).real.copy()
        return self._sx

    def _finite_pulse(self, states, durations, fields, rates):
        """Evolve each row of ``states`` under H + rate/2 sum sigma^y over the pieces.

        Work happens in the basis rotated by the diagonal phase ``i^(#down)``,
        where sigma^y becomes sigma^x and every Hamiltonian is real.
        """
        sx = self._collective_x()
        half = 0.5 * rates
        iu = np.triu_indices(self.m, 1)
        dip_bound = 3.0 * np.abs(self.config.system_couplings[iu]).sum()
        states = states * np.conj(self._phase)
        re, im = np.ascontiguousarray(states.real), np.ascontiguousarray(states.imag)
        for dt, b in zip(durations, fields):
            h0 = self._h_dip_real + np.diag(b @ self._z.T)
            bound = dip_bound + np.abs(b).sum() + np.abs(half) * self.m
            re, im = _chebyshev_real(re, im, h0, sx, half, bound, dt)
        return (re + 1j * im) * self._phase

    def _pulse(self, states, t0, timeline, angles, sign, t_p):
        if t_p == 0:
            gates = sc.rotation_matrix((0.0, sign, 0.0), angles)
            return sc.apply_single_qubit(states, gates, self.m)
        durations, fields = timeline.window(t0, t0 + t_p)
        if self.subdivide > 1:
            durations = np.repeat(durations / self.subdivide, self.subdivide)
            fields = np.repeat(fields, self.subdivide, axis=0)
        return self._finite_pulse(states, durations, fields, sign * angles / t_p)

    # -- full sequence --------------------------------------------------
    def _check(self, traj, spec, n_max):
        if n_max > spec.n_pulses:
            raise ContractError(f"readout pulse counts must lie in [0, {spec.n_pulses}]")
        t_end = readout_time(spec, n_max)
        if traj.horizon < t_end - 1e-12:
            raise ContractError(
                f"trajectory horizon {traj.horizon} us is shorter than the sequence ({t_end} us)"
            )

    def iter_states(self, traj, spec, epsilons, n_max, jitter=None):
        """Yield ``(n, states)`` after each pulse ``n`` and its trailing ``tau``.

        ``states`` has one row per entry of ``epsilons``; ``n = 0`` is the
        initial ``|+y>`` product state.
        """
        epsilons = np.atleast_1d(np.asarray(epsilons, dtype=float))
        self._check(traj, spec, n_max)
        timeline = field_timeline(self.config, traj)
        tau, t_p = spec.tau, spec.pulse_duration
        signs = spec.phase_pattern(n_max)
        if jitter is None:
            jitter = np.zeros(n_max)
        states = np.broadcast_to(sc.plus_y_state(self.m), (epsilons.size, self.dim)).copy()
        yield 0, states
        t = 0.0
        for k in range(1, n_max + 1):
            u = self.free_propagator(*timeline.window(t, t + tau))
            states = states @ u.T
            t += tau
            if spec.is_free:
                angles = np.zeros_like(epsilons)
            else:
                angles = np.pi + epsilons + jitter[k - 1]
            if t_p > 0 or not spec.is_free:
                states = self._pulse(states, t, timeline, angles, signs[k - 1], t_p)
            t += t_p
            u = self.free_propagator(*timeline.window(t, t + tau))
            states = states @ u.T
            t += tau
            yield k, states

    def final_states(self, traj, spec, epsilons, n_pulses=None, jitter=None):
        """State vectors after ``n_pulses`` (default: all) pulses, one row per offset."""
        n = spec.n_pulses if n_pulses is None else int(n_pulses)
        for _, states in self.iter_states(traj, spec, epsilons, n, jitter):
            pass
        return states

    def run(self, traj, spec, epsilons, readouts, jitter=None):
        """Coherence after each requested pulse count for every offset.

        Parameters
        ----------
        traj : BathTrajectory
        spec : PulseSequenceSpec
            Template; its ``epsilon`` is ignored in favour of ``epsilons``.
        epsilons : array_like
            Rotation offsets (rad), evaluated on the shared realization.
        readouts : sequence of int
            Pulse counts at which to record coherence.
        jitter : ndarray, optional
            Per-pulse offset errors (rad) added to every entry of ``epsilons``.

        Returns
        -------
        ndarray, shape (len(epsilons), len(readouts))
        """
        epsilons = np.atleast_1d(np.asarray(epsilons, dtype=float))
        readouts = [int(n) for n in readouts]
        if not readouts:
            return np.zeros((epsilons.size, 0))
        if min(readouts) < 0:
            raise ContractError("readout pulse counts must be >= 0")
        wanted = {}
        for col, n in enumerate(readouts):
            wanted.setdefault(n, []).append(col)
        results = np.empty((epsilons.size, len(readouts)))
        for k, states in self.iter_states(traj, spec, epsilons, max(readouts), jitter):
            if k in wanted:
                c = np.atleast_1d(sc.mean_sigma_y(states))
                results[:, wanted[k]] = c[:, None]
        if not np.all(np.isfinite(results)):
            raise NumericalError("non-finite coherence", seed=traj.seed)
        return results


def run_sequence(config, traj, spec, readout_schedule, jitter=None):
    """Single-offset convenience wrapper returning :class:`CoherencePoint` records."""
    runner = SequenceRunner(config)
    values = runner.run(traj, spec, [spec.epsilon], readout_schedule, jitter=jitter)[0]
    return [
        CoherencePoint(int(n), readout_time(spec, n), float(c))
        for n, c in zip(readout_schedule, values)
    ]


def draw_jitter(spec, rng):
    """Per-pulse offset errors for one realization (zeros when disabled)."""
    if spec.jitter_sigma == 0:
        return np.zeros(spec.n_pulses)
    return rng.normal(0.0, spec.jitter_sigma, size=spec.n_pulses)
