"""Classical telegraph noise for bath spins and the resulting onsite fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

#: default density -> correlation-time constant, us * ppm
DEFAULT_KAPPA = 50.0


def derive_seed(master_seed, *keys):
    """Counter-based child seed: the same ``(master, keys)`` always maps to the same int."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def correlation_time(n_bath, kappa=DEFAULT_KAPPA):
    """Bath flip correlation time ``kappa / n_bath`` in us (``inf`` for an empty bath)."""
    if n_bath < 0:
        raise ContractError(f"n_bath must be >= 0, got {n_bath}")
    if kappa <= 0:
        raise ContractError("kappa must be positive")
    if n_bath == 0:
        return float("inf")
    return kappa / n_bath


@dataclass(frozen=True)
class BathTrajectory:
    """Telegraph signs of every bath spin over ``[0, horizon]``.

    ``flip_times`` is sorted ascending and ``flip_spins[e]`` is the bath index
    that flips at ``flip_times[e]``.
    """

    initial_signs: np.ndarray
    flip_times: np.ndarray
    flip_spins: np.ndarray
    horizon: float
    seed: int
    tau_c: float = float("inf")

    @property
    def n_bath(self):
        return self.initial_signs.shape[0]

    @property
    def flip_events(self):
        return list(zip(self.flip_times.tolist(), self.flip_spins.tolist()))

    def signs_at(self, t):
        """Sign of every bath spin at time ``t`` (flips at exactly ``t`` included)."""
        n_flips = np.bincount(
            self.flip_spins[self.flip_times <= t], minlength=self.n_bath
        )
        return self.initial_signs * np.where(n_flips % 2 == 0, 1, -1)


def sample_trajectory(config, tau_c, horizon, seed):
    """Sample i.i.d. random initial signs and Poisson flips at rate ``1/tau_c``.

    The sign autocorrelation decays as ``exp(-2 t / tau_c)``.
    """
    if not horizon > 0:
        raise ContractError(f"horizon must be positive, got {horizon}")
    rng = np.random.default_rng(seed)
    k = config.n_bath
    signs = rng.choice(np.array([-1, 1], dtype=np.int8), size=k)
    if k == 0 or not np.isfinite(tau_c):
        times = np.zeros(0)
        spins = np.zeros(0, dtype=np.int64)
    else:
        counts = rng.poisson(horizon / tau_c, size=k)
        spins = np.repeat(np.arange(k), counts)
        times = rng.uniform(0.0, horizon, size=spins.size)
        order = np.argsort(times, kind="stable")
        times, spins = times[order], spins[order]
    return BathTrajectory(signs, times, spins, float(horizon), int(seed), float(tau_c))


@dataclass(frozen=True)
class FieldTimeline:
    """Piecewise-constant onsite fields: ``fields[s]`` holds on ``[edges[s], edges[s+1])``."""

    edges: np.ndarray
    fields: np.ndarray

    def cuts(self, t0, t1):
        """Boundaries and fields of the non-empty pieces tiling ``[t0, t1]``."""
        # clamp so rounding past either end reuses the first or last piece
        n = len(self.fields)
        lo = min(max(int(np.searchsorted(self.edges, t0, side="right")) - 1, 0), n - 1)
        hi = min(max(int(np.searchsorted(self.edges, t1, side="left")), lo + 1), n)
        if t1 <= t0:
            return np.array([t0]), self.fields[:0]
        cuts = np.concatenate([[t0], self.edges[lo + 1 : hi], [t1]])
        fields = self.fields[lo:hi]
        keep = np.diff(cuts) > 0
        return np.append(cuts[:-1][keep], t1), fields[keep]

    def window(self, t0, t1):
        """Durations and fields of the pieces tiling ``[t0, t1]``."""
        cuts, fields = self.cuts(t0, t1)
        return np.diff(cuts), fields


def field_timeline(config, traj):
    """Fields ``B_i(t) = sum_k c_ik s_k(t)`` between consecutive flip events."""
    c = config.bath_couplings
    if c.shape[1] != traj.n_bath:
        raise ContractError("trajectory and configuration bath sizes differ")
    b0 = c @ traj.initial_signs.astype(float)
    edges = np.concatenate([[0.0], traj.flip_times, [traj.horizon]])
    if traj.flip_times.size == 0:
        return FieldTimeline(edges, b0[None, :])
    spins = traj.flip_spins
    # sign of the flipping spin just before each event
    order = np.argsort(spins, kind="stable")
    ranks = np.empty_like(order)
    sorted_spins = spins[order]
    starts = np.searchsorted(sorted_spins, sorted_spins, side="left")
    ranks[order] = np.arange(spins.size) - starts
    before = traj.initial_signs[spins] * np.where(ranks % 2 == 0, 1, -1)
    deltas = -2.0 * c[:, spins] * before[None, :]
    fields = b0[None, :] + np.cumsum(deltas, axis=1).T
    return FieldTimeline(edges, np.vstack([b0[None, :], fields]))


def onsite_field_segments(config, traj, t_start=0.0, t_end=None):
    """List of ``(t_start, t_end, B)`` tiling the window exactly."""
    t_end = traj.horizon if t_end is None else t_end
    if t_end > traj.horizon or t_start < 0:
        raise ContractError("window exceeds the trajectory horizon")
    cuts, fields = field_timeline(config, traj).cuts(t_start, t_end)
    return [(float(a), float(b), f.copy()) for a, b, f in zip(cuts[:-1], cuts[1:], fields)]


class _ProbeConfig:
    """Stand-in configuration with a single bath spin."""

    n_bath = 1


_PROBE_CONFIG = _ProbeConfig()


def field_at(config, traj, t):
    """Direct summation of the onsite field at one time."""
    return config.bath_couplings @ traj.signs_at(t).astype(float)


def sign_autocorrelation(tau_c, lags, n_samples, seed=0, origins=32):
    """Ensemble estimate of ``<s(t0) s(t0 + lag)>`` for one telegraph spin.

    Each of the ``n_samples`` trajectories is read at ``origins`` time origins
    spaced ``tau_c`` apart; the process is stationary, so all origins
    estimate the same quantity and the variance drops accordingly.
    """
    lags = np.atleast_1d(np.asarray(lags, dtype=float))
    probe = _PROBE_CONFIG
    t0 = tau_c * np.arange(origins)
    horizon = t0[-1] + lags.max() + tau_c
    acc = np.zeros(lags.size)
    for k in range(n_samples):
        traj = sample_trajectory(probe, tau_c, horizon, derive_seed(seed, k))
        s0 = traj.initial_signs[0]

        def signs(t):
            n = np.searchsorted(traj.flip_times, t, side="right")
            return s0 * np.where(n % 2 == 0, 1, -1)

        base = signs(t0)
        acc += (base[None, :] * signs(t0[None, :] + lags[:, None])).mean(axis=1)
    return acc / n_samples
