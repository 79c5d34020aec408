"""Configurational averaging into coherence surfaces and chi^2 density inversion."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analytic import DEFAULT_SMOOTHING, gaussian_smooth
from .bath import DEFAULT_KAPPA, correlation_time, derive_seed, sample_trajectory
from .errors import ContractError, EpsCpmgError, NumericalError, SchemaError
from .geometry import DEFAULT_CONSTANTS, DensityPair, PhysicsConstants, sample_configuration
from .pulses import PulseSequenceSpec, SequenceRunner, draw_jitter, total_duration

DEFAULT_EPSILON_DEG = np.arange(-90.0, 90.0 + 1e-9, 5.0)
DEFAULT_N_PULSES = (2, 5, 10, 20, 30)
DEFAULT_GRID_N_SYSTEM = tuple(np.logspace(np.log10(0.1), np.log10(10.0), 7))
DEFAULT_GRID_N_BATH = tuple(np.logspace(np.log10(2.0), np.log10(100.0), 7))
DEFAULT_REALIZATIONS = 64


# -- settings -----------------------------------------------------------------

@dataclass(frozen=True)
class SurfaceSettings:
    """Everything except the densities that determines a coherence surface.

    ``spec`` is a template: its ``n_pulses`` is replaced by ``max(n_pulses_grid)``
    and its ``epsilon`` by each entry of ``epsilon_grid`` (rad).
    """

    spec: PulseSequenceSpec = PulseSequenceSpec(pulse_duration=0.04)
    epsilon_grid: tuple = tuple(np.deg2rad(DEFAULT_EPSILON_DEG))
    n_pulses_grid: tuple = DEFAULT_N_PULSES
    realizations: int = DEFAULT_REALIZATIONS
    master_seed: int = 0
    n_spins: int = 6
    constants: PhysicsConstants = DEFAULT_CONSTANTS
    kappa: float = DEFAULT_KAPPA
    tau_c: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "epsilon_grid", tuple(float(e) for e in self.epsilon_grid))
        object.__setattr__(self, "n_pulses_grid", tuple(int(n) for n in self.n_pulses_grid))
        if self.realizations < 1:
            raise ContractError("realizations must be >= 1")
        if not self.epsilon_grid or not self.n_pulses_grid:
            raise ContractError("epsilon and pulse-count grids must be non-empty")
        if min(self.n_pulses_grid) < 0:
            raise ContractError("pulse counts must be >= 0")
        if self.n_spins < 1:
            raise ContractError("n_spins must be >= 1")
        spec = self.spec.with_(n_pulses=max(self.n_pulses_grid))
        object.__setattr__(self, "spec", spec)

    def with_(self, **changes):
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return SurfaceSettings(**d)

    def describe(self):
        """JSON-friendly dictionary of every field."""
        spec = asdict(self.spec)
        spec["family"] = self.spec.family.value
        return {
            "spec": spec,
            "epsilon_grid": list(self.epsilon_grid),
            "n_pulses_grid": list(self.n_pulses_grid),
            "realizations": self.realizations,
            "master_seed": self.master_seed,
            "n_spins": self.n_spins,
            "constants": asdict(self.constants),
            "kappa": self.kappa,
            "tau_c": self.tau_c,
        }

    def cache_key(self, densities):
        payload = {"densities": list(densities.as_tuple()), "settings": self.describe(),
                   "version": __version__}
        text = json.dumps(payload, sort_keys=True, default=float)
        return hashlib.sha256(text.encode()).hexdigest()

    def tau_c_for(self, densities):
        if self.tau_c is not None:
            return float(self.tau_c)
        return correlation_time(densities.n_bath, self.kappa)


# -- surfaces -------------------------------------------------------------------

@dataclass
class CoherenceSurface:
    """Ensemble-averaged coherence ``C(eps, N)``.

    ``values`` and ``std_errors`` have shape ``(len(epsilon_grid), len(n_pulses_grid))``.
    ``samples`` keeps every realization (shape ``(R, n_eps, n_N)``) when available.
    """

    epsilon_grid: np.ndarray
    n_pulses_grid: np.ndarray
    values: np.ndarray
    std_errors: np.ndarray
    realization_count: int
    densities: DensityPair
    sequence_meta: PulseSequenceSpec
    samples: np.ndarray | None = None
    settings: dict = field(default_factory=dict)

    def column(self, n):
        """Index of pulse count ``n`` in the grid."""
        hits = np.flatnonzero(self.n_pulses_grid == n)
        if hits.size == 0:
            raise ContractError(f"N={n} not in the surface grid")
        return int(hits[0])

    def curve(self, n):
        return self.values[:, self.column(n)]

    def smoothed(self, sigma=DEFAULT_SMOOTHING):
        """Values convolved along eps with a Gaussian of width ``sigma`` (rad)."""
        return gaussian_smooth(self.values, self.epsilon_grid, sigma, axis=0)

    def rows(self):
        """``(epsilon_deg, n_pulses, coherence, stderr)`` records, N-major."""
        out = []
        eps_deg = np.rad2deg(self.epsilon_grid)
        for j, n in enumerate(self.n_pulses_grid):
            for i, e in enumerate(eps_deg):
                out.append((float(e), int(n), float(self.values[i, j]), float(self.std_errors[i, j])))
        return out

    def save(self, path):
        _atomic_savez(
            path,
            epsilon_grid=self.epsilon_grid,
            n_pulses_grid=self.n_pulses_grid,
            values=self.values,
            std_errors=self.std_errors,
            realization_count=self.realization_count,
            densities=np.array(self.densities.as_tuple()),
            samples=self.samples if self.samples is not None else np.zeros(0),
            meta=json.dumps({"spec": _spec_dict(self.sequence_meta), "settings": self.settings},
                            default=float),
        )

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            samples = z["samples"]
            return cls(
                epsilon_grid=z["epsilon_grid"],
                n_pulses_grid=z["n_pulses_grid"],
                values=z["values"],
                std_errors=z["std_errors"],
                realization_count=int(z["realization_count"]),
                densities=DensityPair(*z["densities"].tolist()),
                sequence_meta=PulseSequenceSpec(**meta["spec"]),
                samples=samples if samples.size else None,
                settings=meta["settings"],
            )


def _spec_dict(spec):
    d = asdict(spec)
    d["family"] = spec.family.value
    return d


def _atomic_savez(path, **arrays):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp.npz")
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


class SurfaceCache:
    """Write-once map from the full parameter tuple to a surface.

    With ``directory`` set, entries are also persisted as ``<key>.npz`` and
    picked up by later processes.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        self._mem = {}

    def _path(self, key):
        return self.directory / f"{key}.npz"

    def get(self, key):
        if key in self._mem:
            return self._mem[key]
        if self.directory is not None and self._path(key).exists():
            surf = CoherenceSurface.load(self._path(key))
            self._mem[key] = surf
            return surf
        return None

    def put(self, key, surface):
        """Store ``surface`` unless the key is already present; return the stored one."""
        existing = self.get(key)
        if existing is not None:
            return existing
        self._mem[key] = surface
        if self.directory is not None:
            surface.save(self._path(key))
        return surface

    def __contains__(self, key):
        return self.get(key) is not None

    def __len__(self):
        return len(self._mem)


# -- Monte-Carlo averaging ----------------------------------------------------------

def realization_seeds(master_seed, r):
    """Configuration, trajectory and jitter seeds of realization ``r``.

    Independent of the densities, so every grid cell sees the same random
    numbers for the same ``r``.
    """
    return (derive_seed(master_seed, r, 0), derive_seed(master_seed, r, 1),
            derive_seed(master_seed, r, 2))


def simulate_realization(densities, settings, r):
    """Coherence table ``(n_eps, n_N)`` of realization ``r`` (all eps share it)."""
    cfg_seed, traj_seed, jit_seed = realization_seeds(settings.master_seed, r)
    spec = settings.spec
    try:
        config = sample_configuration(densities, settings.n_spins, cfg_seed, settings.constants)
        horizon = max(total_duration(spec), 1e-9)
        traj = sample_trajectory(config, settings.tau_c_for(densities), horizon, traj_seed)
        jitter = draw_jitter(spec, np.random.default_rng(jit_seed))
        return SequenceRunner(config).run(traj, spec, settings.epsilon_grid,
                                          settings.n_pulses_grid, jitter=jitter)
    except EpsCpmgError as exc:
        exc.seed = cfg_seed
        exc.args = (f"realization {r} (seed {cfg_seed}): {exc}",)
        raise
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        raise NumericalError(f"realization {r} (seed {cfg_seed}): {exc}", seed=cfg_seed) from exc


def _realization_task(args):
    densities, settings, r = args
    return simulate_realization(densities, settings, r)


def _reduce(densities, settings, samples):
    samples = np.asarray(samples)
    r = samples.shape[0]
    values = samples.mean(axis=0)
    if r >= 2:
        std = samples.std(axis=0, ddof=1) / math.sqrt(r)
    else:
        std = np.full_like(values, np.nan)
    return CoherenceSurface(
        epsilon_grid=np.array(settings.epsilon_grid),
        n_pulses_grid=np.array(settings.n_pulses_grid),
        values=np.clip(values, -1.0, 1.0),
        std_errors=std,
        realization_count=r,
        densities=densities,
        sequence_meta=settings.spec,
        samples=samples,
        settings=settings.describe(),
    )


def compute_surfaces(jobs, threads=1, cache=None):
    """Surfaces for a list of ``(densities, settings)`` jobs.

    Cached entries are reused.  The remaining realizations of all jobs run on
    one worker pool; each surface is reduced in seed order, so the result does
    not depend on ``threads``.
    """
    out = [None] * len(jobs)
    todo = []
    for k, (dens, settings) in enumerate(jobs):
        hit = cache.get(settings.cache_key(dens)) if cache is not None else None
        if hit is not None:
            out[k] = hit
        else:
            todo.append(k)
    if not todo:
        return out
    tasks = [(jobs[k][0], jobs[k][1], r) for k in todo for r in range(jobs[k][1].realizations)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_realization_task, tasks, chunksize=1))
    else:
        results = [_realization_task(t) for t in tasks]
    pos = 0
    for k in todo:
        dens, settings = jobs[k]
        chunk = results[pos : pos + settings.realizations]
        pos += settings.realizations
        surf = _reduce(dens, settings, chunk)
        if cache is not None:
            surf = cache.put(settings.cache_key(dens), surf)
        out[k] = surf
    return out


def average_surface(densities, spec, epsilon_grid, n_pulses_grid, realizations, master_seed,
                    n_spins=6, constants=DEFAULT_CONSTANTS, kappa=DEFAULT_KAPPA, tau_c=None,
                    threads=1, cache=None):
    """Monte-Carlo average of the coherence over configurations and bath histories.

    Parameters
    ----------
    densities : DensityPair
    spec : PulseSequenceSpec
        Template for family, tau, pulse duration and jitter.
    epsilon_grid : array_like
        Rotation offsets, rad.
    n_pulses_grid : sequence of int
    realizations : int
        At least 2.
    master_seed : int
    threads : int
        Worker processes.

    Returns
    -------
    CoherenceSurface
    """
    if realizations < 2:
        raise ContractError("need at least 2 realizations for standard errors")
    settings = SurfaceSettings(spec=spec, epsilon_grid=tuple(np.atleast_1d(epsilon_grid)),
                               n_pulses_grid=tuple(n_pulses_grid), realizations=realizations,
                               master_seed=master_seed, n_spins=n_spins, constants=constants,
                               kappa=kappa, tau_c=tau_c)
    return compute_surfaces([(densities, settings)], threads=threads, cache=cache)[0]


def hahn_echo_decay(densities, settings, taus, threads=1, cache=None):
    """Ensemble Hahn-echo coherence for each half spacing in ``taus``.

    Every ``tau`` is its own single-pulse surface built from ``settings``
    (same seeds, cluster size and bath model) with a perfect pi pulse.

    Returns
    -------
    times, values, std_errors : ndarray
        Echo times ``2 tau + t_p`` in us with the mean coherence and its
        standard error.
    """
    taus = np.asarray(taus, dtype=float)
    jobs = []
    for tau in taus:
        spec = settings.spec.with_(family="hahn_echo", n_pulses=1, tau=float(tau), epsilon=0.0)
        jobs.append((densities, settings.with_(spec=spec, epsilon_grid=(0.0,), n_pulses_grid=(1,))))
    surfaces = compute_surfaces(jobs, threads=threads, cache=cache)
    times = np.array([total_duration(job[1].spec) for job in jobs])
    values = np.array([s.values[0, 0] for s in surfaces])
    errors = np.array([s.std_errors[0, 0] for s in surfaces])
    return times, values, errors

# -- data ---------------------------------------------------------------------------

INGEST_HEADER = ("epsilon_deg", "n_pulses", "coherence", "sigma")


@dataclass
class ExperimentalDataset:
    """Measured (or synthetic) coherence points; ``sigma`` is NaN where unknown."""

    epsilon: np.ndarray
    n_pulses: np.ndarray
    coherence: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.epsilon = np.asarray(self.epsilon, dtype=float)
        self.n_pulses = np.broadcast_to(np.asarray(self.n_pulses, dtype=int), self.epsilon.shape).copy()
        self.coherence = np.asarray(self.coherence, dtype=float)
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), self.epsilon.shape).copy()
        n = self.epsilon.size
        if not (self.n_pulses.size == self.coherence.size == n):
            raise ContractError("dataset columns differ in length")

    def __len__(self):
        return self.epsilon.size

    def select(self, mask):
        return ExperimentalDataset(self.epsilon[mask], self.n_pulses[mask], self.coherence[mask],
                                   self.sigma[mask])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(INGEST_HEADER)
            for e, n, c, s in zip(np.rad2deg(self.epsilon), self.n_pulses, self.coherence, self.sigma):
                w.writerow([repr(float(e)), int(n), repr(float(c)), "" if np.isnan(s) else repr(float(s))])

    @classmethod
    def from_csv(cls, path):
        """Parse the ingestion schema; every bad row is reported in one SchemaError."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        rows = [r for r in rows if any(cell.strip() for cell in r)]
        if not rows:
            raise SchemaError(f"{path}: empty file", [f"{path}: no header row"])
        header = tuple(c.strip() for c in rows[0])
        required = INGEST_HEADER[:3]
        # surface files carry their standard errors under "stderr"
        if header[:3] != required or len(header) > 4 or (len(header) == 4 and header[3] not in ("sigma", "stderr")):
            raise SchemaError(f"{path}: header must be {','.join(INGEST_HEADER)}",
                              [f"line 1: got {','.join(header)}"])
        eps, ns, cs, ss, problems = [], [], [], [], []
        for lineno, row in enumerate(rows[1:], start=2):
            cells = [c.strip() for c in row] + [""] * (len(header) - len(row))
            if len(row) > len(header):
                problems.append(f"line {lineno}: {len(row)} columns, expected {len(header)}")
                continue
            try:
                e = float(cells[0])
                n_val = float(cells[1])
                c = float(cells[2])
                s = float(cells[3]) if len(header) == 4 and cells[3] else float("nan")
            except ValueError:
                problems.append(f"line {lineno}: non-numeric value in {row}")
                continue
            bad = []
            if not np.isfinite(e):
                bad.append("epsilon_deg not finite")
            if not n_val.is_integer() or n_val < 0:
                bad.append("n_pulses must be a non-negative integer")
            if not np.isfinite(c):
                bad.append("coherence not finite")
            if not np.isnan(s) and not (np.isfinite(s) and s >= 0):
                bad.append("sigma must be finite and >= 0")
            if bad:
                problems.append(f"line {lineno}: " + "; ".join(bad))
                continue
            eps.append(np.deg2rad(e))
            ns.append(int(n_val))
            cs.append(c)
            ss.append(s)
        if problems:
            raise SchemaError(f"{path}: {len(problems)} invalid row(s)", problems)
        if not eps:
            raise SchemaError(f"{path}: no data rows", [f"{path}: header only"])
        return cls(np.array(eps), np.array(ns), np.array(cs), np.array(ss))


def generate_synthetic_dataset(densities, spec, noise_sigma, seed, settings=None,
                               smoothing_sigma=DEFAULT_SMOOTHING, threads=1, cache=None):
    """Surface sampled on the experiment-like grid plus Gaussian noise.

    The surface is smoothed in eps by ``smoothing_sigma`` first, the same
    treatment :func:`chi_squared` gives simulations, so that a dataset drawn at
    the true densities is consistent with the fit model.  ``seed`` drives only
    the noise; the surface comes from ``settings.master_seed``.
    """
    if noise_sigma < 0:
        raise ContractError("noise_sigma must be >= 0")
    settings = SurfaceSettings(spec=spec) if settings is None else settings.with_(spec=spec)
    surf = compute_surfaces([(densities, settings)], threads=threads, cache=cache)[0]
    clean = surf.smoothed(smoothing_sigma) if smoothing_sigma > 0 else surf.values
    eps = np.repeat(surf.epsilon_grid[:, None], surf.n_pulses_grid.size, axis=1).T.ravel()
    ns = np.repeat(surf.n_pulses_grid[:, None], surf.epsilon_grid.size, axis=1).ravel()
    clean = clean.T.ravel()
    rng = np.random.default_rng(seed)
    noisy = clean + rng.normal(0.0, noise_sigma, size=clean.shape) if noise_sigma > 0 else clean.copy()
    sigma = np.full(clean.shape, noise_sigma if noise_sigma > 0 else np.nan)
    return ExperimentalDataset(eps, ns, noisy, sigma)


# -- chi^2 ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ChiSquared:
    chi2: float
    amplitude: float
    baseline: float
    n_points: int

    @property
    def dof(self):
        return max(self.n_points - 2, 1)


def _overlap(sim, data, n_min_pulses):
    keep = (data.n_pulses >= n_min_pulses) & np.isin(data.n_pulses, sim.n_pulses_grid)
    lo, hi = sim.epsilon_grid.min(), sim.epsilon_grid.max()
    keep &= (data.epsilon >= lo - 1e-12) & (data.epsilon <= hi + 1e-12)
    if not keep.any():
        raise ContractError(
            f"empty overlap: no data points with N >= {n_min_pulses} inside the simulated grid; "
            "lower n_min_pulses or supply data at larger pulse counts"
        )
    return data.select(keep)


def chi_squared_details(sim, data, n_min_pulses=4, smoothing_sigma=DEFAULT_SMOOTHING):
    """chi^2 with the affine nuisance ``a C_sim + b`` solved in closed form.

    The simulated surface is smoothed along eps, linearly interpolated to the
    data offsets, and compared with every data point having ``N >= n_min_pulses``.
    """
    data = _overlap(sim, data, n_min_pulses)
    if np.any(data.sigma == 0):
        raise ContractError("sigma = 0 on a fitted point; leave sigma blank for uniform weights")
    smooth = sim.smoothed(smoothing_sigma) if smoothing_sigma > 0 else sim.values
    model = np.empty(len(data))
    for n in np.unique(data.n_pulses):
        sel = data.n_pulses == n
        model[sel] = np.interp(data.epsilon[sel], sim.epsilon_grid, smooth[:, sim.column(n)])
    w = np.where(np.isnan(data.sigma), 1.0, 1.0 / np.where(np.isnan(data.sigma), 1.0, data.sigma) ** 2)
    # weighted normal equations for (a, b)
    sw, sx, sy = w.sum(), (w * model).sum(), (w * data.coherence).sum()
    sxx, sxy = (w * model * model).sum(), (w * model * data.coherence).sum()
    det = sw * sxx - sx * sx
    if det > 1e-14 * max(sw * sxx, 1e-300):
        a = (sw * sxy - sx * sy) / det
        b = (sy - a * sx) / sw
    else:
        # flat model: only the baseline is identifiable
        a, b = 0.0, sy / sw
    resid = a * model + b - data.coherence
    return ChiSquared(float((w * resid**2).sum()), float(a), float(b), len(data))


def chi_squared(sim, data, n_min_pulses=4, smoothing_sigma=DEFAULT_SMOOTHING):
    return chi_squared_details(sim, data, n_min_pulses, smoothing_sigma).chi2


# -- grid search -----------------------------------------------------------------------

@dataclass(frozen=True)
class FitSettings:
    surface: SurfaceSettings = SurfaceSettings()
    n_min_pulses: int = 4
    smoothing_sigma: float = DEFAULT_SMOOTHING
    threads: int = 1
    cache_dir: str | None = None


@dataclass
class DensityFitResult:
    """chi^2 landscape; ``chi2[i, j]`` belongs to ``(grid_n_system[i], grid_n_bath[j])``."""

    grid_n_system: np.ndarray
    grid_n_bath: np.ndarray
    chi2: np.ndarray
    amplitude: np.ndarray
    baseline: np.ndarray
    failure_mask: np.ndarray
    best: DensityPair | None
    n_min_pulses: int = 4
    n_points: int = 0
    provenance: dict = field(default_factory=dict)

    @property
    def best_index(self):
        if not np.any(np.isfinite(self.chi2)):
            return None
        return np.unravel_index(int(np.nanargmin(self.chi2)), self.chi2.shape)

    @property
    def nuisance(self):
        idx = self.best_index
        if idx is None:
            return None
        return {"amplitude": float(self.amplitude[idx]), "baseline": float(self.baseline[idx])}

    def to_dict(self):
        return {
            "axis_order": "chi2[i][j] -> (grid_n_system[i], grid_n_bath[j]), row-major",
            "grid_n_system": self.grid_n_system.tolist(),
            "grid_n_bath": self.grid_n_bath.tolist(),
            "chi2": [[None if not np.isfinite(v) else float(v) for v in row] for row in self.chi2],
            "failure_mask": self.failure_mask.tolist(),
            "best": None if self.best is None else {"n_system": self.best.n_system,
                                                    "n_bath": self.best.n_bath},
            "nuisance": self.nuisance,
            "n_min_pulses": self.n_min_pulses,
            "n_points": self.n_points,
            "provenance": self.provenance,
        }

    def contour_rows(self):
        rows = []
        for i, ns in enumerate(self.grid_n_system):
            for j, nb in enumerate(self.grid_n_bath):
                rows.append((float(ns), float(nb), float(self.chi2[i, j])))
        return rows


def grid_search(data, grid_n_system, grid_n_bath, settings=FitSettings(), cache=None):
    """chi^2 over every density pair of the grid.

    Grids are sorted ascending; ties in chi^2 resolve to the lowest ``n_system``
    (then lowest ``n_bath``).  Cells whose simulation fails are NaN and flagged
    in ``failure_mask``.
    """
    gs = np.sort(np.asarray(grid_n_system, dtype=float))
    gb = np.sort(np.asarray(grid_n_bath, dtype=float))
    if gs.size == 0 or gb.size == 0:
        raise ContractError("density grids must be non-empty")
    if cache is None:
        cache = SurfaceCache(settings.cache_dir)
    sset = settings.surface
    cells = [(i, j) for i in range(gs.size) for j in range(gb.size)]
    chi2 = np.full((gs.size, gb.size), np.nan)
    amp = np.full_like(chi2, np.nan)
    base = np.full_like(chi2, np.nan)
    failed = np.zeros(chi2.shape, dtype=bool)
    errors = {}
    jobs = [(DensityPair(gs[i], gb[j]), sset) for i, j in cells]
    try:
        surfaces = compute_surfaces(jobs, threads=settings.threads, cache=cache)
    except EpsCpmgError:
        # fall back to cell by cell so one bad cell does not sink the grid
        surfaces = []
        for job in jobs:
            try:
                surfaces.append(compute_surfaces([job], threads=settings.threads, cache=cache)[0])
            except EpsCpmgError as exc:
                surfaces.append(exc)
    n_points = 0
    for (i, j), surf in zip(cells, surfaces):
        if isinstance(surf, Exception):
            failed[i, j] = True
            errors[f"{gs[i]:g},{gb[j]:g}"] = str(surf)
            continue
        res = chi_squared_details(surf, data, settings.n_min_pulses, settings.smoothing_sigma)
        chi2[i, j], amp[i, j], base[i, j] = res.chi2, res.amplitude, res.baseline
        n_points = res.n_points
    best = None
    if np.any(np.isfinite(chi2)):
        i, j = np.unravel_index(int(np.nanargmin(chi2)), chi2.shape)
        best = DensityPair(float(gs[i]), float(gb[j]))
    prov = {"version": __version__, "surface_settings": sset.describe(),
            "n_min_pulses": settings.n_min_pulses, "smoothing_sigma": settings.smoothing_sigma}
    if errors:
        prov["failures"] = errors
    return DensityFitResult(gs, gb, chi2, amp, base, failed, best, settings.n_min_pulses,
                            n_points, prov)
