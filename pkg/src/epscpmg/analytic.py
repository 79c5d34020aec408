"""Effective-Hamiltonian model of coherence near a rotation offset of zero.

To zeroth order in the Magnus expansion a train of ``pi + eps`` pulses spaced
by ``2 tau`` acts as a spin-locking field ``B_eff = eps / (2 tau)`` along y.
Assuming the system then prethermalizes at high spin temperature, the
steady coherence is ``C = M B_eff^2 / tr[H_eff^2]`` with normalized traces,
which gives the four-parameter curve

    C(eps) = A eps^2 / ((J/D1)^2 + eps^2 + (D2/D1)^2 eps^4 + (D3/D1)^2 eps^6).

The curve is compared with data after a Gaussian smoothing in eps that stands
in for pulse-to-pulse rotation errors and drive inhomogeneity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import least_squares

from . import spin_core as sc
from .errors import ContractError, FitError

DEFAULT_SMOOTHING = float(np.deg2rad(6.0))
#: initial J/D1 values (rad) tried by :func:`fit_coherence_curve`
J_STARTS = np.deg2rad([5.0, 15.0, 30.0, 60.0])
#: internal eps resolution used when smoothing the closed-form curve
FINE_STEP = np.deg2rad(0.25)
SMOOTH_TRUNCATE = 4.0


def effective_field(epsilon, tau):
    """Spin-locking field ``eps / (2 tau)`` in rad/us."""
    if not tau > 0:
        raise ContractError(f"tau must be positive, got {tau}")
    return np.asarray(epsilon, dtype=float) / (2.0 * tau) if np.ndim(epsilon) else epsilon / (2.0 * tau)


@dataclass(frozen=True)
class AnalyticFitParams:
    """Parameters of the closed-form coherence curve.

    Attributes
    ----------
    amplitude : float
    j_over_d1 : float
        Dip half-width, rad.
    d2_over_d1 : float
        rad^-1.
    d3_over_d1 : float
        rad^-2.
    smoothing_sigma : float
        Gaussian smoothing width in eps, rad.
    """

    amplitude: float
    j_over_d1: float
    d2_over_d1: float = 0.0
    d3_over_d1: float = 0.0
    smoothing_sigma: float = DEFAULT_SMOOTHING

    def __post_init__(self):
        for name in ("amplitude", "j_over_d1", "d2_over_d1", "d3_over_d1", "smoothing_sigma"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.amplitude > 0:
            raise ContractError("amplitude must be positive")
        if self.j_over_d1 < 0:
            raise ContractError("j_over_d1 must be >= 0")
        if self.smoothing_sigma < 0:
            raise ContractError("smoothing_sigma must be >= 0")


def analytic_coherence(epsilon, params, smooth=False):
    """Evaluate the closed-form curve, optionally Gaussian-smoothed in eps.

    The unsmoothed curve is 0 at ``eps = 0`` (the ``0/0`` limit when
    ``J/D1 = 0`` is taken along the numerator).
    """
    eps = np.asarray(epsilon, dtype=float)
    if smooth and params.smoothing_sigma > 0:
        return smoothed_curve(eps, lambda e: analytic_coherence(e, params), params.smoothing_sigma)
    e2 = eps * eps
    den = params.j_over_d1**2 + e2 + params.d2_over_d1**2 * e2**2 + params.d3_over_d1**2 * e2**3
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(e2 > 0, params.amplitude * e2 / np.where(den > 0, den, 1.0), 0.0)
    return out if out.ndim else float(out)


def gaussian_smooth(values, epsilon_grid, sigma, axis=-1):
    """Convolve samples on a uniform eps grid with a Gaussian of width ``sigma`` (rad).

    Reflective boundaries, kernel truncated at 4 sigma.
    """
    values = np.asarray(values, dtype=float)
    grid = np.asarray(epsilon_grid, dtype=float)
    if sigma == 0 or grid.size < 2:
        return values.copy()
    steps = np.diff(grid)
    if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-12):
        raise ContractError("smoothing needs a uniformly spaced eps grid")
    return gaussian_filter1d(values, sigma / abs(steps[0]), axis=axis, mode="reflect",
                             truncate=SMOOTH_TRUNCATE)


def smoothed_curve(epsilon, func, sigma, lo=None, hi=None):
    """Smooth a function of eps on a fine internal grid and sample it at ``epsilon``.

    The fine grid spans ``[lo, hi]`` (default: the range of ``epsilon``) with
    reflective boundaries at both ends, matching :func:`gaussian_smooth`.
    """
    eps = np.asarray(epsilon, dtype=float)
    lo = eps.min() if lo is None else lo
    hi = eps.max() if hi is None else hi
    n = max(int(np.ceil((hi - lo) / FINE_STEP)), 1) + 1
    fine = np.linspace(lo, hi, n)
    vals = gaussian_smooth(func(fine), fine, sigma)
    return np.interp(eps, fine, vals)


@dataclass
class AnalyticFitReport:
    """Outcome of :func:`fit_coherence_curve`."""

    params: AnalyticFitParams
    std_errors: dict
    chi2: float
    residual_norm: float
    dof: int
    n_starts: int
    converged: bool
    implied: dict = field(default_factory=dict)

    def records(self):
        """Rows of ``(parameter, estimate, standard error)`` plus fit summary."""
        p = asdict(self.params)
        rows = [
            {"parameter": k, "estimate": float(p[k]), "std_error": self.std_errors.get(k)}
            for k in ("amplitude", "j_over_d1", "d2_over_d1", "d3_over_d1")
        ]
        return {
            "parameters": rows,
            "smoothing_sigma": self.params.smoothing_sigma,
            "chi2": self.chi2,
            "residual_norm": self.residual_norm,
            "dof": self.dof,
            "converged": self.converged,
            "implied": self.implied,
        }


def _prepare(x, y, sigma):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError("x and y must be 1-D arrays of equal length")
    if sigma is None:
        w = np.ones_like(y)
    else:
        s = np.asarray(sigma, dtype=float)
        s = np.broadcast_to(s, y.shape)
        if np.any(~np.isfinite(s)):
            w = np.ones_like(y)
        elif np.any(s <= 0):
            raise ContractError("sigma must be positive")
        else:
            w = 1.0 / s
    order = np.argsort(x, kind="stable")
    return x[order], y[order], np.asarray(w)[order]


def fit_coherence_curve(epsilon, coherence, sigma=None, smoothing_sigma=DEFAULT_SMOOTHING,
                        tau=None, j_starts=J_STARTS):
    """Weighted least-squares fit of the smoothed closed-form curve.

    Parameters
    ----------
    epsilon, coherence : array_like
        One curve; ``epsilon`` in rad and spanning both signs.
    sigma : array_like, optional
        Per-point uncertainties; uniform weights if omitted.
    smoothing_sigma : float
        Gaussian smoothing width, rad.
    tau : float, optional
        Half pulse spacing in us.  When given, the report includes the values
        ``D1 = 1/(2 tau)`` and ``J = (J/D1) D1`` implied by the zeroth-order field.
    j_starts : sequence of float
        Initial J/D1 values; every start uses ``A = max(C)`` and ``D2 = D3 = 0``.

    Returns
    -------
    AnalyticFitReport

    Raises
    ------
    FitError
        Degenerate data or no start converging to a finite optimum.
    """
    eps, y, w = _prepare(epsilon, coherence, sigma)
    if eps.size < 8:
        raise ContractError("need at least 8 points")
    if not (eps.min() < 0 < eps.max()):
        raise ContractError("eps values must span both signs")
    a0 = float(y.max())
    if not a0 > 0:
        raise FitError("degenerate data: no positive coherence to fit", best_residual=float(np.linalg.norm(y * w)))

    # squared D2/D1 and D3/D1 are fitted directly so the zero start has a gradient
    def model(theta):
        a, j, q2, q3 = theta
        p = AnalyticFitParams(a, j, np.sqrt(q2), np.sqrt(q3), smoothing_sigma)
        return analytic_coherence(eps, p, smooth=True)

    def resid(theta):
        return (model(theta) - y) * w

    lower = [1e-12, 0.0, 0.0, 0.0]
    upper = [np.inf, np.pi, np.inf, np.inf]
    best = None
    for j0 in j_starts:
        try:
            sol = least_squares(resid, [a0, float(j0), 0.0, 0.0], bounds=(lower, upper),
                                x_scale=[max(a0, 1e-3), 0.1, 1.0, 1.0], xtol=1e-14, ftol=1e-14,
                                gtol=1e-14, max_nfev=4000)
        except (ValueError, FloatingPointError):
            continue
        if not np.all(np.isfinite(sol.x)) or not np.isfinite(sol.cost):
            continue
        if best is None or sol.cost < best.cost - 1e-15:
            best = sol
    if best is None:
        raise FitError("no multi-start converged", best_residual=float("nan"))
    a, j, q2, q3 = best.x
    if a < 1e-9:
        raise FitError("fit collapsed to zero amplitude", best_residual=float(np.sqrt(2 * best.cost)))
    params = AnalyticFitParams(float(a), float(j), float(np.sqrt(q2)), float(np.sqrt(q3)), smoothing_sigma)
    dof = max(eps.size - 4, 1)
    chi2 = float(2 * best.cost)
    errors = _std_errors(best, chi2 / dof if sigma is None else 1.0)
    # derivative of sqrt(q) for the reported D2/D1, D3/D1 errors
    std = {"amplitude": errors[0], "j_over_d1": errors[1]}
    for name, q, e in (("d2_over_d1", q2, errors[2]), ("d3_over_d1", q3, errors[3])):
        std[name] = float(e / (2 * np.sqrt(q))) if q > 0 and np.isfinite(e) else None
    implied = {}
    if tau is not None:
        d1 = 1.0 / (2.0 * tau)
        implied = {"d1_zeroth_order": d1, "j_implied": float(j * d1)}
    return AnalyticFitReport(params, std, chi2, float(np.sqrt(chi2)), dof, len(j_starts),
                             bool(best.status > 0), implied)


def _std_errors(sol, scale):
    jac = sol.jac
    try:
        cov = np.linalg.pinv(jac.T @ jac) * scale
    except np.linalg.LinAlgError:
        return [float("nan")] * jac.shape[1]
    return [float(np.sqrt(v)) if v >= 0 else float("nan") for v in np.diag(cov)]


@dataclass(frozen=True)
class StretchedExpFit:
    """``amplitude * exp(-(t / T2)^n)``."""

    T2: float
    n: float
    amplitude: float
    chi2: float = 0.0

    def __post_init__(self):
        if not (self.T2 > 0 and self.n > 0):
            raise ContractError("T2 and n must be positive")

    def __call__(self, t):
        return self.amplitude * np.exp(-(np.asarray(t, dtype=float) / self.T2) ** self.n)


def fit_stretched_exponential(t, coherence, sigma=None, fix_n=None):
    """Least-squares fit of ``A exp(-(t/T2)^n)``, with ``n`` optionally held fixed.

    Raises
    ------
    FitError
        If the data do not decay.
    """
    t, y, w = _prepare(t, coherence, sigma)
    if t.size < 4:
        raise ContractError("need at least 4 points")
    if np.any(t <= 0):
        raise ContractError("times must be positive")
    pos = y > 0
    if pos.sum() < 2 or not y[pos][-1] < y[pos][0]:
        raise FitError("data do not decay", best_residual=float("nan"))
    # start from the 1/e crossing relative to the first sample
    a0 = float(y[0])
    t2_0 = one_over_e_time(t, y / a0)
    if not np.isfinite(t2_0):
        slope = np.polyfit(t[pos], np.log(y[pos]), 1)[0]
        if not slope < 0:
            raise FitError("data do not decay", best_residual=float("nan"))
        t2_0 = -1.0 / slope
    t2_0 = max(t2_0, 1e-6)
    span = t.max()

    if fix_n is None:
        def unpack(x):
            return x[0], x[1], x[2]
        starts = [[a0, t2_0, n0] for n0 in (1.0, 2.0, 0.5)]
        lower, upper = [0.0, 1e-9, 0.05], [np.inf, np.inf, 20.0]
    else:
        if not fix_n > 0:
            raise ContractError("fix_n must be positive")

        def unpack(x):
            return x[0], x[1], float(fix_n)
        starts = [[a0, t2_0]]
        lower, upper = [0.0, 1e-9], [np.inf, np.inf]

    def resid(x):
        a, t2, n = unpack(x)
        return (a * np.exp(-(t / t2) ** n) - y) * w

    best = None
    for x0 in starts:
        x0 = np.clip(x0, np.array(lower) + 1e-12, np.array(upper) - 1e-12)
        sol = least_squares(resid, x0, bounds=(lower, upper), xtol=1e-15, ftol=1e-15, gtol=1e-15,
                            max_nfev=5000)
        if np.all(np.isfinite(sol.x)) and (best is None or sol.cost < best.cost):
            best = sol
    a, t2, n = unpack(best.x)
    if t2 > 1e3 * span or a <= 0:
        raise FitError("data do not decay on the sampled window",
                       best_residual=float(np.sqrt(2 * best.cost)))
    return StretchedExpFit(float(t2), float(n), float(a), float(2 * best.cost))


def one_over_e_time(t, coherence):
    """First time the (normalized) curve drops below ``1/e``, linearly interpolated.

    Returns ``inf`` if it never does.
    """
    t = np.asarray(t, dtype=float)
    c = np.asarray(coherence, dtype=float)
    below = np.flatnonzero(c < np.exp(-1.0))
    if below.size == 0:
        return float("inf")
    k = below[0]
    if k == 0:
        return float(t[0])
    t0, t1, c0, c1 = t[k - 1], t[k], c[k - 1], c[k]
    return float(t0 + (np.exp(-1.0) - c0) * (t1 - t0) / (c1 - c0))


# -- spin-temperature bookkeeping --------------------------------------------

def effective_hamiltonian(couplings, b_eff):
    """Dense ``B_eff sum sigma^y + H_dipolar`` for a coupling matrix."""
    j = np.asarray(couplings, dtype=float)
    m = j.shape[0]
    terms = sc.HamiltonianTerms(np.zeros(m), j, 2.0 * b_eff, (0.0, 1.0, 0.0))
    return sc.build_hamiltonian(terms)


def normalized_trace_square(h):
    """``tr[H^2] / dim`` for a Hermitian matrix."""
    h = np.asarray(h)
    return float(np.vdot(h, h).real / h.shape[0])


def local_j_squared(couplings):
    """``J^2 = (3/M) sum_{i<j} J_ij^2``, the dipolar share of ``tr[H^2]/(M dim)``."""
    j = np.asarray(couplings, dtype=float)
    m = j.shape[0]
    iu = np.triu_indices(m, 1)
    return float(3.0 * np.sum(j[iu] ** 2) / m)


def spin_temperature_coherence(h_eff, b_eff, n_spins):
    """High-temperature prethermal coherence ``M B_eff^2 / (tr[H_eff^2]/dim)``."""
    return n_spins * b_eff**2 / normalized_trace_square(h_eff)
