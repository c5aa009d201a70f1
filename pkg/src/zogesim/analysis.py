"""Ensemble statistics and curve fitting.

Equilibrium (time-averaged) values, disorder averages, finite-difference
derivatives, split Pearson VII peak fits, critical-disorder bounds, power-law
exponents and the (W, U) phase-diagram reduction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import least_squares
from scipy.signal import find_peaks, savgol_filter


@dataclass
class EnsembleCurve:
    x: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n_realizations: int
    meta: dict = field(default_factory=dict)
    samples: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.mean = np.asarray(self.mean, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)
        if self.mean.shape != self.x.shape or self.stderr.shape != self.x.shape:
            raise ValueError("x, mean and stderr must have the same length")
        if np.any(self.stderr < 0):
            raise ValueError("stderr must be non-negative")


@dataclass
class PearsonFit:
    """Split Pearson VII: amplitude a0, center a1, (width, shape) left a2, a3 and right a4, a5."""

    params: np.ndarray
    errors: np.ndarray
    residual_norm: float
    converged: bool
    message: str = ""

    @property
    def center(self) -> float:
        return float(self.params[1])

    def __call__(self, x):
        return split_pearson7(x, *self.params)


@dataclass
class CriticalBounds:
    w_lower: float
    w_upper: float
    err_lower: float
    err_upper: float
    argmax_lower: float
    argmax_upper: float
    found: bool = True
    fits: tuple = ()

    @property
    def width(self) -> float:
        return self.w_upper - self.w_lower

    def contains(self, w: float) -> bool:
        return self.found and self.w_lower <= w <= self.w_upper

    @classmethod
    def none(cls, reason: str = "") -> "CriticalBounds":
        nan = float("nan")
        return cls(nan, nan, nan, nan, nan, nan, False, (reason,))


@dataclass
class PowerLawFit:
    alpha: float
    stderr: float
    window: tuple[float, float]
    r_squared: float
    n_points: int
    excluded: int = 0
    sensitivity: dict = field(default_factory=dict)

    @property
    def negative(self) -> bool:
        return self.alpha < 0

    @property
    def fractal_dimension(self) -> float:
        """Effective dimension ``2 alpha`` of the Gaussian spreading picture."""
        return 2.0 * self.alpha


# --- equilibrium values and averages ----------------------------------------

def _integrated_autocorr(x: np.ndarray) -> float:
    """``1 + 2 sum rho_k``, truncated at the first non-positive lag."""
    n = len(x)
    x = x - x.mean()
    var = np.dot(x, x) / n
    if var == 0:
        return 1.0
    tau = 1.0
    for k in range(1, n // 2):
        rho = np.dot(x[:-k], x[k:]) / (n * var)
        if rho <= 0:
            break
        tau += 2.0 * rho
    return tau


def time_average_equilibrium(t, values, window_fraction: float = 0.5,
                             traversal_time: float | None = None) -> tuple[float, float]:
    """Mean over ``[f T, T]`` with an autocorrelation-corrected standard error.

    When ``traversal_time`` (N/J) is given the series must span at least three
    of them.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape:
        raise ValueError("t and values must have the same length")
    if not 0 <= window_fraction < 1:
        raise ValueError("window_fraction must be in [0, 1)")
    T = t.max()
    if traversal_time is not None and T < 3 * traversal_time:
        raise ValueError(f"series too short: needs t_max >= {3 * traversal_time:g} "
                         f"(three traversal times), got {T:g}")
    sel = t >= window_fraction * T
    if sel.sum() < 2:
        raise ValueError("fewer than two samples in the averaging window")
    w = v[sel]
    mean = float(w.mean())
    if np.all(w == w[0]):
        return float(w[0]), 0.0
    tau = _integrated_autocorr(w)
    n_eff = max(1.0, len(w) / tau)
    return mean, float(w.std(ddof=1) / math.sqrt(n_eff))


def disorder_average(values, x=None, meta: dict | None = None) -> EnsembleCurve:
    """Pointwise mean and standard error over realizations.

    ``values`` is either a 2D array (realization, grid point) on the shared grid
    ``x`` or a list of ``(x_r, y_r)`` curves whose grids must coincide.
    """
    if x is None:
        curves = list(values)
        if not curves:
            raise ValueError("no realizations")
        x = np.asarray(curves[0][0], dtype=float)
        for xr, _ in curves:
            if len(xr) != len(x) or not np.allclose(xr, x):
                raise ValueError("realization grids do not match")
        Y = np.array([np.asarray(yr, dtype=float) for _, yr in curves])
    else:
        x = np.asarray(x, dtype=float)
        Y = np.asarray(values, dtype=float)
        if Y.ndim != 2 or Y.shape[1] != len(x):
            raise ValueError(f"values shape {Y.shape} does not match grid of length {len(x)}")
    R = Y.shape[0]
    if R < 2:
        raise ValueError("need at least two realizations per grid point")
    mean = Y.mean(axis=0)
    err = Y.std(axis=0, ddof=1) / math.sqrt(R)
    return EnsembleCurve(x, mean, err, R, dict(meta or {}), Y)


def nested_average(values, x, meta: dict | None = None) -> EnsembleCurve:
    """Average over seeds inside each realization, then over realizations.

    ``values`` has shape (realization, seed, grid point). The error bar is the
    spread of realization means, which already carries the seed noise.
    """
    V = np.asarray(values, dtype=float)
    if V.ndim != 3:
        raise ValueError("values must be (realization, seed, grid)")
    curve = disorder_average(V.mean(axis=1), x, meta)
    curve.meta.setdefault("seeds", V.shape[1])
    return curve


# --- derivatives ------------------------------------------------------------

def _lagrange_weights(xs: np.ndarray, x0: float, order: int) -> np.ndarray:
    """Weights w with sum w_i f(xs_i) = f^(order)(x0) for the interpolating polynomial."""
    k = len(xs)
    V = np.vander(xs - x0, k, increasing=True).T
    rhs = np.zeros(k)
    rhs[order] = math.factorial(order)
    return np.linalg.solve(V, rhs)


def numeric_derivative(x, y, order: int = 1, smooth_window: int | None = None) -> np.ndarray:
    """First or second derivative by three-point stencils, four-point one-sided at the edges.

    With ``smooth_window`` the data are first passed through a quadratic
    Savitzky-Golay filter of that (odd) length.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if len(x) < 5:
        raise ValueError(f"need at least 5 points, got {len(x)}")
    if np.any(np.diff(x) <= 0):
        raise ValueError("x must be strictly increasing")
    if smooth_window:
        y = savgol_filter(y, smooth_window, 2, mode="interp")
    n = len(x)
    out = np.empty(n)
    for i in range(1, n - 1):
        out[i] = np.dot(_lagrange_weights(x[i - 1:i + 2], x[i], order), y[i - 1:i + 2])
    out[0] = np.dot(_lagrange_weights(x[:4], x[0], order), y[:4])
    out[-1] = np.dot(_lagrange_weights(x[-4:], x[-1], order), y[-4:])
    return out


# --- split Pearson VII --------------------------------------------------------

def split_pearson7(x, a0, a1, a2, a3, a4, a5):
    x = np.asarray(x, dtype=float)
    left = x < a1
    w = np.where(left, a2, a4)
    m = np.where(left, a3, a5)
    u = (x - a1) / w
    # far tails with large shapes overflow to inf, i.e. a profile value of 0
    with np.errstate(over="ignore"):
        return a0 / (1.0 + u * u * (2.0 ** (1.0 / m) - 1.0)) ** m


# Above this shape exponent the profile is Gaussian to plotting accuracy; the
# cap keeps LM from chasing m -> infinity on Gaussian-like peaks.
SHAPE_MAX = 100.0


def _shape_in(m):
    r = min(max((m - 0.5) / SHAPE_MAX, 1e-12), 1 - 1e-12)
    return math.log(r / (1 - r))


def _shape_out(z):
    return 0.5 + SHAPE_MAX / (1.0 + math.exp(-z)) if z > -700 else 0.5


def _to_internal(p):
    a0, a1, a2, a3, a4, a5 = p
    return np.array([a0, a1, math.log(a2), _shape_in(a3), math.log(a4), _shape_in(a5)])


def _to_params(z):
    a0, a1, l2, l3, l4, l5 = z
    return np.array([a0, a1, math.exp(l2), _shape_out(l3), math.exp(l4), _shape_out(l5)])


def default_pearson_init(x, y) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    i = int(np.argmax(y))
    a0, a1 = float(y[i]), float(x[i])
    half = 0.5 * a0
    span = float(x[-1] - x[0]) or 1.0
    left = np.nonzero(y[:i] < half)[0]
    right = np.nonzero(y[i + 1:] < half)[0]
    wl = a1 - x[left[-1]] if len(left) else 0.5 * (a1 - x[0])
    wr = x[i + 1 + right[0]] - a1 if len(right) else 0.5 * (x[-1] - a1)
    floor = 1e-3 * span
    return np.array([a0, a1, max(wl, floor), 1.0, max(wr, floor), 1.0])


def fit_split_pearson7(x, y, init=None, max_nfev: int = 50000) -> PearsonFit:
    """Levenberg-Marquardt fit of the split Pearson VII profile.

    Widths are optimized as logarithms and shapes through a logistic map onto
    ``(1/2, 1/2 + SHAPE_MAX)``, which keeps ``a2, a4 > 0`` and ``a3, a5 > 1/2``
    without a bounded solver.
    Both halves equal ``a0`` at ``x = a1`` so the profile is continuous.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 6:
        raise ValueError("need at least 6 points for 6 parameters")
    p0 = default_pearson_init(x, y) if init is None else np.asarray(init, dtype=float)
    scale = max(float(np.max(np.abs(y))), 1e-300)

    def resid(z):
        with np.errstate(over="ignore", invalid="ignore"):
            r = (split_pearson7(x, *_to_params(z)) - y) / scale
        return np.nan_to_num(r, nan=1e6, posinf=1e6, neginf=-1e6)

    try:
        sol = least_squares(resid, _to_internal(p0), method="lm", max_nfev=max_nfev,
                            xtol=1e-12, ftol=1e-12, gtol=1e-12)
        params = _to_params(sol.x)
        converged = bool(sol.success)
        message = sol.message
    except (ValueError, OverflowError) as exc:
        params, converged, message = p0, False, str(exc)
    r = split_pearson7(x, *params) - y
    rss = float(np.dot(r, r))
    errors = _pearson_errors(x, params, rss)
    if not x.min() <= params[1] <= x.max():
        converged = False
        message = f"center {params[1]:g} outside the data range"
    return PearsonFit(params, errors, math.sqrt(rss), converged, message)


def _pearson_errors(x, params, rss) -> np.ndarray:
    dof = len(x) - len(params)
    if dof <= 0:
        return np.full(len(params), np.nan)
    jac = np.empty((len(x), len(params)))
    for k in range(len(params)):
        h = 1e-6 * max(abs(params[k]), 1e-3)
        up, dn = params.copy(), params.copy()
        up[k] += h
        dn[k] -= h
        jac[:, k] = (split_pearson7(x, *up) - split_pearson7(x, *dn)) / (2 * h)
    try:
        cov = np.linalg.pinv(jac.T @ jac) * (rss / dof)
    except np.linalg.LinAlgError:
        return np.full(len(params), np.nan)
    return np.sqrt(np.clip(np.diag(cov), 0, None))


# --- critical bounds ----------------------------------------------------------

def _peak_window(y: np.ndarray, i: int, floor: float) -> slice:
    lo = i
    while lo > 0 and y[lo - 1] > floor:
        lo -= 1
    hi = i
    while hi < len(y) - 1 and y[hi + 1] > floor:
        hi += 1
    return slice(lo, hi + 1)


def fit_peak(x, y, floor_fraction: float = 0.0, min_points: int = 7) -> PearsonFit | None:
    """Pearson fit of the most prominent interior maximum of ``y``.

    The window runs from the peak down to its prominence bases, the valleys
    that separate it from higher ground, and is cut further where ``y`` falls
    to ``floor_fraction`` of the peak. A rising tail that ends at the grid edge
    is therefore never mistaken for the peak or merged into its window. At least
    ``min_points`` points centred on the peak are used, with negative values
    clipped to zero. Returns ``None`` when there is no positive interior peak.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    peaks, props = find_peaks(y, height=0.0, prominence=0.0)
    keep = props["peak_heights"] > 0
    if not keep.any():
        return None
    peaks = peaks[keep]
    props = {k: v[keep] for k, v in props.items()}
    k = int(np.argmax(props["prominences"]))
    i = int(peaks[k])
    win = _peak_window(y, i, floor_fraction * y[i])
    win = slice(max(win.start, int(props["left_bases"][k])),
                min(win.stop, int(props["right_bases"][k]) + 1))
    if win.stop - win.start < min_points:
        half = min_points // 2
        win = slice(max(0, i - half), min(len(y), i + half + 1))
    # a derivative peak is flanked by negative lobes that no Pearson profile
    # can follow; only its positive part is fitted
    return fit_split_pearson7(x[win], np.clip(y[win], 0.0, None))


def critical_bounds(curve, y=None, smooth_window: int | None = None,
                    floor_fraction: float = 0.0) -> CriticalBounds:
    """Bracket the transition of an increasing order parameter curve.

    The upper bound is the Pearson center of the first-derivative peak and the
    lower bound that of the second-derivative peak. Raw argmax positions are kept
    for comparison.
    """
    if isinstance(curve, EnsembleCurve):
        x, yv = curve.x, curve.mean
    else:
        x, yv = np.asarray(curve, dtype=float), np.asarray(y, dtype=float)
    if np.ptp(yv) <= 1e-12 * max(1.0, float(np.max(np.abs(yv)))):
        return CriticalBounds.none("flat curve")
    d1 = numeric_derivative(x, yv, 1, smooth_window)
    d2 = numeric_derivative(x, yv, 2, smooth_window)
    f1 = fit_peak(x, d1, floor_fraction)
    f2 = fit_peak(x, d2, floor_fraction)
    if f1 is None or f2 is None:
        return CriticalBounds.none("no interior derivative peak")
    return CriticalBounds(
        w_lower=f2.center, w_upper=f1.center,
        err_lower=float(f2.errors[1]), err_upper=float(f1.errors[1]),
        argmax_lower=float(x[np.argmax(d2)]), argmax_upper=float(x[np.argmax(d1)]),
        found=bool(f1.converged and f2.converged), fits=(f1, f2),
    )


# --- power laws ---------------------------------------------------------------

def _loglog_fit(t, y):
    res = stats.linregress(np.log(t), np.log(y))
    return -res.slope, res.stderr, res.rvalue ** 2


def fit_power_law(t, values, window: tuple[float, float] = (10.0, 500.0),
                  min_points: int = 10, sensitivity: bool = True) -> PowerLawFit:
    """``alpha`` of ``values ~ t**-alpha`` by log-log regression inside ``window``.

    Non-positive values are dropped; more than half dropped refuses the fit.
    The alphas for windows moved by a factor 2 at either end are reported in
    ``sensitivity``.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(values, dtype=float)
    lo, hi = window
    sel = (t >= lo) & (t <= hi)
    if sel.sum() < min_points:
        raise ValueError(f"{sel.sum()} points in window {window}; need {min_points}")
    good = sel & (y > 0) & np.isfinite(y)
    excluded = int(sel.sum() - good.sum())
    if excluded > 0.5 * sel.sum():
        raise ValueError(f"{excluded} of {sel.sum()} points non-positive in window {window}")
    if good.sum() < 3:
        raise ValueError("fewer than three usable points")
    alpha, err, r2 = _loglog_fit(t[good], y[good])
    sens = {}
    if sensitivity:
        for name, w in (("t_min*2", (2 * lo, hi)), ("t_min/2", (lo / 2, hi)),
                        ("t_max/2", (lo, hi / 2)), ("t_max*2", (lo, 2 * hi))):
            m = (t >= w[0]) & (t <= w[1]) & (y > 0) & np.isfinite(y)
            if m.sum() >= min_points:
                sens[name] = float(_loglog_fit(t[m], y[m])[0])
    return PowerLawFit(float(alpha), float(err), (float(lo), float(hi)), float(r2),
                       int(good.sum()), excluded, sens)


def alpha_per_realization(t, curves, window: tuple[float, float] = (10.0, 500.0)) -> tuple[float, float]:
    """Fit every curve separately; return the mean alpha and its standard error."""
    alphas = np.array([fit_power_law(t, c, window, sensitivity=False).alpha for c in curves])
    if len(alphas) < 2:
        return float(alphas[0]), float("nan")
    return float(alphas.mean()), float(alphas.std(ddof=1) / math.sqrt(len(alphas)))


def gaussian_toy_model(t, alpha: float, diffusion: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Return probability and squared-density integral of a spreading Gaussian.

    With ``sigma = (sqrt(2) D t)**alpha``: ``P00 = 1/sqrt(2 pi sigma^2)`` and
    ``S2 = 1/(2 sqrt(pi) sigma)``; both decay as ``t**-alpha``.
    """
    t = np.asarray(t, dtype=float)
    sigma = (math.sqrt(2.0) * diffusion * t) ** alpha
    return 1.0 / np.sqrt(2 * math.pi * sigma ** 2), 1.0 / (2.0 * math.sqrt(math.pi) * sigma)


# --- phase diagram ------------------------------------------------------------

@dataclass
class PhaseDiagram:
    W: np.ndarray
    U: np.ndarray
    S2: np.ndarray          # shape (len(U), len(W))
    S2_err: np.ndarray
    level: float
    contour: np.ndarray     # W at the level for each U, nan where absent
    bounds: list
    partial: bool

    def rows(self):
        for j, u in enumerate(self.U):
            for i, w in enumerate(self.W):
                yield float(w), float(u), float(self.S2[j, i]), float(self.S2_err[j, i])


def level_crossing(x, y, level: float) -> float:
    """First x where the piecewise-linear y crosses ``level`` upward (nan if none)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    for i in range(len(x) - 1):
        y0, y1 = y[i], y[i + 1]
        if not (np.isfinite(y0) and np.isfinite(y1)):
            continue
        if y0 == level:
            return float(x[i])
        if (y0 - level) * (y1 - level) < 0:
            return float(x[i] + (level - y0) * (x[i + 1] - x[i]) / (y1 - y0))
    if np.isfinite(y[-1]) and y[-1] == level:
        return float(x[-1])
    return float("nan")


def phase_diagram(W: Sequence[float], U: Sequence[float], S2, S2_err=None,
                  reference=(1.0, 0.0), smooth_window: int | None = None) -> PhaseDiagram:
    """Reduce an asymptotic-S2 grid to per-U bounds and an iso-contour.

    ``S2[j, i]`` belongs to ``(W[i], U[j])``. The contour level is S2 at
    ``reference = (W, U)``, bilinearly interpolated, and each U row is cut at
    that level.
    """
    W = np.asarray(W, dtype=float)
    U = np.asarray(U, dtype=float)
    S2 = np.asarray(S2, dtype=float)
    if S2.shape != (len(U), len(W)):
        raise ValueError(f"S2 shape {S2.shape} != (len(U), len(W)) = {(len(U), len(W))}")
    err = np.zeros_like(S2) if S2_err is None else np.asarray(S2_err, dtype=float)
    partial = bool(np.isnan(S2).any())
    level = _bilinear(W, U, S2, *reference)
    contour = np.array([level_crossing(W, S2[j], level) for j in range(len(U))])
    if np.isnan(contour).any():
        partial = True
    bounds = []
    for j in range(len(U)):
        row = S2[j]
        if np.isnan(row).any() or len(W) < 5:
            bounds.append(CriticalBounds.none("missing cells"))
            continue
        bounds.append(critical_bounds(W, row, smooth_window=smooth_window))
    return PhaseDiagram(W, U, S2, err, float(level), contour, bounds, partial)


def _bilinear(W, U, S2, w, u) -> float:
    """S2 at (w, u); nan when the point lies outside the grid."""
    if not W.min() <= w <= W.max() or not U.min() <= u <= U.max():
        return float("nan")
    if len(U) == 1:
        return float(np.interp(w, W, S2[0]))
    f = RegularGridInterpolator((U, W), S2, method="linear")
    return float(f([[u, w]])[0])
