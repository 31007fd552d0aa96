"""Densities and conditional drifts estimated from sampled paths, plus the
statistical identity checks built on them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Density, Grid1D, grad, trapezoid
from .errors import EmptyEnsemble, InsufficientData, SupportMismatch

DEFAULT_BINS = 64
CORE_FRACTION = 0.05
LOG_FLOOR = 1e-12
SUPPORT_MASS_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class BinnedField:
    edges: np.ndarray
    counts: np.ndarray
    value: np.ndarray
    stderr: np.ndarray

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def width(self):
        return float(self.edges[1] - self.edges[0])

    @property
    def occupied(self):
        return self.counts > 1

    @property
    def empty_bins(self):
        return ~self.occupied

    def density(self):
        """Histogram density per bin."""
        return self.counts / (self.counts.sum() * self.width)

    def core(self, fraction=CORE_FRACTION):
        d = self.density()
        return self.occupied & (d > fraction * d.max())


def _check_nonempty(x):
    if x.size == 0:
        raise EmptyEnsemble("ensemble has no paths")


def default_edges(x, n_bins):
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 1e-9 * (hi - lo)
    return np.linspace(lo - pad, hi + pad, n_bins + 1)


def bin_statistics(x, y, edges):
    """Per-bin count, mean and standard error of ``y`` grouped by ``x``."""
    n_bins = len(edges) - 1
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_bins - 1)
    inside = (x >= edges[0]) & (x <= edges[-1])
    idx, y = idx[inside], y[inside]
    counts = np.bincount(idx, minlength=n_bins).astype(float)
    s1 = np.bincount(idx, weights=y, minlength=n_bins)
    s2 = np.bincount(idx, weights=y * y, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, s1 / counts, np.nan)
        var = np.where(counts > 1, (s2 - counts * mean**2) / (counts - 1), np.nan)
        se = np.where(counts > 1, np.sqrt(np.maximum(var, 0) / counts), np.inf)
    return counts, mean, se


def empirical_density(ens, t, n_bins=DEFAULT_BINS, grid=None):
    """Histogram of the paths at time ``t``, interpolated onto ``grid`` and normalized."""
    x = ens.at(t)
    _check_nonempty(x)
    edges = default_edges(x, n_bins)
    counts, _, _ = bin_statistics(x, np.zeros_like(x), edges)
    h = edges[1] - edges[0]
    hist = counts / (counts.sum() * h)
    centers = 0.5 * (edges[1:] + edges[:-1])
    if grid is None:
        grid = Grid1D(edges[0] - h, edges[-1] + h, 8 * n_bins + 1)
    xs = np.concatenate([[edges[0]], centers, [edges[-1]]])
    ys = np.concatenate([[hist[0]], hist, [hist[-1]]])
    vals = np.interp(grid.x, xs, ys, left=0.0, right=0.0)
    mass = trapezoid(vals, grid)
    if mass <= 0:
        # all samples fall between two nodes of a coarse grid
        k = int(np.argmin(np.abs(grid.x - x.mean())))
        vals = np.zeros(grid.n)
        vals[k] = 1.0
        mass = trapezoid(vals, grid)
    return Density(grid, vals / mass, t)


def density_cdf(rho, x):
    """Exact CDF of the piecewise-linear ``rho`` at arbitrary points."""
    g = rho.grid
    cdf = rho.cdf()
    pos = np.clip((np.asarray(x, dtype=float) - g.x_min) / g.dx, 0.0, g.n - 1.0)
    i = np.minimum(pos.astype(int), g.n - 2)
    s = (pos - i) * g.dx
    a, b = rho.values[i], rho.values[i + 1]
    return cdf[i] + a * s + (b - a) * s * s / (2 * g.dx)


def tv_distance(x, rho, n_bins=DEFAULT_BINS, tail=1e-7):
    """Total-variation distance between the binned sample ``x`` and ``rho``.

    Bins span the central ``1 - 2*tail`` mass of ``rho`` together with the
    sample range; reference mass outside the bins counts fully.
    """
    x = np.asarray(x, dtype=float)
    _check_nonempty(x)
    cdf_nodes = rho.cdf()
    total = cdf_nodes[-1]
    qs = np.interp([tail * total, (1 - tail) * total], cdf_nodes, rho.grid.x)
    lo, hi = min(qs[0], x.min()), max(qs[1], x.max())
    edges = np.linspace(lo, hi + 1e-12 * (hi - lo), n_bins + 1)
    p_hat = np.histogram(x, edges)[0] / x.size
    c = density_cdf(rho, edges) / total
    p_ref = np.diff(c)
    outside = c[0] + (1 - c[-1])
    return float(0.5 * (np.abs(p_hat - p_ref).sum() + outside))


def _neighbor(ens, t, offset):
    times, pos = ens.ascending()
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > 1e-7 * max(1.0, abs(t)):
        raise KeyError(f"time {t} is not a recorded time")
    j = k + offset
    if not 0 <= j < len(times):
        raise InsufficientData(f"no recorded time {'after' if offset > 0 else 'before'} t={t}")
    return pos[k], pos[j], abs(times[j] - times[k])


def estimate_forward_drift(ens, t, n_bins=DEFAULT_BINS, edges=None):
    """Bin means of (x(t+dt) - x(t)) / dt grouped by x(t); dt is the record spacing."""
    x, x_next, dt = _neighbor(ens, t, +1)
    _check_nonempty(x)
    edges = default_edges(x, n_bins) if edges is None else edges
    counts, mean, se = bin_statistics(x, (x_next - x) / dt, edges)
    return BinnedField(edges, counts, mean, se)


def estimate_backward_drift(ens, t, n_bins=DEFAULT_BINS, edges=None):
    """Bin means of (x(t) - x(t-dt)) / dt grouped by x(t)."""
    x, x_prev, dt = _neighbor(ens, t, -1)
    _check_nonempty(x)
    edges = default_edges(x, n_bins) if edges is None else edges
    counts, mean, se = bin_statistics(x, (x - x_prev) / dt, edges)
    return BinnedField(edges, counts, mean, se)


def weighted_fit(x, y, w):
    """Weighted least squares ``y = a + b x``; returns (slope, intercept, slope_stderr)."""
    W = w.sum()
    xm, ym = (w * x).sum() / W, (w * y).sum() / W
    sxx = (w * (x - xm) ** 2).sum()
    if sxx <= 0:
        raise InsufficientData("regressor has no spread")
    slope = (w * (x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    resid = y - intercept - slope * x
    dof = max(len(x) - 2, 1)
    chi2 = (w * resid**2).sum() / dof
    return float(slope), float(intercept), float(np.sqrt(max(chi2, 1.0) / sxx))


@dataclass(frozen=True)
class RegressionReport:
    slope: float
    intercept: float
    slope_stderr: float
    rms: float
    n_bins: int
    table: dict

    def slope_within(self, tol):
        return abs(self.slope - 1.0) <= tol


def _as_times(t):
    return [float(v) for v in np.atleast_1d(t)]


def duality_residual(ens, t, n_bins=DEFAULT_BINS, params=None, core_fraction=CORE_FRACTION):
    """Check b_plus - b_minus = sigma^2 d/dx log rho on core bins.

    ``t`` may be a single recorded time or a sequence of them; the bins of
    all listed times are pooled into one weighted regression of
    (b_plus_hat - b_minus_hat) on sigma^2 grad log rho_hat.
    """
    sigma_sq = 1.0 if params is None else params.sigma_sq
    xs, ys, ws, cs = [], [], [], []
    for tk in _as_times(t):
        x = ens.at(tk)
        _check_nonempty(x)
        edges = default_edges(x, n_bins)
        bp = estimate_forward_drift(ens, tk, edges=edges)
        bm = estimate_backward_drift(ens, tk, edges=edges)
        dens = bp.density()
        core = bp.core(core_fraction)
        with np.errstate(divide="ignore"):
            logd = np.log(np.maximum(dens, LOG_FLOOR))
        glog = np.gradient(logd, bp.centers)
        core[0] = core[-1] = False
        core &= np.roll(bp.occupied, 1) & np.roll(bp.occupied, -1)
        y = (bp.value - bm.value)[core]
        var = (bp.stderr**2 + bm.stderr**2)[core]
        xs.append(sigma_sq * glog[core])
        ys.append(y)
        ws.append(1.0 / var)
        cs.append(bp.centers[core])
    x, y, w = map(np.concatenate, (xs, ys, ws))
    if len(x) < 3:
        raise InsufficientData(f"only {len(x)} core bins")
    slope, icpt, se = weighted_fit(x, y, w)
    rms = float(np.sqrt((w * (y - x) ** 2).sum() / w.sum()))
    table = {"center": np.concatenate(cs), "regressor": x, "difference": y, "weight": w}
    return RegressionReport(slope, icpt, se, rms, len(x), table)


def drift_regression(ens, t, truth, which="forward", n_bins=DEFAULT_BINS,
                     core_fraction=CORE_FRACTION):
    """Regress binned drift estimates on a known field ``truth(x, t)``.

    ``which`` selects the forward or backward conditional derivative.  Times
    are pooled as in :func:`duality_residual`.
    """
    est = estimate_forward_drift if which == "forward" else estimate_backward_drift
    xs, ys, ws, cs = [], [], [], []
    for tk in _as_times(t):
        b = est(ens, tk, n_bins)
        core = b.core(core_fraction)
        xs.append(np.asarray(truth(b.centers[core], tk), dtype=float))
        ys.append(b.value[core])
        ws.append(1.0 / b.stderr[core] ** 2)
        cs.append(b.centers[core])
    x, y, w = map(np.concatenate, (xs, ys, ws))
    if len(x) < 3:
        raise InsufficientData(f"only {len(x)} core bins")
    slope, icpt, se = weighted_fit(x, y, w)
    rms = float(np.sqrt((w * (y - x) ** 2).sum() / w.sum()))
    return RegressionReport(slope, icpt, se, rms, len(x),
                            {"center": np.concatenate(cs), "truth": x, "estimate": y, "weight": w})


def continuity_residual_fields(rho, current, times, grid):
    """RMS of d(rho)/dt + d(current)/dx over interior nodes and interior frames.

    ``rho`` and ``current`` have shape (n_frames, n); frames must be equally spaced.
    """
    rho = np.asarray(rho, dtype=float)
    current = np.asarray(current, dtype=float)
    times = np.asarray(times, dtype=float)
    if len(times) < 3:
        raise InsufficientData("need at least 3 frames")
    dts = np.diff(times)
    if not np.allclose(dts, dts[0], rtol=1e-9, atol=0):
        raise ValueError("frames must be equally spaced in time")
    drho = (rho[2:] - rho[:-2]) / (2 * dts[0])
    div = grad(current[1:-1], grid)
    r = (drho + div)[:, 1:-1]
    return float(np.sqrt(np.mean(r**2)))


def probability_current(values, grid, params):
    """(hbar/m) Im(conj(psi) psi'), i.e. v rho without dividing by psi."""
    return params.hbar / params.mass * np.imag(np.conj(values) * grad(values, grid))


def continuity_residual(history, params):
    """Continuity-equation residual on the solver's own rho and v rho."""
    rho = history.densities()
    cur = probability_current(history.values, history.grid, params)
    return continuity_residual_fields(rho, cur, history.times, history.grid)


def relative_entropy(p, q, floor=LOG_FLOOR):
    """Quadrature of p log(p/q)."""
    pv = np.asarray(p.values, dtype=float)
    qv = np.asarray(q.values, dtype=float)
    grid = p.grid
    bad = (qv < floor) & (pv > 0)
    leaked = trapezoid(np.where(bad, pv, 0.0), grid)
    if leaked > SUPPORT_MASS_TOL:
        raise SupportMismatch(f"p has mass {leaked:.3g} where q < {floor}")
    on = pv > floor
    integrand = np.zeros_like(pv)
    integrand[on] = pv[on] * np.log(pv[on] / np.maximum(qv[on], floor))
    return float(trapezoid(integrand, grid))


@dataclass(frozen=True)
class PathwiseKL:
    value: float
    marginal: float
    drift: float
    drift_stderr: float

    def __float__(self):
        return self.value


def _field_fn(f, name):
    if callable(f):
        return f
    return lambda x, t: f.evaluate(name, x, t)


def pathwise_kl(ens, beta_q, b_plus_ref, rho_tilde_t1, rho_t1, sigma_sq, name="b_plus"):
    """Girsanov decomposition: H(rho_tilde, rho) + E int |b_plus - beta_q|^2 / (2 sigma^2) dt.

    ``ens`` must be a forward ensemble sampled under ``beta_q``.  Drift
    arguments are callables ``f(x, t)`` or DriftSeries (component ``name``).
    The time integral is a trapezoid rule over the recorded times.
    """
    if ens.direction != "forward":
        raise ValueError("pathwise_kl needs a forward ensemble")
    beta = _field_fn(beta_q, name)
    ref = _field_fn(b_plus_ref, name)
    times = ens.times
    vals = np.empty_like(ens.positions)
    for k, tk in enumerate(times):
        x = ens.positions[k]
        vals[k] = (ref(x, tk) - beta(x, tk)) ** 2 / (2 * sigma_sq)
    dts = np.diff(times)
    per_path = (0.5 * (vals[1:] + vals[:-1]) * dts[:, None]).sum(axis=0)
    marginal = relative_entropy(rho_tilde_t1, rho_t1)
    drift = float(per_path.mean())
    se = float(per_path.std(ddof=1) / np.sqrt(per_path.size)) if per_path.size > 1 else 0.0
    return PathwiseKL(marginal + drift, marginal, drift, se)
