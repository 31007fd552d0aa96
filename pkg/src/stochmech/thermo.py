"""Classical analogue: Fokker-Planck propagation around a Maxwell-Boltzmann
reference diffusion, Bayes updates that keep the forward drift, and the
relative-entropy check of the resulting process.

The reference diffusion is dx = b_plus dt + sigma dW with
b_plus = -(sigma^2 / 2kT) H'.  Its equilibrium is C exp(-H/kT).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from . import testfunctions
from .core import (Density, PhysicalParams, ScalarPotential, grad, laplacian, read_density,
                   trapezoid, write_density)
from .errors import MissingArtifact, NotNormalizable, StabilityViolation
from .estimators import pathwise_kl, relative_entropy
from .measurement import CORE_FRACTION, bayes_posterior, core_mask
from .nelson import DRIFT_CAP, DriftField, DriftSeries, sample_forward

MASS_TOL = 1e-8
DENSITY_FLOOR = 1e-12
TIME_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class ThermoParams:
    kT: float
    sigma_sq: float
    H: ScalarPotential

    def __post_init__(self):
        for name in ("kT", "sigma_sq"):
            val = getattr(self, name)
            if not np.isfinite(val) or val <= 0:
                raise ValueError(f"{name} must be finite and > 0, got {val!r}")

    @property
    def grid(self):
        return self.H.grid

    def physical(self):
        """PhysicalParams whose sigma_sq matches, for the path sampler."""
        return PhysicalParams(hbar=self.sigma_sq, mass=1.0)


def equilibrium_density(tp):
    """C exp(-H/kT) normalized by trapezoid quadrature."""
    e = -(tp.H.values - tp.H.values.min()) / tp.kT
    w = np.exp(e)
    z = trapezoid(w, tp.grid)
    if not np.isfinite(z) or z <= 0:
        raise NotNormalizable(f"exp(-H/kT) has quadrature {z!r}")
    return Density(tp.grid, w / z)


def forward_drift_from_H(tp, time=0.0):
    b = -(tp.sigma_sq / (2 * tp.kT)) * grad(tp.H.values, tp.grid)
    return DriftField(tp.grid, time, b_plus=b)


def _b_plus_array(b_plus, grid):
    b = b_plus.b_plus if isinstance(b_plus, DriftField) else b_plus
    b = np.asarray(b, dtype=float)
    if b.shape != (grid.n,):
        raise ValueError("forward drift does not match the grid")
    return b


def grad_log(rho, grid, floor=DENSITY_FLOOR, drift_cap=DRIFT_CAP):
    """d/dx log rho where rho > floor * max; interpolated (held constant past the ends) elsewhere."""
    rho = np.asarray(rho, dtype=float)
    ok = rho > floor * rho.max()
    if not ok.any():
        raise ValueError("density vanishes everywhere")
    idx = np.flatnonzero(ok)
    g = (grad(rho, grid)[idx] / rho[idx])
    g = np.interp(np.arange(rho.size), idx, g)
    return np.clip(g, -drift_cap, drift_cap)


def backward_drift_field(rho, b_plus, sigma_sq):
    """b_minus = b_plus - sigma^2 d/dx log rho."""
    bp = _b_plus_array(b_plus, rho.grid)
    bm = bp - sigma_sq * grad_log(rho.values, rho.grid)
    return DriftField(rho.grid, rho.time, b_plus=bp, b_minus=bm)


# -- Fokker-Planck ------------------------------------------------------------

def _bernoulli(z):
    """z / (exp(z) - 1), with the removable singularity filled in."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-8
    with np.errstate(over="ignore", invalid="ignore"):
        out = z / np.expm1(np.where(small, 1.0, z))
    return np.where(small, 1.0 - 0.5 * z, out)


def fp_operator(grid, b_plus, sigma_sq):
    """Bands (lower, diag, upper) of the exponentially fitted finite-volume operator.

    Control volumes carry the trapezoid weights, interface drift is the mean
    of the two nodal values, and both ends are zero-flux.  The discrete
    stationary state has rho_{i+1}/rho_i = exp(b dx / D), D = sigma^2/2.
    """
    if grid.periodic_bc:
        raise ValueError("the Fokker-Planck solver supports bounded grids only")
    b = _b_plus_array(b_plus, grid)
    D = 0.5 * sigma_sq
    dx = grid.dx
    P = 0.5 * (b[1:] + b[:-1]) * dx / D
    a = D / dx * _bernoulli(-P)  # flux coefficient of rho_i
    c = D / dx * _bernoulli(P)   # flux coefficient of rho_{i+1}
    w = grid.weights
    n = grid.n
    lower = np.zeros(n)
    upper = np.zeros(n)
    diag = np.zeros(n)
    lower[1:] = a / w[1:]
    upper[:-1] = c / w[:-1]
    diag[:-1] -= a / w[:-1]
    diag[1:] -= c / w[1:]
    return lower, diag, upper


def stability_bound(grid, b_plus, sigma_sq):
    """Largest dt keeping the explicit half of the Crank-Nicolson step positive."""
    _, diag, _ = fp_operator(grid, b_plus, sigma_sq)
    return 2.0 / np.max(np.abs(diag))


@dataclass(frozen=True, eq=False)
class DensityHistory:
    grid: object
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        vals = np.array(self.values, dtype=float)
        if vals.shape != (len(times), self.grid.n):
            raise ValueError("frames do not match times/grid")
        d = np.diff(times)
        if len(d) and not np.all(d > 0):
            raise ValueError("history times must be strictly increasing")
        times.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.times)

    def frame(self, k):
        return Density(self.grid, self.values[k], self.times[k])

    def densities(self):
        return self.values

    def masses(self):
        return trapezoid(self.values, self.grid)

    def index_of(self, t, tol=TIME_EPS):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > tol * max(1.0, abs(t)):
            raise KeyError(f"no frame at t={t}")
        return k

    def at(self, t):
        return self.frame(self.index_of(t))

    def restrict(self, t_start, t_end):
        m = (self.times >= t_start - TIME_EPS) & (self.times <= t_end + TIME_EPS)
        return DensityHistory(self.grid, self.times[m], self.values[m])


def fokker_planck_propagate(rho0, b_plus, sigma_sq, t0, t1, dt, checkpoint_stride=1):
    """Crank-Nicolson in time on the exponentially fitted (Chang-Cooper type) fluxes.

    Raises StabilityViolation when dt exceeds the positivity bound or the
    mass drifts by more than 1e-8.  Frame times are ``t0 + k dt`` with a
    shortened last step.
    """
    grid = rho0.grid
    if t1 < t0:
        raise ValueError("Fokker-Planck propagation runs forward in time")
    if t1 == t0:
        return DensityHistory(grid, [t0], [rho0.values])
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if checkpoint_stride < 1:
        raise ValueError("checkpoint_stride must be >= 1")
    lower, diag, upper = fp_operator(grid, b_plus, sigma_sq)
    bound = 2.0 / np.max(np.abs(diag))
    if dt > bound * (1 + 1e-12):
        raise StabilityViolation(f"dt={dt:g} exceeds the positivity bound {bound:.4g}")
    span = t1 - t0
    n_full = int(np.floor(span / dt + TIME_EPS))
    rem = span - n_full * dt
    if rem <= TIME_EPS * dt:
        rem = 0.0

    def stepper(h):
        lo, di, up = -0.5 * h * lower, 1 - 0.5 * h * diag, -0.5 * h * upper

        def go(r):
            rhs = (1 + 0.5 * h * diag) * r
            rhs[1:] += 0.5 * h * lower[1:] * r[:-1]
            rhs[:-1] += 0.5 * h * upper[:-1] * r[1:]
            return kernels.solve_tridiagonal(lo, di, up, rhs)
        return go

    step = stepper(dt)
    r = np.array(rho0.values, dtype=float)
    m0 = trapezoid(r, grid)
    times, frames = [t0], [r.copy()]

    def check(r, t):
        m = trapezoid(r, grid)
        if abs(m - m0) > MASS_TOL or r.min() < -MASS_TOL * r.max():
            raise StabilityViolation(f"mass {m:.12g} or positivity lost at t={t:g}")

    for k in range(1, n_full + 1):
        r = step(r)
        if k % checkpoint_stride == 0 or (k == n_full and rem == 0.0):
            check(r, t0 + k * dt)
            times.append(t0 + k * dt)
            frames.append(r.copy())
    if rem:
        r = stepper(rem)(r)
        check(r, t1)
        times.append(t1)
        frames.append(r.copy())
    times[-1] = t1
    frames = np.maximum(np.array(frames), 0.0)
    return DensityHistory(grid, times, frames)


# -- measurement --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClassicalMeasurement:
    """Bayes-updated density history under the unchanged forward drift.

    ``reference`` is the reference density continued over the same frames;
    ``phi`` is -log(rho_tilde/rho) on the core and NaN elsewhere.
    """

    event: object
    rho_tilde: Density
    history: DensityHistory
    reference: DensityHistory
    b_plus: np.ndarray
    sigma_sq: float
    phi: np.ndarray = field(repr=False)

    @property
    def t1(self):
        return float(self.history.times[0])

    @property
    def t2(self):
        return float(self.history.times[-1])

    def backward_drifts(self):
        """DriftSeries with b_plus and the new backward drift b_plus - sigma^2 grad log rho_tilde."""
        g = self.history.grid
        bm = np.stack([self.b_plus - self.sigma_sq * grad_log(r, g) for r in self.history.values])
        bp = np.broadcast_to(self.b_plus, bm.shape)
        return DriftSeries(g, self.history.times, {"b_plus": bp, "b_minus": bm})

    def reference_backward_drifts(self):
        g = self.reference.grid
        bm = np.stack([self.b_plus - self.sigma_sq * grad_log(r, g) for r in self.reference.values])
        bp = np.broadcast_to(self.b_plus, bm.shape)
        return DriftSeries(g, self.reference.times, {"b_plus": bp, "b_minus": bm})

    def sample(self, n_paths, dt, seed, **kw):
        """Forward paths of the new process: law rho_tilde(t1), drift b_plus."""
        params = PhysicalParams(hbar=self.sigma_sq, mass=1.0)
        drifts = DriftSeries(self.history.grid, [self.t1, self.t2],
                             {"b_plus": np.stack([self.b_plus, self.b_plus])})
        return sample_forward(self.rho_tilde, drifts, params, n_paths, dt, seed, **kw)


def log_ratio(num, den, core):
    """log(num/den) on ``core``, NaN elsewhere."""
    out = np.full(np.shape(num), np.nan)
    out[core] = np.log(num[core] / den[core])
    return out


def classical_measurement(reference, b_plus, ev, sigma_sq, t2, dt, checkpoint_stride=1,
                          core_fraction=CORE_FRACTION):
    """Bayes update at ``ev.time`` followed by FP propagation with the same b_plus.

    ``reference`` is a Density (taken to sit at ``ev.time``) or a
    DensityHistory containing that time.  The reference is continued from
    ``t1`` on the same schedule so both histories share frame times.
    """
    rho1 = reference if isinstance(reference, Density) else reference.at(ev.time)
    rho1 = Density(rho1.grid, rho1.values, ev.time)
    bp = _b_plus_array(b_plus, rho1.grid)
    rho_tilde = bayes_posterior(rho1, ev)
    t1 = ev.time
    new = fokker_planck_propagate(rho_tilde, bp, sigma_sq, t1, t2, dt, checkpoint_stride)
    ref = fokker_planck_propagate(rho1, bp, sigma_sq, t1, t2, dt, checkpoint_stride)
    mask = core_mask(new.values, ref.values, fraction=core_fraction)
    phi = -log_ratio(new.values, ref.values, mask)
    return ClassicalMeasurement(ev, rho_tilde, new, ref, bp, float(sigma_sq), phi)


def kl_curve(history, rho_bar):
    """Relative entropy of each frame with respect to ``rho_bar``."""
    return np.array([relative_entropy(history.frame(k), rho_bar) for k in range(len(history))])


@dataclass(frozen=True)
class ThermoResidual:
    rms: float
    initial_deviation: float
    n_points: int


def _frames(b, shape):
    if isinstance(b, DriftSeries):
        b = b["b_minus"]
    if isinstance(b, DriftField):
        b = b.b_minus
    return np.broadcast_to(np.asarray(b, dtype=float), shape)


def thermo_pde_residual(rho, rho_tilde, b_minus, sigma_sq, core_fraction=CORE_FRACTION):
    """RMS over the core of phi_t + b_minus phi' - (sigma^2/2) phi'' + (sigma^2/2) phi'^2.

    ``rho`` and ``rho_tilde`` are DensityHistory objects on common frames and
    ``b_minus`` is the reference backward drift (array, DriftField or
    DriftSeries).  The second return field is max |phi(t1) + log(rho_tilde/rho)(t1)|.
    """
    if not np.allclose(rho.times, rho_tilde.times, rtol=0, atol=1e-12):
        raise ValueError("histories must share frame times")
    times = rho.times
    if len(times) < 3:
        raise ValueError("need at least 3 frames")
    dts = np.diff(times)
    if not np.allclose(dts, dts[0], rtol=1e-9, atol=0):
        raise ValueError("frames must be equally spaced")
    dt = dts[0]
    grid = rho.grid
    mask = core_mask(rho.values, rho_tilde.values, fraction=core_fraction)
    phi = -log_ratio(rho_tilde.values, rho.values, mask)
    filled = np.where(mask, phi, 0.0)
    bm = _frames(b_minus, rho.values.shape)
    D = 0.5 * sigma_sq
    res = []
    for k in range(1, len(times) - 1):
        m = mask[k - 1] & mask[k] & mask[k + 1]
        m[1:-1] &= m[:-2] & m[2:]
        m[:2] = m[-2:] = False
        if not m.any():
            continue
        dphi = grad(filled[k], grid)
        lphi = laplacian(filled[k], grid)
        phit = (filled[k + 1] - filled[k - 1]) / (2 * dt)
        R = phit + bm[k] * dphi - D * lphi + D * dphi**2
        res.append(R[m])
    allr = np.concatenate(res) if res else np.array([np.inf])
    m0 = mask[0]
    target = np.log(rho_tilde.values[0][m0] / rho.values[0][m0])
    dev = float(np.max(np.abs(phi[0][m0] + target))) if m0.any() else 0.0
    return ThermoResidual(float(np.sqrt(np.mean(allr**2))), dev, int(allr.size))


# -- relative-entropy minimality ----------------------------------------------

@dataclass(frozen=True)
class KLCandidate:
    name: str
    eps: float
    value: float
    excess: float
    excess_stderr: float
    expected_excess: float


@dataclass(frozen=True)
class KLReport:
    marginal: float
    optimal: KLCandidate
    candidates: tuple

    def as_dict(self):
        out = {"marginal": self.marginal, "optimal": self.optimal.__dict__}
        out["candidates"] = [c.__dict__ for c in self.candidates]
        return out


def perturbed_drift(b_plus, grid, test, eps):
    """b_plus + eps * grad(phi_test) tabulated on the grid."""
    tf = testfunctions.get(test) if isinstance(test, str) else test
    return np.asarray(b_plus, dtype=float) + eps * np.real(tf.df(grid.x))


def expected_excess(result, test, eps, dt, checkpoint_stride=1):
    """E int eps^2 |grad phi_test|^2 / (2 sigma^2) dt by FP propagation and quadrature."""
    tf = testfunctions.get(test) if isinstance(test, str) else test
    g = result.history.grid
    if eps == 0:
        return 0.0
    beta = perturbed_drift(result.b_plus, g, tf, eps)
    h = fokker_planck_propagate(result.rho_tilde, beta, result.sigma_sq, result.t1, result.t2,
                                dt, checkpoint_stride)
    integrand = trapezoid(h.values * np.real(tf.df(g.x)) ** 2, g) * eps**2 / (2 * result.sigma_sq)
    return float(np.trapezoid(integrand, h.times))


def kl_minimality_check(result, candidates=(("x", 0.5), ("x2", 0.5), ("sin", 0.5)),
                        n_paths=100_000, dt=1e-3, seed=0, record_stride=10, jobs=1,
                        fp_dt=None):
    """Pathwise KL of the optimal process and of gradient-perturbed competitors.

    Each competitor has forward drift b_plus + eps grad(phi_test) and the
    same initial law rho_tilde(t1).  Its excess over the optimum is the
    Girsanov drift term, compared with an FP-quadrature oracle.
    """
    g = result.history.grid
    params = PhysicalParams(hbar=result.sigma_sq, mass=1.0)
    rho1 = result.reference.frame(0)
    t1, t2 = result.t1, result.t2
    bp = result.b_plus
    ref_fn = lambda x, t: np.interp(x, g.x, bp)  # noqa: E731
    fp_dt = dt if fp_dt is None else fp_dt

    def run(name, eps, salt):
        beta = bp if eps == 0 else perturbed_drift(bp, g, name, eps)
        drifts = DriftSeries(g, [t1, t2], {"b_plus": np.stack([beta, beta])})
        ens = sample_forward(result.rho_tilde, drifts, params, n_paths, dt,
                             np.random.SeedSequence([seed, salt]).generate_state(1)[0],
                             record_stride=record_stride, jobs=jobs)
        kl = pathwise_kl(ens, drifts, ref_fn, result.rho_tilde, rho1, result.sigma_sq)
        expected = expected_excess(result, name, eps, fp_dt) if eps else 0.0
        return KLCandidate(name, float(eps), kl.value, kl.drift, kl.drift_stderr, expected)

    opt = run("optimal", 0.0, 0)
    others = tuple(run(n, e, i + 1) for i, (n, e) in enumerate(candidates))
    return KLReport(relative_entropy(result.rho_tilde, rho1), opt, others)


# -- export -------------------------------------------------------------------

def write_density_history(directory, history, prefix="rho"):
    """One ``x,rho`` CSV per frame plus ``<prefix>_manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for k in range(len(history)):
        name = f"{prefix}_{k:05d}.csv"
        write_density(directory / name, Density(history.grid, history.values[k], history.times[k],
                                                validate=False))
        files.append(name)
    manifest = {"times": [float(t) for t in history.times], "files": files,
                "grid": history.grid.to_dict()}
    path = directory / f"{prefix}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_density_history(manifest_path):
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingArtifact(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    frames, grid = [], None
    for name in manifest["files"]:
        p = manifest_path.parent / name
        if not p.exists():
            raise MissingArtifact(p)
        rho = read_density(p, validate=False)
        grid = grid or rho.grid
        frames.append(rho.values)
    return DensityHistory(grid, manifest["times"], frames)
