"""Position measurement in the quantum setting: Bayes posterior, phase-preserving
collapse, and the Nelson process of the collapsed wavefunction.

Discrete convention: a nodal function carries mass ``w_i f_i`` (trapezoid
weights), and the integral of ``f`` over a window ``D`` is the sum over nodes
lying in the closed set ``D``.  A collapsed density therefore puts all of its
mass on nodes inside ``D``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Density, Wavefunction, born_density, grad, laplacian, trapezoid
from .errors import BranchAmbiguity, NegligibleMass, PhaseUndefined
from .nelson import drift_series, sample_forward
from .schrodinger import WavefunctionHistory, propagate

MIN_MASS = 1e-6
PHASE_FLOOR = 1e-14
CORE_FRACTION = 0.05


@dataclass(frozen=True, eq=False)
class MeasurementEvent:
    """Either ``window`` (list of closed intervals, ends may be +-inf) or ``posterior``.

    ``smoothing`` is the width of the inner ramp applied to the window
    indicator (a smooth step squared); ``None`` means three grid spacings, ``0`` a sharp indicator.
    """

    time: float
    window: tuple | None = None
    posterior: Density | None = None
    min_mass: float = MIN_MASS
    smoothing: float | None = None

    def __post_init__(self):
        if (self.window is None) == (self.posterior is None):
            raise ValueError("give exactly one of window or posterior")
        if self.window is not None:
            ivs = sorted((float(a), float(b)) for a, b in self.window)
            for a, b in ivs:
                if not a < b:
                    raise ValueError(f"window interval [{a}, {b}] is empty")
            for (_, b0), (a1, _) in zip(ivs, ivs[1:]):
                if a1 <= b0:
                    raise ValueError("window intervals must be disjoint")
            object.__setattr__(self, "window", tuple(ivs))
        object.__setattr__(self, "time", float(self.time))

    @property
    def kind(self):
        return "window" if self.window is not None else "posterior"

    def _check_grid(self, grid):
        for a, b in self.window:
            for e in (a, b):
                if np.isfinite(e) and not grid.x_min <= e <= grid.x_max:
                    raise ValueError(f"window endpoint {e} lies outside the grid")

    def indicator(self, grid, sharp=False):
        """Nodal indicator of the window, optionally with a smooth inner ramp."""
        self._check_grid(grid)
        x = grid.x
        w = 0.0 if sharp else (3 * grid.dx if self.smoothing is None else self.smoothing)
        chi = np.zeros(grid.n)
        for a, b in self.window:
            inside = (x >= a) & (x <= b)
            if w > 0:
                depth = np.minimum(x - a, b - x)
                chi = np.where(inside, smooth_step(depth / w) ** 2, chi)
            else:
                chi = np.where(inside, 1.0, chi)
        return chi


def smooth_step(s):
    """C-infinity step: 0 for s <= 0, 1 for s >= 1.

    The indicator ramp is its square so that sqrt(chi), which multiplies the
    collapsed wavefunction, stays smooth at the window edge.
    """
    s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
        b = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1.0 - s, 1.0)), 0.0)
    return a / (a + b)


def window_mass(values, grid, window):
    """Quadrature of nodal ``values`` over the closed window (node-membership rule)."""
    x = grid.x
    member = np.zeros(grid.n, dtype=bool)
    for a, b in window:
        member |= (x >= a) & (x <= b)
    return float(trapezoid(np.where(member, values, 0.0), grid))


def bayes_posterior(rho, ev):
    """rho_tilde = chi_D rho / int_D rho for windows; validated passthrough for posteriors."""
    if ev.kind == "posterior":
        post = ev.posterior
        if post.grid != rho.grid:
            raise ValueError("posterior density lives on a different grid")
        return Density(post.grid, post.values, rho.time)
    chi = ev.indicator(rho.grid)
    weighted = chi * rho.values
    mass = trapezoid(weighted, rho.grid)
    if not mass >= ev.min_mass:
        raise NegligibleMass(f"window carries prior mass {mass:.3g} < {ev.min_mass:g}")
    return Density(rho.grid, weighted / mass, rho.time)


def collapse_wavefunction(psi, rho_tilde, floor=PHASE_FLOOR):
    """sqrt(rho_tilde) times the unit-modulus factor psi/|psi|.

    No phase is unwrapped.  Floors are relative amplitudes: nodes where
    sqrt(rho_tilde) <= floor * max sqrt(rho_tilde) get zero, and the phase
    counts as lost where |psi| <= floor**2 * max|psi|, far below any node the
    posterior keeps (so rounding at the cut cannot trigger PhaseUndefined).
    """
    mod = np.abs(psi.values)
    amp = np.sqrt(rho_tilde.values)
    keep = amp > floor * amp.max()
    undefined = keep & (mod <= floor**2 * mod.max())
    if undefined.any():
        raise PhaseUndefined(f"posterior has mass at {int(undefined.sum())} nodes where psi vanishes")
    out = np.zeros(psi.grid.n, dtype=complex)
    out[keep] = (amp[keep] / mod[keep]) * psi.values[keep]
    return Wavefunction(psi.grid, out, psi.time)


def track_log_ratio(num, den, core):
    """log(num/den) frame by frame, imaginary part kept on the branch nearest the previous frame.

    ``num``, ``den``: (n_frames, n) arrays; ``core``: boolean mask of the same
    shape.  Returns (phi with NaN off core, largest phase jump seen on core).
    """
    phi = np.full(num.shape, np.nan + 0j)
    prev_im = None
    max_jump = 0.0
    for k in range(num.shape[0]):
        m = core[k]
        r = np.where(m, num[k] / np.where(m, den[k], 1.0), 1.0)
        lg = np.log(np.where(m, r, 1.0))
        im = lg.imag
        if prev_im is not None:
            both = m & np.isfinite(prev_im)
            shift = np.round((prev_im - im) / (2 * np.pi))
            im = im + 2 * np.pi * np.where(both, shift, 0.0)
            if both.any():
                max_jump = max(max_jump, float(np.max(np.abs(im - prev_im)[both])))
        phi[k] = np.where(m, lg.real + 1j * im, np.nan)
        prev_im = np.where(m, im, np.nan)
    return phi, max_jump


def core_mask(*density_frames, fraction=CORE_FRACTION):
    """Nodes where every supplied density exceeds ``fraction`` of its per-frame maximum."""
    mask = None
    for d in density_frames:
        d = np.asarray(d)
        m = d > fraction * d.max(axis=-1, keepdims=True)
        mask = m if mask is None else mask & m
    return mask


@dataclass(frozen=True, eq=False)
class CollapseResult:
    event: MeasurementEvent
    rho_tilde: Density
    psi_tilde_history: WavefunctionHistory
    reference_history: WavefunctionHistory
    phi: np.ndarray
    branch_jump: float
    params: object = field(repr=False, default=None)

    @property
    def psi_tilde(self):
        return self.psi_tilde_history.frame(0)

    def drift_series(self, params=None):
        return drift_series(self.psi_tilde_history, params or self.params)

    def sample(self, n_paths, dt, seed, params=None, **kw):
        params = params or self.params
        h = self.psi_tilde_history
        return sample_forward(born_density(h.frame(0)), self.drift_series(params), params,
                              n_paths, dt, seed, **kw)


def post_measurement_process(reference, ev, V, dt, t2, params, checkpoint_stride=1,
                             core_fraction=CORE_FRACTION):
    """Collapse at ``ev.time`` and propagate the collapsed wavefunction to ``t2``.

    The reference process is continued over ``[t1, t2]`` from its frame at
    ``t1`` on the same step schedule, so both histories share frame times.
    """
    k1 = reference.index_of(ev.time)
    psi1 = reference.frame(k1)
    rho1 = born_density(psi1)
    rho_tilde = bayes_posterior(rho1, ev)
    psi_t1 = collapse_wavefunction(psi1, rho_tilde)
    t1 = reference.times[k1]
    new = propagate(psi_t1, V, t1, t2, dt, checkpoint_stride, params)
    ref = propagate(psi1, V, t1, t2, dt, checkpoint_stride, params)
    mask = core_mask(new.densities(), ref.densities(), fraction=core_fraction)
    phi, jump = track_log_ratio(new.values, ref.values, mask)
    return CollapseResult(ev, rho_tilde, new, ref, phi, jump, params)


def repetition_probability(result, window=None, t=None):
    """Probability that an immediate repetition finds the particle in the window."""
    window = result.event.window if window is None else window
    h = result.psi_tilde_history
    psi = h.frame(0) if t is None else h.at(t)
    return window_mass(np.abs(psi.values) ** 2, h.grid, window)


@dataclass(frozen=True)
class CollapseResidual:
    rms: float
    initial_deviation: float
    n_points: int


def collapse_pde_residual(result, params, V=None, core_fraction=CORE_FRACTION,
                          max_jump=np.pi / 2):
    """Residual of the complex PDE satisfied by phi = log(psi_tilde/psi).

    Spatial derivatives come from the ratio r = psi_tilde/psi (branch free);
    the time derivative uses the branch-tracked phi.  Also returns the largest
    deviation of phi(t1) from log(rho_tilde/rho)/2 on the core.
    """
    if result.branch_jump > max_jump:
        raise BranchAmbiguity(f"phase of psi_tilde/psi jumped by {result.branch_jump:.3f} rad")
    new, ref = result.psi_tilde_history, result.reference_history
    grid = new.grid
    times = new.times
    if len(times) < 3:
        raise ValueError("need at least 3 frames")
    dts = np.diff(times)
    if not np.allclose(dts, dts[0], rtol=1e-9, atol=0):
        raise ValueError("frames must be equally spaced")
    dt = dts[0]
    c = 1j * params.hbar / (2 * params.mass)
    mask = core_mask(new.densities(), ref.densities(), fraction=core_fraction)
    res = []
    for k in range(1, len(times) - 1):
        m = mask[k - 1] & mask[k] & mask[k + 1]
        m[:2] = m[-2:] = False
        if not m.any():
            continue
        psi, psit = ref.values[k], new.values[k]
        safe = np.where(np.abs(psi) > 0, psi, 1.0)
        r = psit / safe
        rs = np.where(np.abs(r) > 0, r, 1.0)
        dphi = grad(r, grid) / rs
        lphi = laplacian(r, grid) / rs - dphi**2
        vq = params.hbar / (1j * params.mass) * grad(psi, grid) / safe
        phit = (result.phi[k + 1] - result.phi[k - 1]) / (2 * dt)
        R = phit + vq * dphi - c * lphi - c * dphi**2
        res.append(np.abs(R[m]))
    allr = np.concatenate(res) if res else np.array([np.inf])
    rho_t, rho = result.rho_tilde.values, np.abs(ref.values[0]) ** 2
    m0 = mask[0] & (rho_t > 0)
    target = 0.5 * np.log(rho_t[m0] / rho[m0])
    dev = float(np.max(np.abs(result.phi[0][m0] - target))) if m0.any() else 0.0
    return CollapseResidual(float(np.sqrt(np.mean(allr**2))), dev, int(allr.size))
