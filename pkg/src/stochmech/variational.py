"""Checks on the variational side of the quantum construction: the complex
Hamilton-Jacobi equation for S_q = (hbar/i) log psi, the complex action with
Lagrangian m v_q^2/2 - V, and the zero-mean Lagrange functional."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import testfunctions
from .core import grad, laplacian, trapezoid
from .errors import InconsistentEnsemble, InsufficientData
from .estimators import CORE_FRACTION, bin_statistics, default_edges
from .measurement import core_mask
from .nelson import DriftSeries


def _equal_spacing(times):
    dts = np.diff(times)
    if len(dts) < 2:
        raise ValueError("need at least 3 frames")
    if not np.allclose(dts, dts[0], rtol=1e-9, atol=0):
        raise ValueError("frames must be equally spaced")
    return dts[0]


def _safe(a):
    return np.where(np.abs(a) > 0, a, 1.0)


def hj_residual(history, V, params, core_fraction=CORE_FRACTION):
    """RMS over the core of dS/dt + |grad S|^2/2m + V - (i hbar/2m) lap S.

    Every term is built from psi_t/psi, psi'/psi and psi''/psi, so no
    logarithm (and no phase branch) is ever taken.  psi_t is a central
    difference between neighbouring frames.
    """
    dt = _equal_spacing(history.times)
    grid = history.grid
    hb, m = params.hbar, params.mass
    vals = history.values
    mask = core_mask(np.abs(vals) ** 2, fraction=core_fraction)
    Vv = V.values
    res = []
    for k in range(1, len(vals) - 1):
        sel = mask[k].copy()
        sel[:2] = sel[-2:] = False
        if not sel.any():
            continue
        psi = _safe(vals[k])
        r1 = grad(vals[k], grid) / psi
        r2 = laplacian(vals[k], grid) / psi
        rt = (vals[k + 1] - vals[k - 1]) / (2 * dt) / psi
        S_t = hb / 1j * rt
        S_x = hb / 1j * r1
        S_xx = hb / 1j * (r2 - r1**2)
        R = S_t + S_x**2 / (2 * m) + Vv - 1j * hb / (2 * m) * S_xx
        res.append(np.abs(R[sel]))
    allr = np.concatenate(res)
    return float(np.sqrt(np.mean(allr**2)))


def quantum_action_phase(psi):
    """(1/i) log psi per node with the phase unwrapped along x; times hbar gives S_q."""
    v = _safe(psi)
    return -1j * (np.log(np.abs(v)) + 1j * np.unwrap(np.angle(v)))


@dataclass(frozen=True)
class ActionReport:
    value: complex
    kinetic: complex
    potential: float
    boundary: complex
    scenario: str = ""

    def as_dict(self):
        c = lambda z: [float(np.real(z)), float(np.imag(z))]  # noqa: E731
        return {"value": c(self.value), "kinetic": c(self.kinetic),
                "potential": float(self.potential), "boundary": c(self.boundary),
                "scenario": self.scenario}


def action_value(history, V, params, S0=None, scenario=""):
    """Quadrature of int int [m v_q^2/2 - V] rho dx dt + int S0 rho(t0) dx.

    ``S0`` defaults to (hbar/i) log psi(t0).  rho v_q^2 is evaluated as
    -(hbar^2/m^2) conj(psi) psi'^2 / psi, which stays finite at nodes.
    """
    grid = history.grid
    hb, m = params.hbar, params.mass
    vals = history.values
    times = history.times
    psi = _safe(vals)
    dpsi = grad(vals, grid)
    # rho * v_q^2 with v_q = (hbar / i m) psi'/psi
    rv2 = -(hb / m) ** 2 * np.conj(vals) * dpsi**2 / psi
    rv2 = np.where(np.abs(vals) > 0, rv2, 0.0)
    rho = np.abs(vals) ** 2
    kin_t = trapezoid(0.5 * m * rv2, grid)
    pot_t = trapezoid(V.values * rho, grid)
    if len(times) > 1:
        kinetic = complex(np.trapezoid(kin_t, times))
        potential = -float(np.trapezoid(pot_t, times))
    else:
        kinetic, potential = 0j, 0.0
    if S0 is None:
        S0 = hb * quantum_action_phase(vals[0])
    boundary = complex(trapezoid(np.asarray(S0) * rho[0], grid))
    return ActionReport(kinetic + potential + boundary, kinetic, potential, boundary, scenario)


@dataclass(frozen=True)
class LagrangeValue:
    value: complex
    stderr_real: float
    stderr_imag: float
    osmotic_quadrature: complex
    name: str = ""

    @property
    def z_scores(self):
        def z(v, se):
            if se > 0:
                return abs(v) / se
            return 0.0 if v == 0 else np.inf
        return z(self.value.real, self.stderr_real), z(self.value.imag, self.stderr_imag)

    def within(self, k):
        """True when both real and imaginary parts lie within k standard errors of 0."""
        zr, zi = self.z_scores
        return zr <= k and zi <= k

    def as_dict(self):
        return {"name": self.name, "real": self.value.real, "imag": self.value.imag,
                "stderr_real": self.stderr_real, "stderr_imag": self.stderr_imag,
                "osmotic_quadrature": [self.osmotic_quadrature.real, self.osmotic_quadrature.imag]}


def _callable(f, name):
    if isinstance(f, DriftSeries):
        return lambda x, t: f.evaluate(name, x, t)
    return f


def consistency_zscore(ens, b_plus, n_bins=64, core_fraction=CORE_FRACTION):
    """Weighted mean of (binned forward drift - b_plus) over core bins of all
    recorded times, in units of its standard error."""
    times, pos = ens.ascending()
    num = den = 0.0
    for k in range(len(times) - 1):
        x, xn = pos[k], pos[k + 1]
        h = times[k + 1] - times[k]
        edges = default_edges(x, n_bins)
        counts, mean, se = bin_statistics(x, (xn - x) / h, edges)
        centers = 0.5 * (edges[1:] + edges[:-1])
        core = counts > core_fraction * counts.max()
        core &= se > 0
        if not core.any():
            continue
        w = 1.0 / se[core] ** 2
        num += (w * (mean[core] - b_plus(centers[core], times[k]))).sum()
        den += w.sum()
    if den == 0:
        raise InsufficientData("no populated bins for the consistency check")
    return float(num / den * np.sqrt(den))


def lagrange_functional_value(ens, drifts, test, params, density=None, check=True,
                              max_z=5.0, name=None):
    """Monte Carlo estimate of
        E{ phi(x(t2)) - phi(x(t1)) + int [-v_q phi' + (i hbar/2m) phi''] dt }
    with v_q = v - i u, on a forward ensemble of the process with drifts v, u.

    ``drifts`` is a DriftSeries with components v and u (or a pair of
    callables ``(v, u)``).  ``test`` names an entry of the test-function bank.
    ``density`` (optional history with ``grid``, ``times`` and ``densities()``)
    adds the quadrature value of E[u phi' + (sigma^2/2) phi''] for comparison.
    """
    if ens.direction != "forward":
        raise ValueError("the Lagrange functional is estimated on a forward ensemble")
    tf = testfunctions.get(test) if isinstance(test, str) else test
    if isinstance(drifts, DriftSeries):
        v_fn, u_fn = _callable(drifts, "v"), _callable(drifts, "u")
    else:
        v_fn, u_fn = drifts
    half_s2 = 0.5 * params.sigma_sq
    if check:
        z = consistency_zscore(ens, lambda x, t: v_fn(x, t) + u_fn(x, t))
        if abs(z) > max_z:
            raise InconsistentEnsemble(f"ensemble drift differs from v + u by {z:.1f} standard errors")
    times, pos = ens.times, ens.positions
    re_int = np.empty_like(pos, dtype=complex)
    im_int = np.empty_like(pos, dtype=complex)
    for k, t in enumerate(times):
        x = pos[k]
        d1, d2 = tf.df(x), tf.d2f(x)
        re_int[k] = -v_fn(x, t) * d1
        im_int[k] = u_fn(x, t) * d1 + half_s2 * d2
    h = np.diff(times)[:, None]
    trap = lambda a: (0.5 * (a[1:] + a[:-1]) * h).sum(axis=0)  # noqa: E731
    y = tf.f(pos[-1]) - tf.f(pos[0]) + trap(re_int) + 1j * trap(im_int)
    y = np.asarray(y, dtype=complex)
    n = y.size
    se_re = float(y.real.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    se_im = float(y.imag.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    quad = 0j
    if density is not None:
        g = density.grid
        rho = density.densities() if hasattr(density, "densities") else density.values
        vals = []
        for k, t in enumerate(density.times):
            f = (u_fn(g.x, t) * tf.df(g.x) + half_s2 * tf.d2f(g.x)) * rho[k]
            vals.append(trapezoid(f, g))
        quad = complex(np.trapezoid(np.asarray(vals), density.times)) if len(vals) > 1 else 0j
    return LagrangeValue(complex(y.mean()), se_re, se_im, quad, name or tf.name)
