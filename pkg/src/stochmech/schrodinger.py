"""Crank-Nicolson propagation of the 1-D Schroedinger equation.

    dpsi/dt = (i hbar / 2m) psi'' - (i / hbar) V psi

The discrete Hamiltonian is the three-point stencil with zero ghost values
(Dirichlet) or wrap-around (periodic); the Cayley form of the step is unitary
in the plain l2 inner product, so the norm is preserved to roundoff.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import kernels
from .core import PhysicalParams, Wavefunction, read_wavefunction, trapezoid, write_wavefunction
from .errors import LinearSolveFailure, MissingArtifact

DT_MAX = 1e-2
NORM_STEP_TOL = 1e-10
TIME_EPS = 1e-9


def hamiltonian_bands(grid, V, params):
    """Diagonal and off-diagonal of the discrete Hamiltonian."""
    kin = params.hbar**2 / (2 * params.mass * grid.dx**2)
    diag = 2 * kin + np.asarray(V.values, dtype=float)
    off = -kin
    return diag, off


def apply_hamiltonian(values, grid, V, params):
    diag, off = hamiltonian_bands(grid, V, params)
    out = diag * values
    if grid.periodic_bc:
        out = out + off * (np.roll(values, 1) + np.roll(values, -1))
    else:
        out[1:] += off * values[:-1]
        out[:-1] += off * values[1:]
    return out


def energy(psi, V, params):
    """``<psi|H|psi>`` with the same discrete Hamiltonian the solver uses."""
    hpsi = apply_hamiltonian(psi.values, psi.grid, V, params)
    return float(np.real(trapezoid(np.conj(psi.values) * hpsi, psi.grid)))


class CrankNicolson:
    """One-step propagator for fixed (grid, V, params, dt)."""

    def __init__(self, grid, V, params, dt):
        if dt == 0:
            raise ValueError("dt must be nonzero")
        self.grid, self.V, self.params, self.dt = grid, V, params, float(dt)
        diag, off = hamiltonian_bands(grid, V, params)
        c = 0.5j * self.dt / params.hbar
        n = grid.n
        self._lhs_diag = 1 + c * diag
        self._rhs_diag = 1 - c * diag
        self._lhs_off = np.full(n, c * off, dtype=complex)
        self._rhs_off = -c * off
        self._lu = None
        if grid.periodic_bc:
            m = sp.diags([self._lhs_off[:-1], self._lhs_diag, self._lhs_off[:-1]],
                         [-1, 0, 1], shape=(n, n), format="lil", dtype=complex)
            m[0, n - 1] = m[n - 1, 0] = c * off
            self._lu = splu(m.tocsc())

    def __call__(self, values):
        v = np.asarray(values, dtype=complex)
        rhs = self._rhs_diag * v
        if self.grid.periodic_bc:
            rhs = rhs + self._rhs_off * (np.roll(v, 1) + np.roll(v, -1))
            out = self._lu.solve(rhs)
            if not np.all(np.isfinite(out)):
                raise LinearSolveFailure("periodic Crank-Nicolson solve failed")
        else:
            rhs[1:] += self._rhs_off * v[:-1]
            rhs[:-1] += self._rhs_off * v[1:]
            out = kernels.solve_tridiagonal(self._lhs_off, self._lhs_diag, self._lhs_off, rhs)
        n0 = np.vdot(v, v).real
        n1 = np.vdot(out, out).real
        if n0 > 0 and abs(n1 - n0) > NORM_STEP_TOL * n0:
            raise LinearSolveFailure(f"step changed the l2 norm by {abs(n1 - n0) / n0:.3e}")
        return out


def _check_dt(dt, dt_max):
    if not np.isfinite(dt) or dt == 0:
        raise ValueError(f"dt must be finite and nonzero, got {dt!r}")
    if abs(dt) > dt_max * (1 + 1e-12):
        raise ValueError(f"|dt|={abs(dt)} exceeds dt_max={dt_max}")


def step(psi, V, dt, params=None, dt_max=DT_MAX):
    """Single Crank-Nicolson step of size ``dt`` (negative dt steps backward)."""
    params = params or PhysicalParams()
    _check_dt(dt, dt_max)
    out = CrankNicolson(psi.grid, V, params, dt)(psi.values)
    return Wavefunction(psi.grid, out, psi.time + dt)


@dataclass(frozen=True, eq=False)
class WavefunctionHistory:
    """Checkpointed frames ``values[k]`` of one solution at ``times[k]``."""

    grid: object
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        vals = np.array(self.values, dtype=complex)
        if vals.shape != (len(times), self.grid.n):
            raise ValueError("frames do not match times/grid")
        d = np.diff(times)
        if len(d) and not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("history times must be strictly monotone")
        times.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.times)

    def frame(self, k):
        return Wavefunction(self.grid, self.values[k], self.times[k])

    @property
    def frames(self):
        return [self.frame(k) for k in range(len(self))]

    def densities(self):
        return np.abs(self.values) ** 2

    def norms(self):
        return np.sqrt(trapezoid(self.densities(), self.grid))

    def index_of(self, t, tol=TIME_EPS):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > tol * max(1.0, abs(t)):
            raise KeyError(f"no frame at t={t}")
        return k

    def at(self, t):
        return self.frame(self.index_of(t))

    def every(self, stride):
        """Every ``stride``-th frame, always keeping the last one."""
        ks = list(range(0, len(self), stride))
        if ks[-1] != len(self) - 1:
            ks.append(len(self) - 1)
        return WavefunctionHistory(self.grid, self.times[ks], self.values[ks])

    def restrict(self, t_start, t_end):
        lo, hi = sorted((t_start, t_end))
        m = (self.times >= lo - TIME_EPS) & (self.times <= hi + TIME_EPS)
        return WavefunctionHistory(self.grid, self.times[m], self.values[m])


def _schedule(t0, t1, dt):
    """Step sizes taking t0 to t1 with the last step shortened."""
    span = t1 - t0
    n_full = int(np.floor(span / dt + TIME_EPS))
    rem = span - n_full * dt
    if abs(rem) <= TIME_EPS * max(1.0, abs(dt)):
        rem = 0.0
    return n_full, rem


def propagate(psi0, V, t0, t1, dt, checkpoint_stride=1, params=None, dt_max=DT_MAX):
    """Repeated CN steps from ``t0`` to ``t1``, keeping every ``checkpoint_stride``-th frame.

    Backward propagation is requested with ``t1 < t0`` and ``dt < 0``.
    Frame times are ``t0 + k dt`` (no accumulated roundoff) and the final
    frame is always at ``t1``.
    """
    params = params or PhysicalParams()
    if t1 == t0:
        return WavefunctionHistory(psi0.grid, [t0], [psi0.values])
    if np.sign(t1 - t0) != np.sign(dt):
        raise ValueError("dt must point from t0 towards t1")
    _check_dt(dt, dt_max)
    if checkpoint_stride < 1:
        raise ValueError("checkpoint_stride must be >= 1")
    n_full, rem = _schedule(t0, t1, dt)
    prop = CrankNicolson(psi0.grid, V, params, dt)
    v = np.array(psi0.values, dtype=complex)
    times, frames = [t0], [v.copy()]
    for k in range(1, n_full + 1):
        v = prop(v)
        if k % checkpoint_stride == 0 or (k == n_full and rem == 0.0):
            times.append(t0 + k * dt)
            frames.append(v.copy())
    if rem != 0.0:
        v = CrankNicolson(psi0.grid, V, params, rem)(v)
        times.append(t1)
        frames.append(v.copy())
    times[-1] = t1
    return WavefunctionHistory(psi0.grid, times, frames)


# -- export -------------------------------------------------------------------

def write_history(directory, history, params, prefix="frame"):
    """One CSV (+ JSON sidecar) per frame and a ``<prefix>_manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for k in range(len(history)):
        name = f"{prefix}_{k:05d}.csv"
        write_wavefunction(directory / name, history.frame(k), params)
        files.append(name)
    manifest = {"times": [float(t) for t in history.times], "files": files,
                "grid": history.grid.to_dict(), "hbar": params.hbar, "mass": params.mass}
    path = directory / f"{prefix}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_history(manifest_path):
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingArtifact(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    frames, params, grid = [], None, None
    for name in manifest["files"]:
        p = manifest_path.parent / name
        if not p.exists() or not p.with_suffix(".json").exists():
            raise MissingArtifact(p if not p.exists() else p.with_suffix(".json"))
        psi, params = read_wavefunction(p)
        grid = grid or psi.grid
        frames.append(psi.values)
    return WavefunctionHistory(grid, manifest["times"], frames), params
