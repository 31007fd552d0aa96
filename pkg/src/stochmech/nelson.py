"""Drift fields of a wavefunction and Euler-Maruyama sampling of the Nelson diffusion."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .core import Grid1D, grad
from .errors import DriftBlowup, EmptyEnsemble, MissingArtifact

log = logging.getLogger(__name__)

NODE_FLOOR = 1e-10
DRIFT_CAP = 1e3
CHUNK = 4096
MAX_FLAGGED = 0.01
TIME_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class DriftField:
    """Drift symbols on a grid at one instant.

    Quantum fields carry all of v, u, b_plus, b_minus; a classical field may
    carry only ``b_plus``.
    """

    grid: Grid1D
    time: float
    b_plus: np.ndarray | None = None
    b_minus: np.ndarray | None = None
    v: np.ndarray | None = None
    u: np.ndarray | None = None

    def __post_init__(self):
        for name in ("b_plus", "b_minus", "v", "u"):
            a = getattr(self, name)
            if a is not None:
                a = np.array(a, dtype=float)
                if a.shape != (self.grid.n,):
                    raise ValueError(f"{name} does not match the grid")
                a.setflags(write=False)
                object.__setattr__(self, name, a)

    @classmethod
    def from_vu(cls, grid, time, v, u):
        v = np.asarray(v, dtype=float)
        u = np.asarray(u, dtype=float)
        return cls(grid, time, v + u, v - u, v, u)

    @property
    def v_q(self):
        return self.v - 1j * self.u


def drift_fields(psi, params, node_floor=NODE_FLOOR, drift_cap=DRIFT_CAP):
    """u = (hbar/m) Re(psi'/psi), v = (hbar/m) Im(psi'/psi), clipped to ``+-drift_cap``.

    Low-density regions (|psi|^2 below ``node_floor`` times its maximum) keep
    the plain ratio, so only the clip acts there; exact zeros of psi use a
    denominator of modulus sqrt(node_floor * max|psi|^2).
    """
    vals = psi.values
    denom = vals.copy()
    zero = vals == 0
    if zero.any():
        denom[zero] = np.sqrt(node_floor * np.max(np.abs(vals) ** 2))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        ratio = grad(vals, psi.grid) / denom
    ratio = np.where(np.isfinite(ratio), ratio, 0.0)
    scale = params.hbar / params.mass
    u = np.clip(scale * ratio.real, -drift_cap, drift_cap)
    v = np.clip(scale * ratio.imag, -drift_cap, drift_cap)
    return DriftField.from_vu(psi.grid, psi.time, v, u)


@dataclass(frozen=True, eq=False)
class DriftSeries:
    """Drift fields tabulated at ascending ``times``; interpolated linearly in x and t."""

    grid: Grid1D
    times: np.ndarray
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        if times.ndim != 1 or len(times) == 0 or np.any(np.diff(times) <= 0):
            raise ValueError("drift series times must be strictly increasing")
        data = {}
        for k, a in self.data.items():
            a = np.array(a, dtype=float)
            if a.shape != (len(times), self.grid.n):
                raise ValueError(f"component {k} has shape {a.shape}")
            a.setflags(write=False)
            data[k] = a
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_fields(cls, fields):
        fields = sorted(fields, key=lambda f: f.time)
        names = [n for n in ("b_plus", "b_minus", "v", "u") if getattr(fields[0], n) is not None]
        data = {n: np.stack([getattr(f, n) for f in fields]) for n in names}
        return cls(fields[0].grid, [f.time for f in fields], data)

    @classmethod
    def constant(cls, drift, t_start=0.0):
        """A time-independent series from a single DriftField."""
        return cls.from_fields([DriftField(drift.grid, t_start, drift.b_plus, drift.b_minus,
                                           drift.v, drift.u)])

    def __getitem__(self, name):
        return self.data[name]

    def field_at(self, k):
        g = lambda n: self.data[n][k] if n in self.data else None  # noqa: E731
        return DriftField(self.grid, self.times[k], g("b_plus"), g("b_minus"), g("v"), g("u"))

    def evaluate(self, name, x, t):
        """Interpolate component ``name`` at positions ``x`` and scalar time ``t``."""
        frames = self.data[name]
        j0, j1, w = kernels._time_weights(self.times, t)
        xs = self.grid.x
        f0 = np.interp(x, xs, frames[j0])
        if w == 0.0:
            return f0
        return f0 * (1 - w) + np.interp(x, xs, frames[j1]) * w

    def covers(self, t_start, t_end):
        if len(self.times) == 1:
            return True
        return (self.times[0] <= min(t_start, t_end) + TIME_EPS
                and self.times[-1] >= max(t_start, t_end) - TIME_EPS)


def drift_series(history, params, node_floor=NODE_FLOOR, drift_cap=DRIFT_CAP):
    """Drift fields of every frame of a WavefunctionHistory (ascending in time)."""
    fields = [drift_fields(history.frame(k), params, node_floor, drift_cap)
              for k in range(len(history))]
    return DriftSeries.from_fields(fields)


@dataclass(frozen=True, eq=False)
class TrajectoryEnsemble:
    """Recorded paths, stored time-major.

    ``positions[k, p]`` is path ``p`` at ``times[k]``; ``times`` runs in the
    direction of integration.  ``noise_increments[k, p]`` is the Wiener
    increment (w_plus for forward, w_minus for backward runs) accumulated
    between ``times[k]`` and ``times[k+1]``.
    """

    times: np.ndarray
    positions: np.ndarray
    direction: str
    noise_increments: np.ndarray | None = None
    seed: int | None = None
    dt: float | None = None
    flagged: np.ndarray | None = None

    def __post_init__(self):
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"direction must be forward/backward, got {self.direction!r}")
        times = np.array(self.times, dtype=float)
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[0] != len(times):
            raise ValueError("positions must have shape (n_times, n_paths)")
        d = np.diff(times)
        want = 1 if self.direction == "forward" else -1
        if len(d) and not np.all(np.sign(d) == want):
            raise ValueError("times must be strictly monotone in the direction of integration")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", pos)

    @property
    def n_paths(self):
        return self.positions.shape[1]

    @property
    def record_dt(self):
        """Spacing of the recorded times (the estimators' finite dt)."""
        if len(self.times) < 2:
            return 0.0
        return float(abs(self.times[1] - self.times[0]))

    def index_of(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-7 * max(1.0, abs(t)):
            raise KeyError(f"time {t} is not a recorded time")
        return k

    def at(self, t):
        return self.positions[self.index_of(t)]

    def has_time(self, t):
        try:
            self.index_of(t)
        except KeyError:
            return False
        return True

    def ascending(self):
        """``(times, positions)`` ordered by increasing time."""
        if self.direction == "forward":
            return self.times, self.positions
        return self.times[::-1], self.positions[::-1]

    def subset(self, paths):
        noise = None if self.noise_increments is None else self.noise_increments[:, paths]
        flagged = None if self.flagged is None else self.flagged[paths]
        return TrajectoryEnsemble(self.times, self.positions[:, paths], self.direction,
                                  noise, self.seed, self.dt, flagged)


def sample_inverse_cdf(rho, u):
    """Map uniforms ``u`` in [0, 1) through the inverse CDF of the piecewise-linear density."""
    cdf = rho.cdf()
    total = cdf[-1]
    y = np.asarray(u) * total
    i = np.clip(np.searchsorted(cdf, y, side="right") - 1, 0, rho.grid.n - 2)
    r = y - cdf[i]
    a = rho.values[i]
    b = rho.values[i + 1]
    h = rho.grid.dx
    disc = np.maximum(a * a + 2 * (b - a) * r / h, 0.0)
    denom = a + np.sqrt(disc)
    s = np.where(denom > 0, 2 * r / np.where(denom > 0, denom, 1.0), 0.5 * h)
    return rho.grid.x[i] + np.clip(s, 0.0, h)


def _chunk_rng(seed, chunk):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(chunk),)))


def _simulate(rho_start, drifts, component, params, n_paths, dt, seed, t_start, t_end,
              sign, record_stride, jobs):
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if component not in drifts.data:
        raise ValueError(f"drift series has no {component!r} component")
    if not drifts.covers(t_start, t_end):
        raise ValueError(f"drift fields do not cover [{min(t_start, t_end)}, {max(t_start, t_end)}]")
    span = abs(t_end - t_start)
    n_steps = max(1, int(np.ceil(span / dt - TIME_EPS)))
    dt_eff = span / n_steps
    stops = list(range(record_stride, n_steps, record_stride)) + [n_steps]
    times = np.array([t_start] + [t_start + sign * k * dt_eff for k in stops])
    times[-1] = t_end
    n_rec = len(times)
    positions = np.empty((n_rec, n_paths))
    noise = np.empty((n_rec - 1, n_paths))
    flagged = np.zeros(n_paths, dtype=bool)
    frames = np.ascontiguousarray(drifts[component])
    ftimes = np.ascontiguousarray(drifts.times)
    grid = drifts.grid
    sigma = params.sigma
    sq = np.sqrt(dt_eff)

    def run_chunk(c):
        lo, hi = c * CHUNK, min(n_paths, (c + 1) * CHUNK)
        rng = _chunk_rng(seed, c)
        x = sample_inverse_cdf(rho_start, rng.random(hi - lo))
        fl = np.zeros(hi - lo, dtype=bool)
        positions[0, lo:hi] = x
        prev = 0
        for r, stop in enumerate(stops):
            z = rng.standard_normal((stop - prev, hi - lo))
            t0 = t_start + sign * prev * dt_eff
            x, fl = kernels.em_block(x, fl, z, frames, ftimes, grid.x_min, grid.dx,
                                     t0, dt_eff, sign, sigma)
            positions[r + 1, lo:hi] = x
            noise[r, lo:hi] = z.sum(axis=0) * sq
            prev = stop
        flagged[lo:hi] = fl

    n_chunks = -(-n_paths // CHUNK)
    if jobs and jobs > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run_chunk, range(n_chunks)))
    else:
        for c in range(n_chunks):
            run_chunk(c)

    frac = flagged.mean()
    if frac > MAX_FLAGGED:
        raise DriftBlowup(f"{frac:.2%} of paths left the grid (limit {MAX_FLAGGED:.0%})")
    if frac > 0:
        log.warning("%d paths left the grid and were reflected", int(flagged.sum()))
    return times, positions, noise, flagged, dt_eff


def sample_forward(rho0, drifts, params, n_paths, dt, seed, t_start=None, t_end=None,
                   record_stride=1, jobs=1):
    """Euler-Maruyama for dx = b_plus dt + sigma dW, initial law ``rho0``.

    Paths are generated in fixed chunks of ``CHUNK`` paths, each with its own
    generator derived from ``(seed, chunk index)``, so the output does not
    depend on ``jobs``.
    """
    t_start = drifts.times[0] if t_start is None else t_start
    t_end = drifts.times[-1] if t_end is None else t_end
    if not t_end > t_start:
        raise ValueError("forward sampling needs t_end > t_start")
    times, pos, noise, flagged, dt_eff = _simulate(
        rho0, drifts, "b_plus", params, n_paths, dt, seed, t_start, t_end, 1.0,
        record_stride, jobs)
    return TrajectoryEnsemble(times, pos, "forward", noise, seed, dt_eff, flagged)


def sample_backward(rho1, drifts, params, n_paths, dt, seed, t_start=None, t_end=None,
                    record_stride=1, jobs=1):
    """Reverse-time Euler-Maruyama x(t-dt) = x(t) - b_minus dt + sigma dW from ``rho1`` at ``t_end``."""
    t_start = drifts.times[0] if t_start is None else t_start
    t_end = drifts.times[-1] if t_end is None else t_end
    if not t_end > t_start:
        raise ValueError("backward sampling needs t_end > t_start")
    times, pos, noise, flagged, dt_eff = _simulate(
        rho1, drifts, "b_minus", params, n_paths, dt, seed, t_end, t_start, -1.0,
        record_stride, jobs)
    return TrajectoryEnsemble(times, pos, "backward", noise, seed, dt_eff, flagged)


def wiener_check(ens, rel_tol=0.05, mean_sigmas=5.0):
    """Mean/variance sanity of the recorded increments; returns a dict of results."""
    if ens.noise_increments is None or ens.noise_increments.size == 0:
        raise EmptyEnsemble("ensemble carries no noise increments")
    dts = np.abs(np.diff(ens.times))[:, None]
    z = ens.noise_increments / np.sqrt(dts)
    mean = float(z.mean())
    var_ratio = float(z.var())
    bound = mean_sigmas / np.sqrt(z.size)
    return {"mean": mean, "mean_bound": bound, "variance_ratio": var_ratio,
            "passed": abs(mean) <= bound and abs(var_ratio - 1) <= rel_tol}


# -- export -------------------------------------------------------------------

def write_ensemble(directory, ens, name="ensemble", times=None, paths=None):
    """CSV ``path,t,x`` (optionally restricted to ``times``/``paths``) plus JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ks = range(len(ens.times)) if times is None else [ens.index_of(t) for t in times]
    ks = sorted(set(ks))
    pidx = np.arange(ens.n_paths) if paths is None else np.asarray(paths)
    # repr is the shortest string that round-trips a float64 exactly
    plist = pidx.tolist()
    parts = ["path,t,x"]
    for k in ks:
        ts = repr(float(ens.times[k]))
        xs = ens.positions[k, pidx].tolist()
        parts.append("\n".join([f"{p},{ts},{v!r}" for p, v in zip(plist, xs)]))
    csv = directory / f"{name}.csv"
    csv.write_text("\n".join(parts) + "\n")
    manifest = {"seed": ens.seed, "dt": ens.dt, "n_paths": int(len(pidx)),
                "direction": ens.direction, "times": [float(ens.times[k]) for k in ks],
                "csv": csv.name}
    mpath = directory / f"{name}.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


def read_ensemble(manifest_path):
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingArtifact(manifest_path)
    meta = json.loads(manifest_path.read_text())
    csv = manifest_path.parent / meta["csv"]
    if not csv.exists():
        raise MissingArtifact(csv)
    data = np.loadtxt(csv, delimiter=",", skiprows=1, ndmin=2)
    times = np.array(meta["times"])
    n = meta["n_paths"]
    pos = data[:, 2].reshape(len(times), n)
    return TrajectoryEnsemble(times, pos, meta["direction"], None, meta["seed"], meta["dt"])
