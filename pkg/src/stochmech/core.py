"""Physical parameters, the 1-D grid, field containers and discrete calculus.

Everything here is immutable after construction: arrays handed to the
containers are copied and flagged read-only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import StochMechError, ZeroNorm

ZERO_NORM_FLOOR = 1e-300
DENSITY_TOL = 1e-8


class InvalidDensity(StochMechError, ValueError):
    pass


def _frozen(a, dtype):
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PhysicalParams:
    """Planck constant and mass in natural units; ``sigma_sq = hbar/mass``."""

    hbar: float = 1.0
    mass: float = 1.0
    sigma_sq: float = field(init=False)

    def __post_init__(self):
        for name in ("hbar", "mass"):
            val = getattr(self, name)
            if not np.isfinite(val) or val <= 0:
                raise ValueError(f"{name} must be finite and > 0, got {val!r}")
        object.__setattr__(self, "sigma_sq", self.hbar / self.mass)

    @property
    def sigma(self):
        return float(np.sqrt(self.sigma_sq))


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    x_max: float
    n: int
    boundary: str = "dirichlet"

    def __post_init__(self):
        if self.boundary not in ("dirichlet", "periodic"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if int(self.n) != self.n or self.n < 8:
            raise ValueError(f"n must be an integer >= 8, got {self.n!r}")
        if not self.x_min < self.x_max:
            raise ValueError("x_min must be < x_max")
        object.__setattr__(self, "n", int(self.n))

    @classmethod
    def periodic(cls, x_start, length, n):
        """Periodic grid of ``n`` nodes covering ``[x_start, x_start + length)``."""
        dx = length / n
        return cls(x_start, x_start + length - dx, n, "periodic")

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (self.n - 1)

    @cached_property
    def x(self):
        return _frozen(np.linspace(self.x_min, self.x_max, self.n), float)

    @property
    def periodic_bc(self):
        return self.boundary == "periodic"

    @cached_property
    def weights(self):
        """Quadrature weights (trapezoid; plain sum for periodic grids)."""
        w = np.full(self.n, self.dx)
        if not self.periodic_bc:
            w[0] = w[-1] = 0.5 * self.dx
        return _frozen(w, float)

    def to_dict(self):
        return {"x_min": self.x_min, "x_max": self.x_max, "n": self.n,
                "boundary": self.boundary}


def trapezoid(values, grid):
    """Quadrature of nodal ``values`` over ``grid``; works along the last axis."""
    return np.asarray(values) @ grid.weights


def grad(f, grid):
    """Second-order first derivative.

    Central differences in the interior; one-sided second-order stencils at
    Dirichlet edges, wrap-around for periodic grids.
    """
    f = np.asarray(f)
    dx = grid.dx
    if grid.periodic_bc:
        return (np.roll(f, -1, axis=-1) - np.roll(f, 1, axis=-1)) / (2 * dx)
    g = np.empty_like(f, dtype=np.result_type(f, float))
    g[..., 1:-1] = (f[..., 2:] - f[..., :-2]) / (2 * dx)
    # edge stencils written in differences so constants give exactly zero
    g[..., 0] = (4 * (f[..., 1] - f[..., 0]) - (f[..., 2] - f[..., 0])) / (2 * dx)
    g[..., -1] = ((f[..., -3] - f[..., -1]) - 4 * (f[..., -2] - f[..., -1])) / (2 * dx)
    return g


def laplacian(f, grid):
    """Second derivative, same boundary treatment as :func:`grad`."""
    f = np.asarray(f)
    inv = 1.0 / grid.dx**2
    if grid.periodic_bc:
        return (np.roll(f, -1, axis=-1) - 2 * f + np.roll(f, 1, axis=-1)) * inv
    g = np.empty_like(f, dtype=np.result_type(f, float))
    g[..., 1:-1] = (f[..., 2:] - 2 * f[..., 1:-1] + f[..., :-2]) * inv
    d0 = [f[..., k] - f[..., 0] for k in (1, 2, 3)]
    d1 = [f[..., -1 - k] - f[..., -1] for k in (1, 2, 3)]
    g[..., 0] = (-5 * d0[0] + 4 * d0[1] - d0[2]) * inv
    g[..., -1] = (-5 * d1[0] + 4 * d1[1] - d1[2]) * inv
    return g


@dataclass(frozen=True, eq=False)
class Wavefunction:
    grid: Grid1D
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        vals = _frozen(self.values, complex)
        if vals.shape != (self.grid.n,):
            raise ValueError(f"values shape {vals.shape} does not match grid n={self.grid.n}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("wavefunction values must be finite")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "time", float(self.time))

    @property
    def norm(self):
        return float(np.sqrt(trapezoid(np.abs(self.values) ** 2, self.grid)))

    def is_normalized(self, tol=DENSITY_TOL):
        return abs(self.norm - 1.0) <= tol

    def with_values(self, values, time=None):
        return Wavefunction(self.grid, values, self.time if time is None else time)


@dataclass(frozen=True, eq=False)
class Density:
    grid: Grid1D
    values: np.ndarray
    time: float = 0.0
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        vals = _frozen(self.values, float)
        if vals.shape != (self.grid.n,):
            raise ValueError(f"values shape {vals.shape} does not match grid n={self.grid.n}")
        if self.validate:
            if not np.all(np.isfinite(vals)) or np.any(vals < 0):
                raise InvalidDensity("density values must be finite and >= 0")
            mass = trapezoid(vals, self.grid)
            if abs(mass - 1.0) > DENSITY_TOL:
                raise InvalidDensity(f"density integrates to {mass:.12g}, expected 1")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "time", float(self.time))

    @property
    def mass(self):
        return float(trapezoid(self.values, self.grid))

    def moment(self, k):
        return float(trapezoid(self.values * self.grid.x**k, self.grid))

    @property
    def mean(self):
        return self.moment(1)

    @property
    def variance(self):
        m = self.mean
        return float(trapezoid(self.values * (self.grid.x - m) ** 2, self.grid))

    def cdf(self):
        """Cumulative distribution at the nodes (piecewise-linear density)."""
        v = self.values
        cells = 0.5 * (v[1:] + v[:-1]) * self.grid.dx
        return np.concatenate([[0.0], np.cumsum(cells)])


@dataclass(frozen=True, eq=False)
class ScalarPotential:
    """Potential tabulated on a grid; ``kind`` and ``params`` record its origin."""

    grid: Grid1D
    values: np.ndarray
    kind: str = "tabulated"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = _frozen(self.values, float)
        if vals.shape != (self.grid.n,):
            raise ValueError("potential values do not match the grid")
        if not np.all(np.isfinite(vals)):
            raise ValueError("potential must be finite at every node")
        object.__setattr__(self, "values", vals)

    @classmethod
    def free(cls, grid):
        return cls(grid, np.zeros(grid.n), "free")

    @classmethod
    def harmonic(cls, grid, omega=1.0, mass=1.0, center=0.0):
        v = 0.5 * mass * omega**2 * (grid.x - center) ** 2
        return cls(grid, v, "harmonic", {"omega": omega, "mass": mass, "center": center})

    @classmethod
    def double_well(cls, grid, a=1.0, b=1.0):
        """``V(x) = a x^4 - b x^2``."""
        x = grid.x
        return cls(grid, a * x**4 - b * x**2, "double_well", {"a": a, "b": b})

    @classmethod
    def tabulated(cls, grid, values):
        return cls(grid, values, "tabulated")

    def shifted(self, offset):
        return ScalarPotential(self.grid, self.values + offset, "tabulated",
                               {"base": self.kind, "offset": offset})


def normalize(psi):
    """Rescale ``psi`` to unit quadrature norm."""
    nrm = psi.norm
    if not nrm >= ZERO_NORM_FLOOR:
        raise ZeroNorm(f"wavefunction norm {nrm!r} is below {ZERO_NORM_FLOOR}")
    return psi.with_values(psi.values / nrm)


def born_density(psi):
    """``|psi|^2`` as a validated Density (raises if psi is not normalized)."""
    return Density(psi.grid, np.abs(psi.values) ** 2, psi.time)


def gaussian_wavefunction(grid, center=0.0, s0_sq=0.5, k0=0.0, time=0.0):
    """Normalized Gaussian packet with position variance ``s0_sq`` and wavenumber ``k0``."""
    x = grid.x
    amp = (2 * np.pi * s0_sq) ** -0.25 * np.exp(-((x - center) ** 2) / (4 * s0_sq))
    return normalize(Wavefunction(grid, amp * np.exp(1j * k0 * x), time))


def harmonic_ground_state(grid, params, omega=1.0, time=0.0):
    """Closed-form ground state of ``V = m omega^2 x^2 / 2``."""
    s0_sq = params.hbar / (2 * params.mass * omega)
    return gaussian_wavefunction(grid, 0.0, s0_sq, 0.0, time)


# -- serialization ----------------------------------------------------------

def _fmt(a):
    return np.char.mod("%.17g", np.asarray(a, dtype=float))


def _write_columns(path, header, cols):
    rows = np.stack([_fmt(c) for c in cols], axis=1)
    lines = [",".join(r) for r in rows]
    Path(path).write_text(header + "\n" + "\n".join(lines) + "\n")


def _read_columns(path, expected):
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    if header != expected:
        raise ValueError(f"{path}: expected header {','.join(expected)}, got {','.join(header)}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return [data[:, i] for i in range(len(expected))]


def _sidecar(path):
    return Path(path).with_suffix(".json")


def _grid_from_x(x, boundary):
    return Grid1D(float(x[0]), float(x[-1]), len(x), boundary)


def write_wavefunction(path, psi, params):
    x = psi.grid.x
    _write_columns(path, "x,re,im", [x, psi.values.real, psi.values.imag])
    meta = {"hbar": params.hbar, "mass": params.mass, "time": psi.time,
            "boundary": psi.grid.boundary}
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_wavefunction(path):
    """Returns ``(Wavefunction, PhysicalParams)``."""
    x, re, im = _read_columns(path, ["x", "re", "im"])
    meta = json.loads(_sidecar(path).read_text())
    grid = _grid_from_x(x, meta["boundary"])
    return (Wavefunction(grid, re + 1j * im, meta["time"]),
            PhysicalParams(meta["hbar"], meta["mass"]))


def write_density(path, rho, params=None):
    _write_columns(path, "x,rho", [rho.grid.x, rho.values])
    meta = {"time": rho.time, "boundary": rho.grid.boundary}
    if params is not None:
        meta.update(hbar=params.hbar, mass=params.mass)
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_density(path, validate=True):
    x, rho = _read_columns(path, ["x", "rho"])
    side = _sidecar(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    grid = _grid_from_x(x, meta.get("boundary", "dirichlet"))
    return Density(grid, rho, meta.get("time", 0.0), validate=validate)
