import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochmech.core import (Density, Grid1D, InvalidDensity, PhysicalParams, ScalarPotential,
                            Wavefunction, born_density, gaussian_wavefunction, grad,
                            harmonic_ground_state, laplacian, normalize, read_density,
                            read_wavefunction, trapezoid, write_density, write_wavefunction)
from stochmech.errors import ZeroNorm

finite = st.floats(-5, 5, allow_nan=False)


def test_sigma_sq_is_derived():
    p = PhysicalParams(hbar=0.3, mass=1.7)
    assert p.sigma_sq == 0.3 / 1.7
    with pytest.raises(Exception):
        p.sigma_sq = 2.0


@pytest.mark.parametrize("hbar,mass", [(0.0, 1.0), (1.0, -1.0), (np.inf, 1.0), (1.0, np.nan)])
def test_params_must_be_positive(hbar, mass):
    with pytest.raises(ValueError):
        PhysicalParams(hbar, mass)


def test_grid_spacing_and_validation():
    g = Grid1D(-1.0, 1.0, 201)
    assert g.dx == pytest.approx(0.01)
    assert np.allclose(np.diff(g.x), g.dx)
    with pytest.raises(ValueError):
        Grid1D(1.0, -1.0, 100)
    with pytest.raises(ValueError):
        Grid1D(0.0, 1.0, 7)
    with pytest.raises(ValueError):
        Grid1D(0.0, 1.0, 10, "neumann")


def test_periodic_grid_excludes_endpoint():
    g = Grid1D.periodic(0.0, 2 * np.pi, 256)
    assert g.dx == pytest.approx(2 * np.pi / 256)
    assert g.x[-1] < 2 * np.pi
    assert trapezoid(np.ones(g.n), g) == pytest.approx(2 * np.pi)


def test_containers_are_read_only(grid, ground):
    with pytest.raises(ValueError):
        ground.values[0] = 1.0
    with pytest.raises(ValueError):
        grid.x[0] = 0.0


def test_normalize_scaling(grid):
    g = gaussian_wavefunction(grid, 0.3, 0.7, 1.1)
    out = normalize(g.with_values(2 * g.values))
    assert np.max(np.abs(out.values - g.values)) < 1e-12


def test_normalize_idempotent(ground):
    out = normalize(ground)
    assert np.max(np.abs(out.values - ground.values)) < 1e-12
    assert abs(out.norm - 1) < 1e-12


def test_normalize_zero(grid):
    with pytest.raises(ZeroNorm):
        normalize(Wavefunction(grid, np.zeros(grid.n)))


@given(scale=st.floats(1e-3, 1e3), center=st.floats(-2, 2), s0=st.floats(0.2, 2.0),
       k0=st.floats(-3, 3))
def test_born_of_normalized_integrates_to_one(scale, center, s0, k0):
    grid = Grid1D(-12.0, 12.0, 600)
    x = grid.x
    psi = Wavefunction(grid, scale * np.exp(-(x - center) ** 2 / (4 * s0) + 1j * k0 * x))
    rho = born_density(normalize(psi))
    assert abs(rho.mass - 1) <= 1e-8
    assert np.all(rho.values >= 0)


def test_born_ground_state(grid, ground):
    rho = born_density(ground)
    exact = np.exp(-grid.x**2) / np.sqrt(np.pi)
    # closed form agrees up to the quadrature normalization of the sampled Gaussian
    assert np.max(np.abs(rho.values - exact)) < 1e-10
    assert abs(trapezoid(exact, grid) - 1) < 1e-10


@given(theta_k=finite)
def test_born_discards_phase(theta_k):
    grid = Grid1D(-10.0, 10.0, 300)
    base = gaussian_wavefunction(grid)
    psi = base.with_values(base.values * np.exp(1j * (theta_k * grid.x + np.sin(grid.x))))
    assert np.allclose(born_density(psi).values, born_density(base).values, rtol=1e-14, atol=0)


def test_born_rejects_unnormalized(ground):
    with pytest.raises(InvalidDensity):
        born_density(ground.with_values(1.5 * ground.values))


def test_density_validation(grid):
    with pytest.raises(InvalidDensity):
        Density(grid, -np.ones(grid.n))
    with pytest.raises(InvalidDensity):
        Density(grid, np.ones(grid.n))


def test_grad_linear_exact(grid):
    g = grad(grid.x, grid)
    assert np.max(np.abs(g - 1)) < 1e-12


def test_grad_constant(grid):
    assert np.all(grad(np.full(grid.n, 3.7), grid) == 0)
    assert np.all(laplacian(np.full(grid.n, -1.3), grid) == 0)


def test_grad_periodic_sin():
    g = Grid1D.periodic(0.0, 2 * np.pi, 256)
    assert np.max(np.abs(grad(np.sin(g.x), g) - np.cos(g.x))) < 1e-3


def test_grad_second_order():
    errs = []
    for n in (64, 128, 256):
        g = Grid1D.periodic(0.0, 2 * np.pi, n)
        errs.append(np.max(np.abs(grad(np.sin(g.x), g) - np.cos(g.x))))
    assert errs[0] / errs[1] >= 3.5 and errs[1] / errs[2] >= 3.5


def test_grad_dirichlet_edges_second_order():
    errs = []
    for n in (101, 201, 401):
        g = Grid1D(0.0, 2.0, n)
        errs.append(np.max(np.abs(grad(np.exp(g.x), g) - np.exp(g.x))))
    assert errs[0] / errs[1] >= 3.5 and errs[1] / errs[2] >= 3.5


@given(a=finite, c1=finite, c2=finite)
def test_grad_is_linear(a, c1, c2):
    g = Grid1D(-3.0, 3.0, 64)
    f = np.sin(c1 * g.x) + 1j * g.x**2
    h = np.cos(c2 * g.x)
    lhs = grad(a * f + h, g)
    rhs = a * grad(f, g) + grad(h, g)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12 * (1 + abs(a)) / g.dx * 10)


def test_laplacian_quadratic():
    g = Grid1D(-2.0, 2.0, 41)
    assert np.allclose(laplacian(g.x**2, g), 2.0, atol=1e-9)


def test_potentials(grid):
    h = ScalarPotential.harmonic(grid, omega=2.0)
    assert np.allclose(h.values, 2 * grid.x**2)
    assert np.all(ScalarPotential.free(grid).values == 0)
    dw = ScalarPotential.double_well(grid, 1.0, 2.0)
    assert np.allclose(dw.values, grid.x**4 - 2 * grid.x**2)
    bad = np.zeros(grid.n)
    bad[3] = np.inf
    with pytest.raises(ValueError):
        ScalarPotential.tabulated(grid, bad)


def test_wavefunction_roundtrip(tmp_path, params):
    grid = Grid1D(-5.0, 5.0, 101)
    psi = gaussian_wavefunction(grid, 0.5, 0.4, 2.0, time=0.25)
    path = tmp_path / "psi.csv"
    write_wavefunction(path, psi, params)
    assert path.read_text().splitlines()[0] == "x,re,im"
    meta = json.loads(path.with_suffix(".json").read_text())
    assert set(meta) == {"hbar", "mass", "time", "boundary"}
    back, p = read_wavefunction(path)
    assert np.array_equal(back.values, psi.values)
    assert back.time == 0.25 and p == params


def test_density_roundtrip(tmp_path, ground):
    rho = born_density(ground)
    path = tmp_path / "rho.csv"
    write_density(path, rho)
    assert path.read_text().splitlines()[0] == "x,rho"
    back = read_density(path)
    assert np.array_equal(back.values, rho.values)


def test_harmonic_ground_state_width(params):
    grid = Grid1D(-10.0, 10.0, 801)
    rho = born_density(harmonic_ground_state(grid, params, omega=2.0))
    assert rho.variance == pytest.approx(0.25, rel=1e-6)
