import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from stochmech.core import (Density, Grid1D, PhysicalParams, Wavefunction, born_density,
                            gaussian_wavefunction)
from stochmech.errors import DriftBlowup
from stochmech.estimators import density_cdf, tv_distance
from stochmech.nelson import (CHUNK, DriftField, DriftSeries, drift_fields, read_ensemble,
                              sample_backward, sample_forward, sample_inverse_cdf, wiener_check,
                              write_ensemble)


def test_ground_state_drifts(ground, params):
    d = drift_fields(ground, params)
    x = ground.grid.x
    core = np.abs(x) < 4
    # central difference of psi'/psi for this Gaussian: e^{-h^2/2} sinh(x h) / h
    xc = np.abs(x[core])
    bound = xc * ground.grid.dx**2 * (0.5 + xc**2 / 6) + 1e-12
    assert np.all(np.abs(d.u[core] + x[core]) <= 1.1 * bound)
    assert np.all(d.v == 0)
    assert np.all(np.abs(d.b_plus[core] + x[core]) <= 1.1 * bound)
    assert np.all(np.abs(d.b_minus[core] - x[core]) <= 1.1 * bound)


def test_drift_second_order(params):
    errs = []
    for n in (201, 401, 801):
        g = Grid1D(-8.0, 8.0, n)
        d = drift_fields(gaussian_wavefunction(g, 0.0, 0.5, 1.0), params)
        core = np.abs(g.x) < 3
        errs.append(np.max(np.abs(d.u[core] + g.x[core])) + np.max(np.abs(d.v[core] - 1)))
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_osmotic_matches_log_density(grid, params):
    psi = gaussian_wavefunction(grid, 0.5, 0.8, 1.5)
    d = drift_fields(psi, params)
    rho = np.abs(psi.values) ** 2
    core = rho > 1e-10 * rho.max()
    exact = -(grid.x - 0.5) / (2 * 0.8)  # (sigma^2 / 2) d/dx log rho
    assert np.max(np.abs(d.u[core] - exact[core])) < 1e-2
    assert np.allclose(d.v[core], 1.5, atol=2e-2)


def test_real_positive_has_no_current(grid, params):
    x = grid.x
    psi = Wavefunction(grid, np.exp(-x**2 / 3) * (1.2 + np.cos(x)))
    assert np.all(drift_fields(psi, params).v == 0)


def test_global_phase_quarter_turn_exact(params):
    psi = gaussian_wavefunction(Grid1D(-8.0, 8.0, 300), 0.3, 0.6, 0.9)
    a = drift_fields(psi, params)
    b = drift_fields(psi.with_values(1j * psi.values), params)
    for name in ("v", "u", "b_plus", "b_minus"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


@given(alpha=st.floats(0, 2 * np.pi))
def test_global_phase_invariance(alpha):
    p = PhysicalParams()
    psi = gaussian_wavefunction(Grid1D(-8.0, 8.0, 300), 0.3, 0.6, 0.9)
    a = drift_fields(psi, p)
    b = drift_fields(psi.with_values(np.exp(1j * alpha) * psi.values), p)
    # equal up to the rounding of the complex product
    assert np.allclose(a.u, b.u, rtol=1e-12, atol=1e-12)
    assert np.allclose(a.v, b.v, rtol=1e-12, atol=1e-12)


def test_drift_field_identities(grid, params):
    d = drift_fields(gaussian_wavefunction(grid, 0.0, 0.5, 2.0), params)
    assert np.array_equal(d.b_plus - d.b_minus, 2 * d.u) or np.allclose(
        d.b_plus - d.b_minus, 2 * d.u, rtol=0, atol=4e-16 * np.abs(d.b_plus).max())
    assert np.array_equal(d.v_q.real, d.v)
    assert np.array_equal(d.v_q.imag, -d.u)


def test_nodes_are_clipped_not_nan(params):
    g = Grid1D(-8.0, 8.0, 401)
    x = g.x
    psi = Wavefunction(g, x * np.exp(-x**2 / 2))  # first excited state, node at 0
    d = drift_fields(psi, params, drift_cap=50.0)
    assert np.all(np.isfinite(d.u)) and np.all(np.abs(d.u) <= 50.0)
    # far tails keep the physical drift instead of collapsing to zero
    tail = (np.abs(x) > 5) & (np.abs(x) < 7.5)
    assert np.allclose(d.u[tail], 1 / x[tail] - x[tail], rtol=0.02)


def test_inverse_cdf_sampling(rng):
    g = Grid1D(-6.0, 6.0, 121)
    x = g.x
    w = np.exp(-(x - 1) ** 2) + 0.5 * np.exp(-(x + 2) ** 2 / 0.5)
    rho = Density(g, w / (w @ g.weights))
    s = sample_inverse_cdf(rho, rng.random(50_000))
    ks = stats.kstest(s, lambda y: density_cdf(rho, y))
    assert ks.pvalue > 1e-3


def test_ground_state_variance(gs_forward):
    var = gs_forward.positions.var(axis=1)
    assert np.all(np.abs(var / 0.5 - 1) < 0.02)


def test_wiener_increments(gs_forward):
    w = wiener_check(gs_forward)
    assert w["passed"], w


def test_deterministic_limit(ground):
    p = PhysicalParams(hbar=1e-10, mass=1.0)
    g = ground.grid
    zero = DriftSeries.constant(DriftField(g, 0.0, np.zeros(g.n), np.zeros(g.n)))
    ens = sample_forward(born_density(ground), zero, p, 1000, 1e-2, 1, 0.0, 1.0)
    assert np.max(np.abs(ens.positions - ens.positions[0])) < 1e-3


def test_single_path_reproducible(gs_setup):
    p, g, V, hist, drifts = gs_setup
    rho = born_density(hist.frame(0))
    a = sample_forward(rho, drifts, p, 1, 1e-3, 42, 0.0, 0.5)
    b = sample_forward(rho, drifts, p, 1, 1e-3, 42, 0.0, 0.5)
    c = sample_forward(rho, drifts, p, 1, 1e-3, 43, 0.0, 0.5)
    assert np.array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, c.positions)


def test_jobs_do_not_change_paths(gs_setup):
    p, g, V, hist, drifts = gs_setup
    rho = born_density(hist.frame(0))
    a = sample_forward(rho, drifts, p, 10_000, 1e-3, 5, 0.0, 0.2, record_stride=10, jobs=1)
    b = sample_forward(rho, drifts, p, 10_000, 1e-3, 5, 0.0, 0.2, record_stride=10, jobs=3)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.noise_increments, b.noise_increments)


def test_full_chunks_independent_of_total(gs_setup):
    # each complete chunk has its own generator, so it does not see the path count
    p, g, V, hist, drifts = gs_setup
    rho = born_density(hist.frame(0))
    a = sample_forward(rho, drifts, p, CHUNK + 100, 1e-3, 5, 0.0, 0.1)
    b = sample_forward(rho, drifts, p, 2 * CHUNK + 7, 1e-3, 5, 0.0, 0.1)
    assert np.array_equal(a.positions[:, :CHUNK], b.positions[:, :CHUNK])


def test_backward_ground_state(gs_setup, gs_forward):
    p, g, V, hist, drifts = gs_setup
    bwd = sample_backward(born_density(hist.frame(-1)), drifts, p, 100_000, 1e-3, 77,
                          record_stride=20)
    assert bwd.direction == "backward" and bwd.times[0] == 2.0 and bwd.times[-1] == 0.0
    var = bwd.positions.var(axis=1)
    assert np.all(np.abs(var / 0.5 - 1) < 0.02)
    # both directions reproduce the same marginal at a common interior time
    xf, xb = gs_forward.at(1.0), bwd.at(1.0)
    edges = np.linspace(-4, 4, 65)
    hf = np.histogram(xf, edges)[0] / xf.size
    hb = np.histogram(xb, edges)[0] / xb.size
    assert 0.5 * np.abs(hf - hb).sum() <= 0.03
    assert wiener_check(bwd)["passed"]


def test_backward_deterministic_limit():
    p = PhysicalParams(hbar=1e-12, mass=1.0)
    g = Grid1D(-5.0, 5.0, 101)
    v = np.full(g.n, 0.8)
    d = DriftSeries.constant(DriftField.from_vu(g, 0.0, v, np.zeros(g.n)))
    rho = Density(g, np.where(np.abs(g.x) < 1, 0.5, 0.0) / (np.where(np.abs(g.x) < 1, 0.5, 0.0) @ g.weights))
    ens = sample_backward(rho, d, p, 200, 1e-2, 3, 0.0, 1.0)
    # x(t) = x(1) - 0.8 (1 - t): dx/dt = v
    assert np.allclose(ens.positions[-1], ens.positions[0] - 0.8, atol=1e-4)


def test_blowup_raises():
    p = PhysicalParams()
    g = Grid1D(-2.0, 2.0, 41)
    d = DriftSeries.constant(DriftField(g, 0.0, np.full(g.n, 500.0), np.zeros(g.n)))
    rho = Density(g, np.full(g.n, 0.25))
    with pytest.raises(DriftBlowup):
        sample_forward(rho, d, p, 500, 1e-2, 0, 0.0, 1.0)


def test_sampler_argument_checks(gs_setup):
    p, g, V, hist, drifts = gs_setup
    rho = born_density(hist.frame(0))
    with pytest.raises(ValueError):
        sample_forward(rho, drifts, p, 0, 1e-3, 0)
    with pytest.raises(ValueError):
        sample_forward(rho, drifts, p, 10, 1e-3, 0, 0.0, 5.0)  # beyond the drift frames


def test_ensemble_roundtrip(tmp_path, gs_forward):
    small = gs_forward.subset(np.arange(50))
    m = write_ensemble(tmp_path, small, "fw", times=[0.0, 1.0])
    lines = (tmp_path / "fw.csv").read_text().splitlines()
    assert lines[0] == "path,t,x" and len(lines) == 101
    back = read_ensemble(m)
    assert np.array_equal(back.positions, small.positions[[0, 50]])
    assert back.seed == small.seed and back.direction == "forward"
