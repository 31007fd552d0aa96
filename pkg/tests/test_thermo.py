import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochmech.core import Density, Grid1D, ScalarPotential, trapezoid
from stochmech.errors import MissingArtifact, NotNormalizable, StabilityViolation
from stochmech.estimators import drift_regression, relative_entropy
from stochmech.measurement import MeasurementEvent
from stochmech.thermo import (ThermoParams, backward_drift_field, classical_measurement,
                              equilibrium_density, fokker_planck_propagate, forward_drift_from_H,
                              grad_log, kl_curve, kl_minimality_check, read_density_history,
                              stability_bound, thermo_pde_residual, write_density_history)

INF = np.inf


def normal(g, mu=0.0, var=1.0):
    return np.exp(-(g.x - mu) ** 2 / (2 * var)) / np.sqrt(2 * np.pi * var)


@pytest.fixture(scope="module")
def ou():
    g = Grid1D(-8.0, 8.0, 400)
    tp = ThermoParams(1.0, 2.0, ScalarPotential.harmonic(g))
    return g, tp, forward_drift_from_H(tp)


@pytest.fixture(scope="module")
def half_line(ou):
    g, tp, b = ou
    ev = MeasurementEvent(0.0, window=[(0.0, INF)], smoothing=0)
    return classical_measurement(equilibrium_density(tp), b, ev, tp.sigma_sq, 1.0, 1e-3, 10)


def test_equilibrium_standard_normal(ou):
    g, tp, _ = ou
    assert np.max(np.abs(equilibrium_density(tp).values - normal(g))) < 1e-8


def test_equilibrium_temperature_sets_variance():
    g = Grid1D(-14.0, 14.0, 701)
    tp = ThermoParams(2.0, 1.0, ScalarPotential.harmonic(g))
    rho = equilibrium_density(tp)
    assert np.max(np.abs(rho.values - normal(g, 0.0, 2.0))) < 1e-8
    assert rho.variance == pytest.approx(2.0, rel=1e-8)


def test_equilibrium_flat():
    g = Grid1D(-2.0, 3.0, 51)
    tp = ThermoParams(1.0, 1.0, ScalarPotential.tabulated(g, np.full(g.n, 4.2)))
    assert np.allclose(equilibrium_density(tp).values, 1 / 5.0, rtol=1e-14)


def test_not_normalizable_guard():
    # unreachable through validated potentials; the guard still names the problem
    class BadH:
        def __init__(self, g):
            self.grid = g
            self.values = np.full(g.n, np.nan)

    g = Grid1D(-1.0, 1.0, 11)
    with pytest.raises(NotNormalizable):
        equilibrium_density(ThermoParams(1.0, 1.0, BadH(g)))


def test_forward_drift(ou):
    g, tp, b = ou
    assert np.allclose(b.b_plus, -g.x, atol=1e-12)
    flat = ThermoParams(1.0, 2.0, ScalarPotential.free(g))
    assert np.all(forward_drift_from_H(flat).b_plus == 0)
    hot = ThermoParams(2.0, 2.0, tp.H)
    assert np.allclose(forward_drift_from_H(hot).b_plus, 0.5 * b.b_plus, rtol=1e-15)


def test_equilibrium_is_stationary(ou):
    g, tp, b = ou
    eq = equilibrium_density(tp)
    h = fokker_planck_propagate(eq, b, tp.sigma_sq, 0.0, 5.0, 1e-3, 1000)
    assert np.max(np.abs(h.values - eq.values)) < 1e-6


def test_discrete_stationary_state_exact():
    # exponential fitting makes exp(-H/kT) an exact discrete fixed point for linear H
    g = Grid1D(0.0, 5.0, 101)
    tp = ThermoParams(1.0, 2.0, ScalarPotential.tabulated(g, 0.8 * g.x))
    eq = equilibrium_density(tp)
    h = fokker_planck_propagate(eq, forward_drift_from_H(tp), tp.sigma_sq, 0.0, 1.0, 1e-3, 1000)
    assert np.max(np.abs(h.values[-1] - eq.values)) < 1e-12


def test_ou_moments(ou):
    g, tp, b = ou
    rho0 = Density(g, normal(g, 2.0, 0.1) / trapezoid(normal(g, 2.0, 0.1), g))
    h = fokker_planck_propagate(rho0, b, tp.sigma_sq, 0.0, 2.0, 1e-3, 100)
    for k in range(len(h)):
        t = h.times[k]
        f = h.frame(k)
        assert f.mean == pytest.approx(2 * np.exp(-t), rel=0.01)
        assert f.variance == pytest.approx(1 + (0.1 - 1) * np.exp(-2 * t), rel=0.01)


def test_fp_mass_and_positivity(ou):
    g, tp, b = ou
    v = np.where(np.abs(g.x - 1) < 0.5, 1.0, 0.0)
    h = fokker_planck_propagate(Density(g, v / trapezoid(v, g)), b, tp.sigma_sq, 0.0, 1.0, 1e-3, 5)
    assert np.max(np.abs(h.masses() - 1)) <= 1e-8
    assert np.all(h.values >= 0)


def test_fp_zero_duration(ou):
    g, tp, b = ou
    eq = equilibrium_density(tp)
    h = fokker_planck_propagate(eq, b, tp.sigma_sq, 0.3, 0.3, 1e-3)
    assert len(h) == 1 and np.array_equal(h.values[0], eq.values)


def test_fp_stability_violation(ou):
    g, tp, b = ou
    bound = stability_bound(g, b, tp.sigma_sq)
    with pytest.raises(StabilityViolation):
        fokker_planck_propagate(equilibrium_density(tp), b, tp.sigma_sq, 0.0, 1.0, 2 * bound)


def test_backward_drift_at_equilibrium(ou):
    g, tp, b = ou
    bm = backward_drift_field(equilibrium_density(tp), b, tp.sigma_sq).b_minus
    # central difference of log-gaussian gradient is exactly exp(-h^2/2) sinh(xh)/h
    h = g.dx
    exact = -g.x + tp.sigma_sq * np.exp(-h * h / 2) * np.sinh(g.x * h) / h
    inner = np.abs(g.x) < 7
    assert np.max(np.abs(bm - exact)[inner]) < 1e-9
    assert np.max(np.abs(bm - g.x)[np.abs(g.x) < 2]) < 5e-3


def test_backward_drift_uniform(ou):
    g, tp, b = ou
    flat = Density(g, np.full(g.n, 1 / 16.0))
    assert np.array_equal(backward_drift_field(flat, b, tp.sigma_sq).b_minus, b.b_plus)


@given(c=st.floats(1e-3, 1e3))
def test_backward_drift_scale_invariant(c):
    g = Grid1D(-5.0, 5.0, 101)
    rho = Density(g, normal(g, 0.3, 0.7), validate=False)
    big = Density(g, c * normal(g, 0.3, 0.7), validate=False)
    bp = np.sin(g.x)
    a = backward_drift_field(rho, bp, 1.3).b_minus
    z = backward_drift_field(big, bp, 1.3).b_minus
    assert np.allclose(a, z, rtol=1e-12, atol=1e-12)


def test_grad_log_interpolates_below_floor():
    g = Grid1D(-2.0, 2.0, 41)
    rho = np.where(g.x < 1, np.exp(-g.x), 0.0)
    out = grad_log(rho, g)
    assert np.all(np.isfinite(out))
    assert np.allclose(out[g.x > 1], out[np.flatnonzero(g.x < 1)[-1]])


def test_whole_window_changes_nothing(ou):
    g, tp, b = ou
    eq = equilibrium_density(tp)
    res = classical_measurement(eq, b, MeasurementEvent(0.0, window=[(-INF, INF)]),
                                tp.sigma_sq, 0.5, 1e-3, 10)
    assert np.array_equal(res.history.values, res.reference.values)
    r = thermo_pde_residual(res.reference, res.history, res.reference_backward_drifts(),
                            tp.sigma_sq)
    assert r.rms <= 1e-10 and r.initial_deviation <= 1e-12


def test_half_line_posterior(ou, half_line):
    g, tp, _ = ou
    eq = equilibrium_density(tp).values
    assert np.allclose(half_line.rho_tilde.values, np.where(g.x >= 0, 2 * eq, 0.0), rtol=1e-10)
    assert relative_entropy(half_line.rho_tilde, half_line.reference.frame(0)) == pytest.approx(
        np.log(2), abs=1e-3)


def test_kl_decreases(ou, half_line):
    g, tp, _ = ou
    kl = kl_curve(half_line.history, equilibrium_density(tp))
    assert np.all(np.diff(kl) <= 1e-12)
    assert kl[-1] < 0.2 * kl[0]


def test_same_forward_drift(half_line, ou):
    g, tp, b = ou
    d = half_line.backward_drifts()
    assert np.array_equal(d["b_plus"][3], b.b_plus)


def test_backward_drift_identity(half_line):
    """b_minus - sigma^2 grad log(rho_tilde/rho) equals b_plus - sigma^2 grad log rho_tilde."""
    g = half_line.history.grid
    s2 = half_line.sigma_sq
    new = half_line.backward_drifts()["b_minus"]
    ref = half_line.reference_backward_drifts()["b_minus"]
    core = np.isfinite(half_line.phi)
    for k in range(len(half_line.history)):
        other = ref[k] - s2 * (grad_log(half_line.history.values[k], g)
                               - grad_log(half_line.reference.values[k], g))
        assert np.max(np.abs(other - new[k])[core[k]]) <= 1e-10


def test_residual_initial_condition(half_line):
    r = thermo_pde_residual(half_line.reference, half_line.history,
                            half_line.reference_backward_drifts(), half_line.sigma_sq)
    assert r.initial_deviation <= 1e-12
    assert np.isfinite(r.rms) and r.n_points > 0


def test_new_process_drifts(half_line):
    ens = half_line.sample(100_000, 1e-3, 31, record_stride=20)
    ts = [t for t in ens.times if 0.4 - 1e-9 <= t <= 0.6 + 1e-9]
    d = half_line.backward_drifts()
    fwd = drift_regression(ens, ts, lambda x, t: d.evaluate("b_plus", x, t), "forward")
    bwd = drift_regression(ens, ts, lambda x, t: d.evaluate("b_minus", x, t), "backward")
    assert fwd.slope_within(0.05) and bwd.slope_within(0.05)


def test_coherence(ou):
    g, tp, b = ou
    eq = equilibrium_density(tp)
    ev = MeasurementEvent(0.0, window=[(-0.5, INF)], smoothing=0)
    short = classical_measurement(eq, b, ev, tp.sigma_sq, 0.5, 1e-3, 10)
    long = classical_measurement(eq, b, ev, tp.sigma_sq, 1.0, 1e-3, 10)
    cut = long.history.restrict(0.0, 0.5)
    assert np.allclose(cut.times, short.history.times, rtol=0, atol=1e-12)
    assert np.max(np.abs(cut.values - short.history.values)) <= 1e-10


def test_kl_zero_perturbation_is_optimal(half_line):
    rep = kl_minimality_check(half_line, candidates=(("x", 0.0), ("x", 0.5)), n_paths=20_000,
                              dt=1e-3, seed=4)
    zero, x = rep.candidates
    assert zero.value == rep.optimal.value and abs(zero.excess) < 1e-20
    # grad x = 1: constant integrand eps^2 / (2 sigma^2) over [t1, t2]
    assert x.expected_excess == pytest.approx(0.25 / (2 * 2.0) * 1.0, rel=1e-9)
    assert x.excess == pytest.approx(x.expected_excess, rel=1e-9)
    assert x.value > rep.optimal.value


def test_density_history_roundtrip(tmp_path, half_line):
    m = write_density_history(tmp_path, half_line.history)
    back = read_density_history(m)
    assert np.array_equal(back.values, half_line.history.values)
    assert np.array_equal(back.times, half_line.history.times)
    next(tmp_path.glob("rho_00003.csv")).unlink()
    with pytest.raises(MissingArtifact, match="rho_00003"):
        read_density_history(m)
