"""Scenario pipeline: propagate, measure, sample, export, verify.

Checks come in two flavours.  *Simulation* checks need the in-memory
solution (all recorded path times, solver internals) and are stored in
``report.json``.  *Artifact* checks are recomputed from the exported CSV
files; ``run`` evaluates them by reading its own output back, so ``verify``
on an untouched directory reproduces the report exactly.
"""
from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, kernels, testfunctions
from .config import Scenario, validate
from .core import (Grid1D, PhysicalParams, ScalarPotential, born_density, gaussian_wavefunction,
                   harmonic_ground_state, read_density, trapezoid)
from .errors import MissingArtifact
from .estimators import drift_regression, duality_residual, tv_distance
from .measurement import MeasurementEvent, post_measurement_process, repetition_probability
from .measurement import collapse_pde_residual
from .nelson import DriftSeries, drift_series, read_ensemble, sample_forward, write_ensemble
from .schrodinger import propagate, read_history, write_history
from .thermo import (ThermoParams, classical_measurement, equilibrium_density,
                     fokker_planck_propagate, forward_drift_from_H, grad_log, kl_curve,
                     kl_minimality_check, read_density_history, thermo_pde_residual,
                     write_density_history)
from .variational import action_value, hj_residual, lagrange_functional_value

log = logging.getLogger("stochmech")

TIME_TOL = 1e-9


@dataclass
class Check:
    name: str
    value: float
    tolerance: float | None
    passed: bool
    source: str
    detail: dict = field(default_factory=dict)


def _clean(obj):
    """Plain JSON types; complex numbers become [re, im]."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _dump(path, obj):
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _enabled(sc, name, default=True):
    return sc.checks.get(name, default)


# -- building blocks ----------------------------------------------------------

def build_grid(sc):
    g = sc.section("grid")
    return Grid1D(float(g["x_min"]), float(g["x_max"]), int(g["n"]), g.get("boundary", "dirichlet"))


def build_potential(spec, grid):
    kind = spec.get("kind", "free")
    if kind == "free":
        return ScalarPotential.free(grid)
    if kind == "harmonic":
        return ScalarPotential.harmonic(grid, spec.get("omega", 1.0), spec.get("mass", 1.0),
                                        spec.get("center", 0.0))
    return ScalarPotential.double_well(grid, spec.get("a", 1.0), spec.get("b", 1.0))


def build_params(sc):
    p = sc.section("params")
    return PhysicalParams(float(p["hbar"]), float(p["mass"]))


def build_event(sc, grid):
    m = sc.section("measurement")
    if not m:
        return None
    if "window" in m:
        return MeasurementEvent(float(m["time"]), window=[tuple(iv) for iv in m["window"]],
                                smoothing=m.get("smoothing"))
    post = read_density(m["posterior_csv"])
    if post.grid != grid:
        post = type(post)(grid, np.interp(grid.x, post.grid.x, post.values), post.time)
    return MeasurementEvent(float(m["time"]), posterior=post)


def analytic_variance(sc, t):
    """Closed-form position variance when the scenario has one, else None."""
    if sc.kind != "quantum":
        return None
    p = build_params(sc)
    pot, init = sc.section("potential"), sc.section("initial")
    if init["kind"] == "ground_state" and pot.get("kind") == "harmonic":
        return p.hbar / (2 * p.mass * pot.get("omega", 1.0))
    if init["kind"] == "gaussian" and pot.get("kind") == "free":
        s0 = init.get("s0_sq", 0.5)
        return s0 * (1 + (p.hbar * t / (2 * p.mass * s0)) ** 2)
    return None


def _recorded_window(times, window):
    """Recorded times inside ``window`` that have a neighbour on both sides."""
    if not window:
        return []
    a, b = window
    idx = [k for k in range(1, len(times) - 1) if a - TIME_TOL <= times[k] <= b + TIME_TOL]
    return [float(times[k]) for k in idx]


def _with_neighbours(times, centres):
    ks = set()
    for c in centres:
        k = int(np.argmin(np.abs(times - c)))
        ks.update((k - 1, k, k + 1))
    return ks


def _export_times(ens_times, checkpoints, pooled):
    ks = _with_neighbours(ens_times, pooled)
    for c in checkpoints:
        d = np.abs(ens_times - c)
        k = int(np.argmin(d))
        if d[k] <= TIME_TOL:
            ks.add(k)
    return [float(ens_times[k]) for k in sorted(ks) if 0 <= k < len(ens_times)]


@contextmanager
def _capture_warnings(sink):
    class H(logging.Handler):
        def emit(self, record):
            sink.append(f"{record.name}: {record.getMessage()}")
    h = H(level=logging.WARNING)
    log.addHandler(h)
    try:
        yield
    finally:
        log.removeHandler(h)


# -- quantum ------------------------------------------------------------------

def _quantum_initial(sc, grid, params):
    init = sc.section("initial")
    t0 = float(sc.section("time")["t0"])
    if init["kind"] == "ground_state":
        return harmonic_ground_state(grid, params, init.get("omega", 1.0), t0)
    return gaussian_wavefunction(grid, init.get("center", 0.0), init.get("s0_sq", 0.5),
                                 init.get("k0", 0.0), t0)


def _run_quantum(sc, out, jobs):
    grid, params = build_grid(sc), build_params(sc)
    V = build_potential(sc.section("potential"), grid)
    tm, en = sc.section("time"), sc.section("ensemble")
    t0, t1, dt = float(tm["t0"]), float(tm["t1"]), float(tm["dt"])
    psi0 = _quantum_initial(sc, grid, params)
    # the HJ check needs neighbouring solver steps; everything else uses the strided frames
    fine = propagate(psi0, V, t0, t1, dt, 1, params)
    hist = fine.every(int(tm["checkpoint_stride"]))
    files = {"frames": {"psi": str(write_history(out / "frames", hist, params, "psi").relative_to(out))}}
    checks = []
    tol = sc.tolerances

    norm_err = float(np.max(np.abs(fine.norms() - 1)))
    checks.append(Check("norm", norm_err, tol["norm"], norm_err <= tol["norm"], "simulation"))
    if _enabled(sc, "hj") and len(fine) >= 3:
        r = hj_residual(fine, V, params)
        checks.append(Check("hj_residual", r, tol["hj_residual"], r <= tol["hj_residual"],
                            "simulation"))
    del fine
    if _enabled(sc, "solver_variance"):
        worst, per = 0.0, {}
        for c in tm["checkpoints"]:
            ref = analytic_variance(sc, c)
            if ref is None:
                continue
            rel = abs(born_density(hist.at(c)).variance / ref - 1)
            per[str(c)] = rel
            worst = max(worst, rel)
        if per:
            lim = tol["solver_variance_rel"]
            checks.append(Check("solver_variance", worst, lim, worst <= lim, "simulation", per))
    act = action_value(hist, V, params, scenario=sc.name)
    checks.append(Check("action", float(np.real(act.value)), None, bool(np.isfinite(act.value)),
                        "simulation", act.as_dict()))

    drifts = drift_series(hist, params)
    ens = sample_forward(born_density(psi0), drifts, params, int(en["n_paths"]), float(en["dt"]),
                         sc.seed, record_stride=int(en["record_stride"]), jobs=jobs)
    pooled = _recorded_window(ens.times, en.get("duality_window"))
    keep = _export_times(ens.times, tm["checkpoints"], pooled)
    files["ensembles"] = {"forward": str(write_ensemble(out / "ensembles", ens, "forward",
                                                        times=keep).relative_to(out))}

    if _enabled(sc, "lagrange"):
        detail, ok = {}, True
        for name in testfunctions.FULL_BANK:
            lv = lagrange_functional_value(ens, drifts, name, params)
            zr, zi = lv.z_scores
            detail[name] = {"value": lv.value, "z_real": zr, "z_imag": zi}
            ok &= lv.within(tol["lagrange_sigmas"])
        worst = max(max(v["z_real"], v["z_imag"]) for v in detail.values())
        checks.append(Check("lagrange", worst, tol["lagrange_sigmas"], bool(ok), "simulation", detail))
        # negative control: shift the current drift by 0.5 (1 + x)
        bad = (lambda x, t: drifts.evaluate("v", x, t) + 0.5 * (1 + x),
               lambda x, t: drifts.evaluate("u", x, t))
        z = [max(lagrange_functional_value(ens, bad, n, params, check=False).z_scores)
             for n in testfunctions.FULL_BANK]
        checks.append(Check("lagrange_negative_control", min(z), 5.0, min(z) > 5.0, "simulation"))

    ev = build_event(sc, grid)
    if ev is not None:
        res = post_measurement_process(hist, ev, V, dt, t1, params, int(tm["checkpoint_stride"]))
        files["frames"]["psi_tilde"] = str(write_history(out / "frames", res.psi_tilde_history,
                                                         params, "psi_tilde").relative_to(out))
        psi1, pt = res.reference_history.values[0], res.psi_tilde.values
        on = (np.abs(pt) > 0) & (np.abs(psi1) ** 2 > 1e-10 * np.max(np.abs(psi1) ** 2))
        ph = np.abs(np.angle(pt[on] / psi1[on]))
        phase_err = float(ph.max()) if on.any() else 0.0
        checks.append(Check("collapse_phase", phase_err, 1e-12, phase_err <= 1e-12, "simulation"))
        if ev.kind == "window":
            rep = repetition_probability(res)
            checks.append(Check("repetition", abs(rep - 1), tol["repetition"],
                                abs(rep - 1) <= tol["repetition"], "simulation"))
        if len(res.psi_tilde_history) >= 3:
            cr = collapse_pde_residual(res, params, V)
            lim = tol.get("collapse_residual")
            checks.append(Check("collapse_residual", cr.rms, lim,
                                True if lim is None else cr.rms <= lim, "simulation",
                                {"initial_deviation": cr.initial_deviation, "n_points": cr.n_points}))
        cens = res.sample(int(en["n_paths"]), float(en["dt"]), sc.seed + 1,
                          record_stride=int(en["record_stride"]), jobs=jobs)
        cps = [c for c in tm["checkpoints"] if c >= ev.time - TIME_TOL]
        ckeep = _export_times(cens.times, cps, [])
        files["ensembles"]["collapsed"] = str(write_ensemble(out / "ensembles", cens, "collapsed",
                                                             times=ckeep).relative_to(out))
    return checks, files


# -- thermo -------------------------------------------------------------------

def _thermo_setup(sc):
    grid = build_grid(sc)
    th = sc.section("thermo")
    tp = ThermoParams(float(th["kT"]), float(th["sigma_sq"]), build_potential(sc.section("hamiltonian"), grid))
    return grid, tp, forward_drift_from_H(tp)


def _run_thermo(sc, out, jobs):
    grid, tp, b = _thermo_setup(sc)
    tm, en, tol = sc.section("time"), sc.section("ensemble"), sc.tolerances
    t0, t1, dt = float(tm["t0"]), float(tm["t1"]), float(tm["dt"])
    stride = int(tm["checkpoint_stride"])
    eq = equilibrium_density(tp)
    init = sc.section("initial")
    if init["kind"] == "equilibrium":
        rho0 = eq
    else:
        x = grid.x
        w = np.exp(-(x - init.get("center", 0.0)) ** 2 / (2 * init.get("s0_sq", 1.0)))
        rho0 = type(eq)(grid, w / trapezoid(w, grid), t0)
    ev = build_event(sc, grid)
    pre = fokker_planck_propagate(rho0, b, tp.sigma_sq, t0, ev.time, dt, stride)
    res = classical_measurement(pre, b, ev, tp.sigma_sq, t1, dt, stride)
    files = {"frames": {
        "rho": str(write_density_history(out / "frames", res.reference, "rho").relative_to(out)),
        "rho_tilde": str(write_density_history(out / "frames", res.history, "rho_tilde").relative_to(out)),
    }}
    checks = []
    masses = np.concatenate([res.history.masses(), res.reference.masses()])
    merr = float(np.max(np.abs(masses - 1)))
    checks.append(Check("fp_mass", merr, tol["fp_mass"], merr <= tol["fp_mass"], "simulation"))
    kl = kl_curve(res.history, eq)
    rise = float(np.max(np.diff(kl))) if len(kl) > 1 else 0.0
    checks.append(Check("kl_monotone", rise, 1e-12, rise <= 1e-12, "simulation",
                        {"first": kl[0], "last": kl[-1]}))
    # backward drift computed two ways
    ref_bm = res.reference_backward_drifts()["b_minus"]
    new_bm = res.backward_drifts()["b_minus"]
    with np.errstate(divide="ignore", invalid="ignore"):
        other = np.stack([ref_bm[k] - tp.sigma_sq * (grad_log(res.history.values[k], grid)
                                                      - grad_log(res.reference.values[k], grid))
                          for k in range(len(res.history))])
    core = np.isfinite(res.phi)
    ident = float(np.max(np.abs(other - new_bm)[core])) if core.any() else 0.0
    checks.append(Check("drift_identity", ident, 1e-10, ident <= 1e-10, "simulation"))
    if len(res.history) >= 3:
        rr = thermo_pde_residual(res.reference, res.history, ref_bm, tp.sigma_sq)
        lim = tol.get("thermo_residual")
        checks.append(Check("thermo_residual", rr.rms, lim, True if lim is None else rr.rms <= lim,
                            "simulation", {"initial_deviation": rr.initial_deviation}))
    if _enabled(sc, "kl_minimality", False):
        rep = kl_minimality_check(res, n_paths=int(en["n_paths"]), dt=float(en["dt"]),
                                  seed=sc.seed, record_stride=int(en.get("kl_record_stride", 10)),
                                  jobs=jobs)
        opt_rel = abs(rep.optimal.value / rep.marginal - 1)
        ok = opt_rel <= tol["kl_optimal_rel"]
        detail = {"marginal": rep.marginal, "optimal": rep.optimal.value, "candidates": {}}
        for c in rep.candidates:
            rel = abs(c.excess / c.expected_excess - 1) if c.expected_excess else abs(c.excess)
            detail["candidates"][f"{c.name}:{c.eps}"] = {"value": c.value, "excess": c.excess,
                                                         "expected": c.expected_excess, "rel": rel}
            ok &= rel <= tol["kl_excess_rel"] and c.value > rep.optimal.value
        checks.append(Check("kl_minimality", opt_rel, tol["kl_optimal_rel"], bool(ok),
                            "simulation", detail))
    ens = res.sample(int(en["n_paths"]), float(en["dt"]), sc.seed,
                     record_stride=int(en["record_stride"]), jobs=jobs)
    pooled = _recorded_window(ens.times, en.get("drift_window"))
    keep = _export_times(ens.times, [c for c in tm["checkpoints"] if c >= ev.time - TIME_TOL], pooled)
    files["ensembles"] = {"forward": str(write_ensemble(out / "ensembles", ens, "forward",
                                                        times=keep).relative_to(out))}
    return checks, files


# -- artifact checks ----------------------------------------------------------

def _born_check(name, ens, frames_at, checkpoints, n_bins, lim):
    per = {}
    for c in checkpoints:
        if not ens.has_time(c):
            continue
        per[repr(float(c))] = tv_distance(ens.at(c), frames_at(c), n_bins)
    worst = max(per.values()) if per else float("inf")
    return Check(name, worst, lim, worst <= lim, "artifact", per)


def artifact_checks(sc, out):
    out = Path(out)
    manifest = _read_json(out / "manifest.json")
    files = manifest["files"]
    tm, en, tol = sc.section("time"), sc.section("ensemble"), sc.tolerances
    nb = int(en["n_bins"])
    checks = []
    if sc.kind == "quantum":
        params = build_params(sc)
        hist, _ = read_history(out / files["frames"]["psi"])
        ens = read_ensemble(out / files["ensembles"]["forward"])
        if _enabled(sc, "born"):
            checks.append(_born_check("born", ens, lambda t: born_density(hist.at(t)),
                                      tm["checkpoints"], nb, tol["born_tv"]))
        pooled = _recorded_window(ens.times, en.get("duality_window"))
        if _enabled(sc, "duality") and pooled:
            rep = duality_residual(ens, pooled, nb, params)
            dev = abs(rep.slope - 1)
            checks.append(Check("duality", rep.slope, tol["duality_slope"],
                                dev <= tol["duality_slope"], "artifact",
                                {"slope_stderr": rep.slope_stderr, "n_bins": rep.n_bins,
                                 "times": len(pooled)}))
        if _enabled(sc, "ensemble_variance"):
            t_end = float(ens.times[-1])
            ref = analytic_variance(sc, t_end)
            if ref is not None:
                rel = abs(float(np.var(ens.at(t_end))) / ref - 1)
                lim = tol["ensemble_variance_rel"]
                checks.append(Check("ensemble_variance", rel, lim, rel <= lim, "artifact",
                                    {"time": t_end, "target": ref}))
        if "collapsed" in files["ensembles"] and _enabled(sc, "born_collapsed"):
            th, _ = read_history(out / files["frames"]["psi_tilde"])
            cens = read_ensemble(out / files["ensembles"]["collapsed"])
            cps = [c for c in tm["checkpoints"] if c >= float(th.times[0]) - TIME_TOL]
            checks.append(_born_check("born_collapsed", cens, lambda t: born_density(th.at(t)),
                                      cps, nb, tol["born_tv"]))
    else:
        grid, tp, b = _thermo_setup(sc)
        new = read_density_history(out / files["frames"]["rho_tilde"])
        ens = read_ensemble(out / files["ensembles"]["forward"])
        cps = [c for c in tm["checkpoints"] if c >= float(new.times[0]) - TIME_TOL]
        if _enabled(sc, "born"):
            checks.append(_born_check("born", ens, new.at, cps, nb, tol["born_tv"]))
        pooled = _recorded_window(ens.times, en.get("drift_window"))
        if _enabled(sc, "theorem2_drifts") and pooled:
            bm = np.stack([b.b_plus - tp.sigma_sq * grad_log(r, grid) for r in new.values])
            ds = DriftSeries(grid, new.times, {"b_plus": np.broadcast_to(b.b_plus, bm.shape),
                                               "b_minus": bm})
            for which, comp in (("forward", "b_plus"), ("backward", "b_minus")):
                rep = drift_regression(ens, pooled, lambda x, t, c=comp: ds.evaluate(c, x, t),
                                       which, nb)
                dev = abs(rep.slope - 1)
                checks.append(Check(f"{which}_drift", rep.slope, tol["drift_slope"],
                                    dev <= tol["drift_slope"], "artifact",
                                    {"slope_stderr": rep.slope_stderr, "n_bins": rep.n_bins}))
    return checks


# -- entry points -------------------------------------------------------------

def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path)
    return json.loads(path.read_text())


def _report(sc, checks, warnings, strict):
    passed = all(c.passed for c in checks) and not (strict and warnings)
    return {"scenario": sc.name, "kind": sc.kind, "seed": sc.seed, "strict": strict,
            "checks": [asdict(c) for c in checks], "warnings": list(warnings), "passed": passed}


def run(sc, out, jobs=None, strict=False):
    """Execute a scenario, write artifacts under ``out`` and return the report dict."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = int(sc.section("ensemble")["jobs"] if jobs is None else jobs)
    warnings = []
    with _capture_warnings(warnings):
        if sc.kind == "quantum":
            sim, files = _run_quantum(sc, out, jobs)
        else:
            sim, files = _run_thermo(sc, out, jobs)
    manifest = {"scenario": sc.to_dict(), "files": files, "version": __version__,
                "backend": kernels.BACKEND}
    _dump(out / "manifest.json", manifest)
    sim_dicts = {"checks": [asdict(c) for c in sim], "warnings": warnings}
    _dump(out / "simulation_checks.json", sim_dicts)
    report = _report(sc, sim + artifact_checks(sc, out), warnings, strict)
    _dump(out / "report.json", report)
    return _clean(report)


def scenario_from_manifest(out):
    manifest = _read_json(Path(out) / "manifest.json")
    return validate(manifest["scenario"])


def verify(out, strict=None):
    """Recompute artifact checks from the files in ``out``; simulation checks are carried over."""
    out = Path(out)
    sc = scenario_from_manifest(out)
    sim = _read_json(out / "simulation_checks.json")
    prior = _read_json(out / "report.json")
    strict = prior.get("strict", False) if strict is None else strict
    checks = [Check(**c) for c in sim["checks"]] + artifact_checks(sc, out)
    return _clean(_report(sc, checks, sim["warnings"], strict))


# -- plot data ----------------------------------------------------------------

def export_plot_data(out, dest=None, n_bins=None):
    """Tidy long CSV ``series,t,x,value`` of solver densities and ensemble histograms."""
    out = Path(out)
    sc = scenario_from_manifest(out)
    manifest = _read_json(out / "manifest.json")
    files = manifest["files"]
    nb = int(n_bins or sc.section("ensemble")["n_bins"])
    rows = []

    def add(series, t, x, v):
        ts = repr(float(t))
        rows.extend(f"{series},{ts},{xi!r},{vi!r}" for xi, vi in zip(np.asarray(x, float).tolist(),
                                                                     np.asarray(v, float).tolist()))

    for key, rel in files["frames"].items():
        if sc.kind == "quantum":
            h, _ = read_history(out / rel)
            dens = h.densities()
        else:
            h = read_density_history(out / rel)
            dens = h.values
        for k, t in enumerate(h.times):
            add(f"{key}_density", t, h.grid.x, dens[k])
    for key, rel in files["ensembles"].items():
        ens = read_ensemble(out / rel)
        for k, t in enumerate(ens.times):
            counts, edges = np.histogram(ens.positions[k], bins=nb)
            width = np.diff(edges)
            add(f"{key}_empirical", t, 0.5 * (edges[1:] + edges[:-1]),
                counts / (counts.sum() * width))
    dest = Path(dest) if dest else out / "plots" / "plot_data.csv"
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text("series,t,x,value\n" + "\n".join(rows) + "\n")
    return dest
