"""Scenario files: TOML with nested tables, validated into a Scenario.

A scenario names a kind ("quantum" or "thermo"), a grid, the reference
dynamics, an initial state, a time horizon, the path ensemble, an optional
measurement event and the checks to run.  See the bundled files under
``stochmech/scenarios`` for complete examples.
"""
from __future__ import annotations

import copy
import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

KINDS = ("quantum", "thermo")
POTENTIALS = ("free", "harmonic", "double_well")
QUANTUM_INITIAL = ("ground_state", "gaussian")
THERMO_INITIAL = ("equilibrium", "gaussian")

DEFAULTS = {
    "params": {"hbar": 1.0, "mass": 1.0},
    "time": {"t0": 0.0, "checkpoint_stride": 1},
    "ensemble": {"n_paths": 100_000, "record_stride": 20, "n_bins": 64, "jobs": 1},
    "checks": {},
    "tolerances": {
        "norm": 1e-8,
        "born_tv": 0.02,
        "duality_slope": 0.05,
        "variance_rel": 0.02,
        "solver_variance_rel": 1e-3,
        "ensemble_variance_rel": 0.03,
        "hj_residual": 1e-6,
        "lagrange_sigmas": 3.0,
        "repetition": 1e-10,
        "fp_mass": 1e-8,
        "drift_slope": 0.05,
        "kl_optimal_rel": 0.05,
        "kl_excess_rel": 0.10,
    },
}


@dataclass(frozen=True)
class Scenario:
    name: str
    kind: str
    seed: int
    data: dict

    def section(self, key):
        return self.data.get(key, {})

    @property
    def checks(self):
        return self.data["checks"]

    @property
    def tolerances(self):
        return self.data["tolerances"]

    def with_seed(self, seed):
        d = copy.deepcopy(self.data)
        d["seed"] = int(seed)
        return Scenario(self.name, self.kind, int(seed), d)

    def to_dict(self):
        return _jsonable(self.data)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _num(section, key, field, positive=False, nonneg=False, integer=False):
    if key not in section:
        raise ConfigError(field, "is required")
    val = section[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(field, f"must be a number, got {val!r}")
    if integer and (not isinstance(val, int)):
        raise ConfigError(field, f"must be an integer, got {val!r}")
    if not math.isfinite(val):
        raise ConfigError(field, "must be finite")
    if positive and not val > 0:
        raise ConfigError(field, f"must be > 0, got {val!r}")
    if nonneg and val < 0:
        raise ConfigError(field, f"must be >= 0, got {val!r}")
    return val


def _endpoint(v, field):
    if isinstance(v, str) and v.strip().lower() in ("inf", "+inf", "-inf"):
        return float(v)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or math.isnan(v):
        raise ConfigError(field, f"window endpoint must be a number or 'inf', got {v!r}")
    return float(v)


def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def validate(raw, source="<scenario>"):
    """Check a parsed scenario table and fill defaults; raises ConfigError."""
    if not isinstance(raw, dict):
        raise ConfigError("scenario", "must be a table")
    d = _merge(DEFAULTS, raw)
    name = d.get("name")
    if not isinstance(name, str) or not name:
        raise ConfigError("name", "must be a non-empty string")
    kind = d.get("kind")
    if kind not in KINDS:
        raise ConfigError("kind", f"must be one of {KINDS}, got {kind!r}")
    seed = d.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0 or seed >= 2**64:
        raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {seed!r}")
    d["seed"] = seed

    g = d.get("grid")
    if not isinstance(g, dict):
        raise ConfigError("grid", "table is required")
    lo = _num(g, "x_min", "grid.x_min")
    hi = _num(g, "x_max", "grid.x_max")
    if not hi > lo:
        raise ConfigError("grid.x_max", "must exceed grid.x_min")
    n = _num(g, "n", "grid.n", integer=True)
    if n < 8:
        raise ConfigError("grid.n", "must be >= 8")

    p = d["params"]
    _num(p, "hbar", "hbar", positive=True)
    _num(p, "mass", "mass", positive=True)

    t = d.get("time")
    if not isinstance(t, dict):
        raise ConfigError("time", "table is required")
    t0 = _num(t, "t0", "time.t0")
    t1 = _num(t, "t1", "time.t1")
    if not t1 > t0:
        raise ConfigError("time.t1", "must exceed time.t0")
    _num(t, "dt", "time.dt", positive=True)
    st = _num(t, "checkpoint_stride", "time.checkpoint_stride", integer=True)
    if st < 1:
        raise ConfigError("time.checkpoint_stride", "must be >= 1")
    cps = t.setdefault("checkpoints", [t0, t1])
    if not isinstance(cps, list) or not cps:
        raise ConfigError("time.checkpoints", "must be a non-empty list")
    for c in cps:
        if isinstance(c, bool) or not isinstance(c, (int, float)):
            raise ConfigError("time.checkpoints", f"entries must be numbers, got {c!r}")

    e = d["ensemble"]
    for key in ("n_paths", "record_stride", "n_bins", "jobs"):
        if _num(e, key, f"ensemble.{key}", integer=True) < 1:
            raise ConfigError(f"ensemble.{key}", "must be >= 1")
    e.setdefault("dt", t["dt"])
    _num(e, "dt", "ensemble.dt", positive=True)

    if kind == "quantum":
        pot = d.get("potential", {"kind": "free"})
        d["potential"] = pot
        if pot.get("kind") not in POTENTIALS:
            raise ConfigError("potential.kind", f"must be one of {POTENTIALS}")
        init = d.get("initial")
        if not isinstance(init, dict) or init.get("kind") not in QUANTUM_INITIAL:
            raise ConfigError("initial.kind", f"must be one of {QUANTUM_INITIAL}")
    else:
        th = d.get("thermo")
        if not isinstance(th, dict):
            raise ConfigError("thermo", "table is required for thermo scenarios")
        _num(th, "kT", "thermo.kT", positive=True)
        _num(th, "sigma_sq", "thermo.sigma_sq", positive=True)
        ham = d.get("hamiltonian", {"kind": "harmonic"})
        d["hamiltonian"] = ham
        if ham.get("kind") not in POTENTIALS:
            raise ConfigError("hamiltonian.kind", f"must be one of {POTENTIALS}")
        init = d.setdefault("initial", {"kind": "equilibrium"})
        if init.get("kind") not in THERMO_INITIAL:
            raise ConfigError("initial.kind", f"must be one of {THERMO_INITIAL}")

    m = d.get("measurement")
    if m is not None:
        if not isinstance(m, dict):
            raise ConfigError("measurement", "must be a table")
        mt = _num(m, "time", "measurement.time")
        if not t0 <= mt < t1:
            raise ConfigError("measurement.time", "must lie in [time.t0, time.t1)")
        if ("window" in m) == ("posterior_csv" in m):
            raise ConfigError("measurement", "give exactly one of window or posterior_csv")
        if "window" in m:
            w = m["window"]
            if not isinstance(w, list) or not w:
                raise ConfigError("measurement.window", "must be a list of [a, b] pairs")
            ivs = []
            for iv in w:
                if not isinstance(iv, list) or len(iv) != 2:
                    raise ConfigError("measurement.window", f"bad interval {iv!r}")
                a, b = (_endpoint(v, "measurement.window") for v in iv)
                if not a < b:
                    raise ConfigError("measurement.window", f"empty interval [{a}, {b}]")
                ivs.append([a, b])
            m["window"] = ivs
        else:
            pc = m["posterior_csv"]
            if not isinstance(pc, str):
                raise ConfigError("measurement.posterior_csv", "must be a path string")
            base = Path(source).parent if source and not source.startswith("<") else Path.cwd()
            m["posterior_csv"] = str((base / pc).resolve())
        if "smoothing" in m:
            _num(m, "smoothing", "measurement.smoothing", nonneg=True)
    if kind == "thermo" and m is None:
        raise ConfigError("measurement", "thermo scenarios need a measurement event")

    for k, v in d["checks"].items():
        if not isinstance(v, bool):
            raise ConfigError(f"checks.{k}", "must be true or false")
    for k, v in d["tolerances"].items():
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
            raise ConfigError(f"tolerances.{k}", "must be a positive number")
    return Scenario(name, kind, seed, d)


def load(path):
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("scenario", f"file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("scenario", f"cannot parse {path}: {exc}") from None
    return validate(raw, str(path))


def bundled():
    """Names and paths of the scenarios shipped with the package."""
    root = resources.files("stochmech") / "scenarios"
    return {p.name[:-5]: Path(str(p)) for p in sorted(root.iterdir(), key=lambda q: q.name)
            if p.name.endswith(".toml")}


def resolve(name_or_path):
    """A path to an existing file, or the name of a bundled scenario."""
    p = Path(name_or_path)
    if p.exists():
        return load(p)
    b = bundled()
    if name_or_path in b:
        return load(b[name_or_path])
    raise ConfigError("scenario", f"{name_or_path!r} is neither a file nor a bundled scenario "
                                  f"({', '.join(b)})")
