import csv
import filecmp
import json
import math
import shutil
import subprocess
import sys

import pytest

from stochmech import cli, config
from stochmech.errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

FREE = config.bundled()["free_gaussian"]


def free_raw():
    return tomllib.loads(FREE.read_text())


def small_toml(tmp_path, mass=None):
    # a lighter copy of the free packet; fewer paths need looser statistical tolerances
    s = FREE.read_text()
    s = s.replace("n_paths = 100000", "n_paths = 20000").replace("n_bins = 64", "n_bins = 32")
    s = s.replace("ensemble_variance_rel = 0.03",
                  "ensemble_variance_rel = 0.1\nborn_tv = 0.06\nduality_slope = 0.3")
    if mass is not None:
        s = s.replace("[potential]", f"[params]\nmass = {mass}\n\n[potential]")
    p = tmp_path / "small.toml"
    p.write_text(s)
    return p


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    sc = small_toml(base)
    out = base / "run1"
    assert cli.main(["run", "--scenario", str(sc), "--out", str(out)]) == 0
    return sc, out


def test_bundled_scenarios_validate():
    names = config.bundled()
    assert {"ground_state", "free_gaussian", "half_line_collapse", "thermo_half_line"} <= set(names)
    for path in names.values():
        sc = config.load(path)
        assert sc.name == path.stem


@pytest.mark.parametrize("edit, field", [
    (lambda d: d["params"].update(mass=-1.0), "mass"),
    (lambda d: d["grid"].update(n=3), "grid.n"),
    (lambda d: d["grid"].update(x_max=-20.0), "grid.x_max"),
    (lambda d: d["time"].update(dt=0), "time.dt"),
    (lambda d: d.update(kind="classical"), "kind"),
    (lambda d: d.update(seed=-1), "seed"),
    (lambda d: d["ensemble"].update(n_paths=1.5), "ensemble.n_paths"),
    (lambda d: d["tolerances"].update(born_tv=0), "tolerances.born_tv"),
    (lambda d: d.update(measurement={"time": 0.5, "window": [[1, 0]]}), "measurement.window"),
    (lambda d: d.update(measurement={"time": 5.0, "window": [[0, "inf"]]}), "measurement.time"),
])
def test_validation_names_field(edit, field):
    raw = free_raw()
    raw.setdefault("params", {"hbar": 1.0, "mass": 1.0})
    edit(raw)
    with pytest.raises(ConfigError) as info:
        config.validate(raw)
    assert info.value.field == field


def test_window_accepts_infinity_strings():
    raw = free_raw()
    raw["measurement"] = {"time": 0.5, "window": [["-inf", 0.0]]}
    sc = config.validate(raw)
    assert sc.data["measurement"]["window"] == [[-math.inf, 0.0]]


def test_cli_config_error_exit(tmp_path, capsys):
    sc = small_toml(tmp_path, mass=-1.0)
    assert cli.main(["run", "--scenario", str(sc), "--out", str(tmp_path / "o")]) == 2
    assert "mass" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_cli_unknown_scenario(tmp_path):
    assert cli.main(["run", "--scenario", "nope", "--out", str(tmp_path / "o")]) == 2


def test_list_scenarios(capsys):
    assert cli.main(["list-scenarios"]) == 0
    out = capsys.readouterr().out
    for name in config.bundled():
        assert name in out


def test_run_writes_report(small_run):
    sc, out = small_run
    rep = json.loads((out / "report.json").read_text())
    assert rep["passed"]
    names = {c["name"] for c in rep["checks"]}
    assert {"norm", "born", "duality", "lagrange", "lagrange_negative_control"} <= names


def test_rerun_is_byte_identical(small_run, tmp_path):
    sc, out = small_run
    again = tmp_path / "again"
    assert cli.main(["run", "--scenario", str(sc), "--out", str(again), "--jobs", "3"]) == 0
    cmp = filecmp.dircmp(out, again)

    def same(c):
        assert not c.left_only and not c.right_only
        _, mismatch, errors = filecmp.cmpfiles(c.left, c.right, c.common_files, shallow=False)
        assert not mismatch and not errors, mismatch
        for sub in c.subdirs.values():
            same(sub)

    same(cmp)


def test_verify_matches_run(small_run, capsys):
    sc, out = small_run
    capsys.readouterr()
    assert cli.main(["verify", str(out), "--json"]) == 0
    verified = json.loads(capsys.readouterr().out)
    assert verified == json.loads((out / "report.json").read_text())


def test_verify_missing_file(small_run, tmp_path, capsys):
    sc, out = small_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    (copy / "frames" / "psi_00010.csv").unlink()
    assert cli.main(["verify", str(copy)]) == 3
    assert "psi_00010" in capsys.readouterr().err


def test_verify_detects_tampering(small_run, tmp_path):
    sc, out = small_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    path = copy / "ensembles" / "forward.csv"
    with path.open() as fh:
        rows = list(csv.reader(fh))
    # doubling the variance of every recorded position breaks the Born check
    for r in rows[1:]:
        r[2] = repr(float(r[2]) * math.sqrt(2))
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    assert cli.main(["verify", str(copy)]) == 1
    from stochmech import runner
    rep = runner.verify(copy)
    born = next(c for c in rep["checks"] if c["name"] == "born")
    assert not born["passed"]


def test_export_plot_data(small_run, tmp_path, capsys):
    sc, out = small_run
    dest = tmp_path / "plot.csv"
    assert cli.main(["export-plots-data", str(out), "--out", str(dest)]) == 0
    with dest.open() as fh:
        rows = list(csv.DictReader(fh))
    assert set(rows[0]) == {"series", "t", "x", "value"}
    assert len({r["series"] for r in rows}) >= 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "stochmech", "list-scenarios"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "ground_state" in r.stdout
