import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stochmech.core import Grid1D, PhysicalParams, ScalarPotential, harmonic_ground_state

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture
def params():
    return PhysicalParams()


@pytest.fixture
def grid():
    return Grid1D(-8.0, 8.0, 400)


@pytest.fixture
def harmonic(grid):
    return ScalarPotential.harmonic(grid)


@pytest.fixture
def ground(grid, params):
    return harmonic_ground_state(grid, params)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- shared simulations (session scoped; each takes a second or two) ----------

@pytest.fixture(scope="session")
def gs_setup():
    from stochmech.nelson import drift_series
    from stochmech.schrodinger import propagate

    p = PhysicalParams()
    g = Grid1D(-8.0, 8.0, 400)
    V = ScalarPotential.harmonic(g)
    psi0 = harmonic_ground_state(g, p)
    hist = propagate(psi0, V, 0.0, 2.0, 1e-3, 20, p)
    return p, g, V, hist, drift_series(hist, p)


@pytest.fixture(scope="session")
def gs_forward(gs_setup):
    from stochmech.core import born_density
    from stochmech.nelson import sample_forward

    p, g, V, hist, drifts = gs_setup
    return sample_forward(born_density(hist.frame(0)), drifts, p, 100_000, 1e-3, 2024,
                          record_stride=20)


@pytest.fixture(scope="session")
def free_setup():
    from stochmech.core import born_density, gaussian_wavefunction
    from stochmech.nelson import drift_series, sample_forward
    from stochmech.schrodinger import propagate

    p = PhysicalParams()
    g = Grid1D(-10.0, 10.0, 1001)
    V = ScalarPotential.free(g)
    hist = propagate(gaussian_wavefunction(g), V, 0.0, 1.0, 1e-3, 20, p)
    drifts = drift_series(hist, p)
    ens = sample_forward(born_density(hist.frame(0)), drifts, p, 100_000, 1e-3, 99,
                         record_stride=20)
    return p, g, V, hist, drifts, ens


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def accept():
    """Record one acceptance line; the test still asserts on ``ok`` itself."""
    def record(number, title, ok, detail=""):
        ACCEPTANCE[number] = (title, bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'} [{number:2d}] {title}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{n:2d}] {title}: {detail}")
