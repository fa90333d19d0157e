import numpy as np
import pytest

from cieuler.spectral import PeriodicGrid, to_physical, to_spectral


def random_field(grid, rng, lead=(3,), kmax=None, mean_zero=True):
    """Smooth random real field; spectrum limited to |k| <= kmax (default: Nyquist/3)."""
    f = rng.normal(size=lead + grid.shape_phys)
    fh = to_spectral(f, grid)
    kmax = grid.N // 3 if kmax is None else kmax
    fh *= grid.kabs <= kmax
    if mean_zero:
        fh[..., 0, 0, 0] = 0.0
    return to_physical(fh, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def grid16():
    return PeriodicGrid(16)


@pytest.fixture(scope="session")
def grid32():
    return PeriodicGrid(32)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
