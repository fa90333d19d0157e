import math

import numpy as np
import pytest

from cieuler.errors import ConfigError, ContractError
from cieuler.harness import RunConfig
from cieuler.noise import (GAUSSIAN_GROWTH, NoiseSpectrum, TimeGrid, coordinate_moment_fit, coords_to_hat,
                           gaussian_abs_moment, increment_report, lag_covariance_check, mode_basis, moment_report,
                           ou_transition, sample_ensemble, sample_ou_coords, sample_ou_path, smoothstep_cutoff,
                           truncate_and_cutoff, variance_check)
from cieuler.spectral import PeriodicGrid, div_hat, to_physical


def test_ou_transition_example():
    xi = np.array([0.3, -1.2])
    z = np.array([1.0, 2.0])
    out = ou_transition(z, 2.0, math.log(2), xi)
    assert np.allclose(out, z / 2 + math.sqrt(3) / 2 * xi, atol=1e-15)


def test_zero_spectrum_gives_zero_path():
    spec = NoiseSpectrum(c0=0.0)
    path = sample_ou_path(spec, TimeGrid(0.0, 0.1, 5), seed=1)
    assert not np.any(path.coords)
    grid = PeriodicGrid(16)
    assert not np.any(path.field(3, grid))


def test_trace_condition_enforced():
    with pytest.raises(ConfigError):
        sample_ou_path(NoiseSpectrum(s=3.5), TimeGrid(0.0, 0.1, 2), seed=0)


def test_determinism_independent_of_schedule():
    spec = NoiseSpectrum()
    tg = TimeGrid(0.0, 0.1, 4)
    a = list(sample_ensemble(spec, tg, 5, 3))
    b = sample_ou_path(spec, tg, 5, member=2)
    assert np.array_equal(a[2].coords, b.coords)
    coords = sample_ou_coords(spec, tg, 5, 3)
    assert np.array_equal(coords[1], a[1].coords)


def test_field_divergence_free_and_real():
    spec = NoiseSpectrum()
    grid = PeriodicGrid(16)
    path = sample_ou_path(spec, TimeGrid(0.0, 0.1, 2), seed=0)
    zh = path.field_hat(1, grid)
    assert np.abs(div_hat(zh, grid)).max() <= 1e-12 * np.abs(zh).max()
    z = to_physical(zh, grid)
    assert np.isrealobj(z)


def test_stationary_variance_and_lag():
    spec = NoiseSpectrum()
    basis = mode_basis(spec)
    X = sample_ou_coords(spec, TimeGrid(0.0, 0.5, 1), 3, 4000, select=[0, 1, 2, 3])
    ck = basis.coord_ck()[:4]
    for j in range(4):
        assert abs(variance_check(X[:, 0, j], ck[j] / 2)[2]) < 3.5
        assert abs(lag_covariance_check(X[:, 0, j], X[:, 1, j], ck[j] / 2 * math.exp(-0.5))[2]) < 3.5


def test_single_mode_energy_closed_form():
    # one coordinate set: the H^s norm reduces to (1+|k|^2)^{s/2} times the coordinate norm
    spec = NoiseSpectrum(K=1)
    basis = mode_basis(spec)
    path = sample_ou_path(spec, TimeGrid(0.0, 0.1, 1), seed=2)
    s = 2.5
    expect = np.sqrt(((1 + basis.coord_kabs() ** 2) ** s * path.coords ** 2).sum(axis=1))
    assert np.allclose(path.hs_norm(s), expect, rtol=1e-12)


def test_cutoff_ramp():
    lo, hi = 1.0, 3.0
    assert smoothstep_cutoff(0.0, lo, hi) == 1.0
    assert smoothstep_cutoff(3.5, lo, hi) == 0.0
    mid = smoothstep_cutoff(2.0, lo, hi)
    assert 0 < mid < 1
    x = np.linspace(0, 4, 2001)
    chi = smoothstep_cutoff(x, lo, hi)
    assert np.all(np.diff(chi) <= 0)
    assert np.abs(np.diff(chi) / np.diff(x)).max() <= 1.5 / (hi - lo) + 1e-9
    with pytest.raises(ContractError):
        smoothstep_cutoff(1.0, 2.0, 2.0)


def test_truncate_and_cutoff_desk():
    cfg = RunConfig.from_dict({})
    sched = cfg.schedule()
    grid = PeriodicGrid(16)
    path = sample_ou_path(NoiseSpectrum(), TimeGrid(0.0, 0.25, 4), seed=0)
    cs = truncate_and_cutoff(path, 0, sched, grid)
    assert cs.slope <= 1.0 + 1e-12
    # desk-scale noise is far below the band, so the cutoff is inactive
    assert np.all(cs.chi == 1.0)
    assert np.array_equal(cs.z_hat(2), cs.z_tilde_hat(2))
    with pytest.raises(ContractError):
        truncate_and_cutoff(path, 0, sched, grid, K=8)


def test_moment_report_growth_and_zero_spectrum():
    tg = TimeGrid(0.0, 0.25, 8)
    paths = list(sample_ensemble(NoiseSpectrum(K=2), tg, 0, 120))
    rep = moment_report(paths)
    # a norm over many Gaussian coordinates concentrates: growth stays below the sqrt(p-1) rate
    g = rep["table"]["H"]["growth"]
    assert 0 < g <= 1.0
    zero = list(sample_ensemble(NoiseSpectrum(c0=0.0, K=2), tg, 0, 100))
    rz = moment_report(zero)
    assert all(v == 0 for v in rz["table"]["H"]["moments"].values())
    with pytest.raises(ContractError):
        moment_report(paths[:10])


def test_gaussian_growth_oracle():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200000, 1))
    fit = coordinate_moment_fit(X)[0]
    assert fit == pytest.approx(GAUSSIAN_GROWTH, rel=0.05)
    assert gaussian_abs_moment(2) == pytest.approx(1.0)


def test_increment_report_identical_truncation():
    sched = RunConfig.from_dict({}).schedule()
    grid = PeriodicGrid(16)
    paths = list(sample_ensemble(NoiseSpectrum(), TimeGrid(0.0, 0.5, 2), 0, 3))
    rep = increment_report(paths, 0, sched, grid, K=3, K_next=3)
    assert rep["term_I"] == 0.0
    assert rep["term_II"] == 0.0  # both cutoffs are inactive at desk scale


def test_coords_to_hat_low_pass():
    spec = NoiseSpectrum()
    basis = mode_basis(spec)
    grid = PeriodicGrid(16)
    c = np.random.default_rng(0).normal(size=basis.ncoord)
    full = coords_to_hat(c, basis, grid)
    low = coords_to_hat(c, basis, grid, K=2)
    assert np.all(low[:, grid.kabs > 2 + 1e-9] == 0)
    assert np.allclose(low, full * (grid.kabs <= 2 + 1e-9))
