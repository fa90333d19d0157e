import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from cieuler import io
from cieuler.errors import ContractError
from cieuler.spectral import (PeriodicGrid, SpectralField, SpectralTensorField, curl, differentiate, div,
                              grad, holder_seminorm, hs_norm, inverse_divergence, inverse_divergence_field,
                              leray, leray_project, low_pass, low_pass_hat, lp_norm, norm, to_physical,
                              to_spectral, trace)

from conftest import random_field


def test_round_trip(grid16, rng):
    f = random_field(grid16, rng, kmax=7, mean_zero=False)
    back = to_physical(to_spectral(f, grid16), grid16)
    assert np.abs(back - f).max() <= 1e-13 * np.abs(f).max()


def test_leray_pure_gradient_vanishes(grid16):
    x1 = grid16.coords[0]
    v = grad(np.cos(x1), grid16)
    assert np.abs(leray(v, grid16)).max() < 1e-14


def test_leray_keeps_divergence_free_field(grid16):
    X = grid16.coords
    v = np.stack([np.sin(X[1]), np.sin(X[0]), np.zeros_like(X[0])])
    # every retained mode has k . v_hat = 0
    vh = to_spectral(v, grid16)
    kdot = sum(grid16.k[j] * vh[j] for j in range(3))
    assert np.abs(kdot).max() < 1e-15
    assert np.abs(leray(v, grid16) - v).max() < 1e-14


def test_leray_idempotent_self_adjoint(grid16, rng):
    u = random_field(grid16, rng)
    w = random_field(grid16, rng)
    Pu, Pw = leray(u, grid16), leray(w, grid16)
    assert np.abs(leray(Pu, grid16) - Pu).max() <= 1e-12 * np.abs(Pu).max()
    a, b = np.mean(Pu * w), np.mean(u * Pw)
    assert abs(a - b) <= 1e-12 * max(abs(a), np.mean(u * u))


def test_low_pass_examples(grid16, rng):
    X = grid16.coords
    f = np.cos(X[0]) + np.cos(2 * X[0] + 2 * X[1] + X[2])
    g = to_physical(low_pass_hat(to_spectral(f, grid16), grid16, 2), grid16)
    assert np.abs(g - np.cos(X[0])).max() < 1e-14
    h = random_field(grid16, rng, lead=())
    assert np.abs(to_physical(low_pass_hat(to_spectral(h, grid16), grid16, 0), grid16)).max() < 1e-15
    assert np.allclose(to_physical(low_pass_hat(to_spectral(h, grid16), grid16, 16), grid16), h, atol=1e-14)


def test_low_pass_composition(grid16, rng):
    fh = to_spectral(random_field(grid16, rng, kmax=7), grid16)
    two = low_pass_hat(low_pass_hat(fh, grid16, 3), grid16, 5)
    assert np.array_equal(two, low_pass_hat(fh, grid16, 3))


def test_inverse_divergence_closed_form(grid32):
    X = grid32.coords
    v = np.stack([np.sin(X[1]), 0 * X[0], 0 * X[0]])
    R = inverse_divergence(v, grid32)
    expect = np.zeros_like(R)
    expect[0, 1] = expect[1, 0] = -np.cos(X[1])
    assert np.abs(R - expect).max() < 1e-13
    assert np.abs(div(R, grid32) - v).max() < 1e-13


def test_inverse_divergence_zero_and_mean_error(grid16):
    assert not np.any(inverse_divergence(grid16.zeros(3), grid16))
    with pytest.raises(ContractError):
        inverse_divergence(np.ones((3,) + grid16.shape_phys), grid16)


def test_inverse_divergence_random(grid16, rng):
    v = random_field(grid16, rng)
    R = inverse_divergence(v, grid16)
    assert np.array_equal(R, np.swapaxes(R, 0, 1))
    assert np.abs(trace(R)).max() <= 1e-12 * np.abs(R).max()
    assert np.abs(div(R, grid16) - v).max() <= 1e-12 * np.abs(v).max()
    # L2 bound with a modest constant on random inputs
    assert lp_norm(R, grid16, 2) <= 4 * lp_norm(v, grid16, 2)


def test_typed_wrappers(grid16, rng):
    v = random_field(grid16, rng)
    fld = SpectralField.from_physical(v, grid16)
    assert np.allclose(fld.physical(), v, atol=1e-14)
    P = leray_project(fld)
    assert np.abs(div(P.physical(), grid16)).max() < 1e-12
    c = differentiate(fld, "curl")
    assert np.allclose(c.physical(), curl(v, grid16), atol=1e-12)
    T = inverse_divergence_field(fld)
    assert isinstance(T, SpectralTensorField)
    assert np.allclose(T.physical(), inverse_divergence(v, grid16), atol=1e-13)
    assert np.abs(low_pass(fld, 0).physical()).max() < 1e-15
    mz = SpectralField.from_physical(v, grid16, mean_zero=False)
    assert low_pass(mz, 2).mean_zero is False


def test_norms_single_mode():
    grid = PeriodicGrid(64)
    f = np.sin(grid.coords[0])
    assert norm(f, "C0", grid=grid) == pytest.approx(1.0, abs=1e-12)
    # one mode pair k = +-e1 with |f_hat|^2 = 1/4 each and weight (1+1)^1
    assert hs_norm(f, grid, 1) == pytest.approx(math.sqrt(2 * 0.25 * 2), rel=1e-12)
    assert lp_norm(f, grid, 2) == pytest.approx(1 / math.sqrt(2), rel=1e-12)


def test_holder_seminorm_of_sine():
    grid = PeriodicGrid(64)
    f = np.sin(grid.coords[0])
    ref = -minimize_scalar(lambda h: -2 * math.sin(h / 2) / math.sqrt(h), bounds=(1e-6, math.pi),
                           method="bounded").fun
    val, info = holder_seminorm(f, grid, 0.5)
    assert val == pytest.approx(ref, rel=0.01)
    assert info["pairs"] > 0
    with pytest.raises(ContractError):
        holder_seminorm(f, grid, 1.0)


def test_dump_round_trip(tmp_path, grid16, rng):
    v = random_field(grid16, rng)
    path = tmp_path / "v.cief"
    h = io.write_dump(path, v, rank=1)
    arr, rank, layout = io.read_dump(path)
    assert rank == 1 and layout == io.PHYSICAL
    assert np.array_equal(arr, v)
    assert h == io.file_hash(path)
