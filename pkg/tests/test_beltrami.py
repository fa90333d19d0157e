import math
from fractions import Fraction

import numpy as np
import pytest

from cieuler.beltrami import (averaging_reference, complex_curl, frame_vector, gamma_coeffs, geometric_coefficients,
                              hermitian_coefficients, make_direction_sets, measure_universal_M, superpose, wave)
from cieuler.errors import AdmissibilityError, ContractError
from cieuler.spectral import PeriodicGrid, grad, to_physical, to_spectral


def test_direction_sets_invariants():
    ds = make_direction_sets()
    assert ds.validate()
    assert ds.n_star % 5 == 0
    for alpha in (0, 1):
        S = set(ds.vectors(alpha))
        assert {tuple(-c for c in xi) for xi in S} == S


def test_single_wave_polarization():
    xi = (Fraction(1), Fraction(0), Fraction(0))
    A = (Fraction(0), Fraction(1), Fraction(0))
    B = (np.array([0, 1, 0]) + 1j * np.cross([1, 0, 0], [0, 1, 0])) / math.sqrt(2)
    assert np.allclose(B, np.array([0, 1, 1j]) / math.sqrt(2))
    assert np.allclose(1j * np.cross([1, 0, 0], B), B)
    grid = PeriodicGrid(16)
    W = wave(xi, 3, grid, A)
    assert np.allclose(W[:, 0, 0, 0], B)


def test_wave_is_curl_eigenfunction_and_conjugate_pairs():
    ds = make_direction_sets()
    grid = PeriodicGrid(32)
    lam = ds.n_star
    for xi in ds.vectors(0)[:6]:
        W = wave(xi, lam, grid, ds.frames[xi])
        assert np.abs(complex_curl(W) - lam * W).max() <= 1e-13 * lam
        neg = tuple(-c for c in xi)
        assert np.abs(wave(neg, lam, grid, ds.frames[neg]) - np.conj(W)).max() < 1e-15


def test_wave_contracts():
    grid = PeriodicGrid(16)
    xi = (Fraction(3, 5), Fraction(4, 5), Fraction(0))
    with pytest.raises(ContractError):
        wave(xi, 3, grid)
    with pytest.raises(ContractError):
        wave(xi, 20, grid)


def test_gamma_at_identity_is_half():
    gc = geometric_coefficients()
    for alpha in (0, 1):
        xs = gc.ds.as_float(alpha)
        # isotropy of the set: sum xi xi^T = 4 Id
        assert np.allclose(xs.T @ xs, 4 * np.eye(3))
        g = gamma_coeffs(np.eye(3), alpha)
        assert np.allclose(g, 0.5, atol=1e-15)
        # 1/2 * 1/4 * (12 Id - 4 Id) = Id
        assert np.allclose(gc.reconstruct(g, alpha), np.eye(3), atol=1e-15)


def test_gamma_outside_ball_rejected():
    gc = geometric_coefficients()
    R = np.eye(3)
    R[0, 0] += 2 * gc.cStarComputed
    with pytest.raises(AdmissibilityError):
        gc.gamma(R, 0)


def test_boundary_coefficients_nonnegative():
    gc = geometric_coefficients()
    rng = np.random.default_rng(3)
    worst = math.inf
    for _ in range(2000):
        S = rng.normal(size=(3, 3))
        S = (S + S.T) / 2
        S *= gc.cStarComputed / np.linalg.norm(S)
        for alpha in (0, 1):
            worst = min(worst, float(gc.c(np.eye(3) + S, alpha).min()))
    assert worst >= -1e-14


def test_universal_M():
    m0 = measure_universal_M(0, samples=500)
    assert m0 >= 6.0 - 1e-12
    assert math.isfinite(measure_universal_M(1, samples=500))
    assert measure_universal_M(1, radius=0.05, samples=500) <= measure_universal_M(1, radius=0.1, samples=500)


def test_beltrami_superposition_properties():
    ds = make_direction_sets()
    grid = PeriodicGrid(32)
    rng = np.random.default_rng(1)
    lam = ds.n_star
    for alpha in (0, 1):
        a = hermitian_coefficients(rng, alpha)
        W = superpose(a, alpha, lam, grid)
        assert np.abs(W.imag).max() <= 1e-13 * np.abs(W).max()
        Wr = W.real
        Wh = to_spectral(Wr, grid)
        div = sum(1j * grid.k[j] * Wh[j] for j in range(3))
        assert np.abs(div).max() < 1e-13 * np.abs(Wh).max()
        WW = Wr[:, None] * Wr[None, :]
        divWW = to_physical(sum(1j * grid.k[j] * to_spectral(WW[j], grid) for j in range(3)), grid)
        energy = 0.5 * (Wr ** 2).sum(axis=0)
        gap = np.abs(divWW - grad(energy, grid)).max()
        assert gap <= 1e-10 * np.abs(Wr).max() ** 2
        avg = WW.mean(axis=(-3, -2, -1))
        assert np.abs(avg - averaging_reference(a, alpha)).max() <= 1e-12 * np.abs(avg).max()


def test_frame_vector_orthonormal():
    for xi in make_direction_sets().vectors(1):
        A = frame_vector(xi)
        assert sum(a * x for a, x in zip(A, xi)) == 0
        assert sum(a * a for a in A) == 1
