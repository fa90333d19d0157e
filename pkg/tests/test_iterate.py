import math

import numpy as np
import pytest

from cieuler import harness, iterate
from cieuler.beltrami import geometric_coefficients
from cieuler.errors import ContractError, StageError
from cieuler.spectral import PeriodicGrid, c1_norm, div_hat, to_physical, to_spectral
from cieuler.transport import AdvectingField, solve_flow

TWO_PI_CUBED = (2 * math.pi) ** 3


def steady_state(grid, v, z=None, R=None, slices=range(-20, 8), dt=1 / 32):
    vh = to_spectral(v, grid)
    zh = np.zeros_like(vh) if z is None else to_spectral(z, grid)
    Rh = np.zeros((3,) + vh.shape, dtype=complex) if R is None else to_spectral(R, grid)
    ph = np.zeros(vh.shape[1:], dtype=complex)
    return iterate.StoredState(0, grid, dt, 0, {n: iterate.SliceFields(vh, Rh, ph, zh) for n in slices})


def zero_atlas(grid, cfg, js):
    nt = len(cfg.flow_slices())
    fld = AdvectingField(grid, cfg.flow_slices()[0] * cfg.dt, cfg.dt,
                         np.zeros((nt, 3) + grid.shape_spec, dtype=complex))
    times = np.array(cfg.flow_slices()) * cfg.dt
    return {j: solve_flow(fld, 0, j, cfg.ell, times) for j in js}


def test_time_weights_one_sided():
    w = np.array(iterate.time_weights(8))
    assert len(w) == 7 and np.all(w > 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)


def test_desk_lambda():
    assert iterate.desk_lambda(64, 5) == 10
    assert iterate.desk_lambda(32, 5) == 5
    with pytest.raises(ContractError):
        iterate.desk_lambda(16, 5)


def test_step_config_slices():
    cfg = iterate.StepConfig(lam=10, ell=0.25, dt=1 / 32)
    assert cfg.substeps == 8
    assert cfg.output_slices() == list(range(-1, 6))
    assert cfg.history_needed() == -15
    with pytest.raises(ContractError):
        iterate.StepConfig(lam=10, ell=0.25, dt=0.3).substeps


def test_mollify_constant_field_exact():
    grid = PeriodicGrid(16)
    v = np.array([0.4, -0.1, 0.25])[:, None, None, None] * np.ones((3,) + grid.shape_phys)
    st = steady_state(grid, v)
    cfg = iterate.StepConfig(lam=5, ell=0.25, dt=1 / 32)
    m = iterate.mollify(st, 0, cfg)
    assert np.abs(to_physical(m.v, grid) - v).max() < 1e-15
    assert np.abs(m.R_com).max() < 1e-15


def test_mollify_single_mode_bounds():
    grid = PeriodicGrid(32)
    X = grid.coords
    v = np.stack([np.sin(X[1]), np.cos(X[2]), 0 * X[0]])
    ell = 0.05
    cfg = iterate.StepConfig(lam=5, ell=ell, dt=ell / 8)
    st = steady_state(grid, v)
    m = iterate.mollify(st, 0, cfg)
    vl = to_physical(m.v, grid)
    c1 = max(c1_norm(v[i], grid) for i in range(3))
    c0 = float(np.abs(v).max())
    assert np.abs(vl - v).max() <= ell * c1
    assert np.abs(to_physical(m.R_com, grid)).max() <= 2 * ell * c1 * c0


def test_mollify_needs_history():
    grid = PeriodicGrid(16)
    st = steady_state(grid, np.zeros((3,) + grid.shape_phys), slices=range(-3, 2))
    cfg = iterate.StepConfig(lam=5, ell=0.25, dt=1 / 32)
    with pytest.raises(StageError):
        iterate.mollify(st, 0, cfg)


def test_energy_gap_noise_off():
    grid = PeriodicGrid(16)
    sched = harness.RunConfig.from_dict({}).schedule()
    K = sched.energy_floor()
    states = [steady_state(grid, np.zeros((3,) + grid.shape_phys)) for _ in range(2)]
    zeta, info = iterate.energy_gap(states, K, 0, sched, [0, 1])
    assert zeta[0] == pytest.approx(K / (6 * TWO_PI_CUBED), rel=1e-14)


def test_energy_gap_boundary_and_guards():
    grid = PeriodicGrid(16)
    sched = harness.RunConfig.from_dict({}).schedule()
    X = grid.coords
    v = np.stack([np.sin(X[1]), 0 * X[0], 0 * X[0]])
    states = [steady_state(grid, v) for _ in range(2)]
    E = states[0].energy(0)
    with pytest.raises(StageError):
        iterate.energy_gap(states, E / (1 - 0.25), 1, sched, [0], delta_next=0.25)
    with pytest.raises(StageError):
        iterate.energy_gap(states, 1.5 * E, 0, sched, [0])  # start condition E <= e/2
    with pytest.raises(ContractError):
        iterate.energy_gap(states[:1], 10 * E, 0, sched, [0])


def test_amplitudes_zero_stress():
    grid = PeriodicGrid(16)
    gc = geometric_coefficients()
    cfg = iterate.StepConfig(lam=5, ell=0.25, dt=1 / 32, c_star=gc.cStarComputed)
    R0 = np.zeros((3, 3) + grid.shape_spec, dtype=complex)
    t = 0.3
    amp = iterate.amplitudes(R0, 0.0, cfg.ell, t, cfg, grid, gc)
    assert np.allclose(amp.rho, cfg.ell, rtol=0, atol=1e-16)
    from cieuler.transport import eta_kj
    for (j, n), a in amp.a.items():
        expect = gc.cStarComputed ** -0.5 * math.sqrt(cfg.ell) * float(eta_kj(t, 0, j, cfg.ell)) * 0.5
        assert np.allclose(a, expect, rtol=1e-14)
    assert amp.identity_residual < 1e-14


def test_amplitudes_identity_random_stress(rng):
    from conftest import random_field
    grid = PeriodicGrid(16)
    gc = geometric_coefficients()
    cfg = iterate.StepConfig(lam=5, ell=0.25, dt=1 / 32, c_star=gc.cStarComputed)
    R = random_field(grid, rng, lead=(3, 3), kmax=3)
    R = 0.5 * (R + np.swapaxes(R, 0, 1))
    R -= np.eye(3)[:, :, None, None, None] * (R[0, 0] + R[1, 1] + R[2, 2]) / 3
    amp = iterate.amplitudes(to_spectral(R, grid), 0.5, cfg.ell, 0.4, cfg, grid, gc)
    assert amp.identity_residual <= 1e-10


def test_perturbation_identity_flow_constant_amplitude():
    grid = PeriodicGrid(32)
    gc = geometric_coefficients()
    cfg = iterate.StepConfig(lam=5, ell=0.25, dt=1 / 32, c_star=gc.cStarComputed)
    R0 = np.zeros((3, 3) + grid.shape_spec, dtype=complex)
    t = 0.0  # window center: a single active window with eta = 1
    amp = iterate.amplitudes(R0, 0.01, cfg.ell, t, cfg, grid, gc)
    atlas = zero_atlas(grid, cfg, sorted({j for j, _ in amp.a}))
    P = iterate.perturbation(amp, atlas, t, cfg, grid, gc)
    scale = np.abs(P.w_p).max()
    assert np.abs(P.w_c).max() <= 1e-13 * scale
    assert P.div_rel < 1e-10
    assert np.abs(P.w[:, 0, 0, 0]).max() < 1e-15


def test_commutator1_vanishes_when_noise_unchanged():
    grid = PeriodicGrid(32)
    gc = geometric_coefficients()
    cfg = iterate.StepConfig(lam=5, ell=0.25, dt=1 / 32, c_star=gc.cStarComputed)
    X = grid.coords
    z = 0.1 * np.stack([np.sin(X[1]), np.sin(X[2]), np.sin(X[0])])
    st = steady_state(grid, np.zeros_like(z), z=z)
    mol = {n: iterate.mollify(st, n, cfg) for n in (-1, 0, 1)}
    R0 = np.zeros((3, 3) + grid.shape_spec, dtype=complex)
    amps = {n: iterate.amplitudes(R0, 0.01, cfg.ell, n * cfg.dt, cfg, grid, gc) for n in (-1, 0, 1)}
    atlas = zero_atlas(grid, cfg, sorted({j for a in amps.values() for j, _ in a.a}))
    pert = {n: iterate.perturbation(amps[n], atlas, n * cfg.dt, cfg, grid, gc) for n in (-1, 0, 1)}
    rey = iterate.reynolds(0, mol, pert, {n: mol[n].z for n in (-1, 0, 1)}, st, cfg, grid)
    assert not np.any(rey.terms["commutator1"])
    assert rey.sum_gap < 1e-13


def test_cold_start_level_residual_is_zero():
    cfg = harness.RunConfig.from_dict({"grid": {"N": 32}, "noise": {"members": 2}})
    sched = cfg.schedule()
    grid = PeriodicGrid(32)
    scfg = harness.step_config(sched, cfg, 0)
    noise, n0 = harness.build_noise(cfg, sched, scfg, grid, members=1)
    st = iterate.ColdStartState(noise[0][1], scfg.dt, n0, 0)
    r = iterate.level_residual(st, 0)
    assert r["rel"] < 1e-12
    assert st.energy(0) > 0


def run_small_step(c0=None, N=32, members=2):
    over = {"grid": {"N": N}, "noise": {"members": members}}
    if c0 is not None:
        over["noise"]["c0"] = c0
    cfg = harness.RunConfig.from_dict(over)
    sched = cfg.schedule()
    grid = PeriodicGrid(N)
    scfg = harness.step_config(sched, cfg, 0)
    noise, n0 = harness.build_noise(cfg, sched, scfg, grid)
    states = [iterate.ColdStartState(c, scfg.dt, n0, m) for m, (_, c, _) in enumerate(noise)]
    e = cfg.energy_level(sched.energy_floor())
    zeta, _ = iterate.energy_gap(states, e, 0, sched, list(range(scfg.history_needed(), scfg.n_out + 2)))
    return [iterate.step(s, zeta, noise[m][2], -1, scfg, diagnostics=(m == 0)) for m, s in enumerate(states)]


def test_noise_off_degenerate_step():
    res = run_small_step(c0=0.0, members=2)
    d = res[0].diagnostics
    assert d["residual_max_rel"] <= 1e-3
    assert d["div_v_rel"] <= 1e-10
    assert d["sum_gap"] <= 1e-13
    # no noise: commutator1 only sees the (zero) noise increment
    assert d["term_norms"]["commutator1"] == 0.0


def test_small_noisy_step_structure():
    res = run_small_step(members=2)
    for r in res:
        d = r.diagnostics
        assert d["residual_max_rel"] <= 1e-3
        assert d["div_v_rel"] <= 1e-10
        assert d["trace_rel"] <= 1e-12
        assert d["sum_gap"] <= 1e-13
        assert d["w_mean"] <= 1e-12
        assert d["identity_residual"] <= 1e-10
        for n, sl in r.state.slices.items():
            assert np.abs(div_hat(sl.v, r.state.grid)).max() <= 1e-10 * np.abs(sl.v).max()
    assert "cancellation_gap" in res[0].diagnostics
    assert "cancellation_gap" not in res[1].diagnostics
