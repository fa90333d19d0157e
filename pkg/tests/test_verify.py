import math
from fractions import Fraction

import numpy as np
import pytest

from cieuler import harness, iterate, verify
from cieuler.beltrami import geometric_coefficients
from cieuler.errors import ContractError
from cieuler.spectral import PeriodicGrid, to_spectral

SCHED = harness.RunConfig.from_dict({}).schedule()


def zero_norms(slices=5, energy=0.0):
    z = [0.0] * slices
    return {"v_c0": z, "v_c1": z, "R_c0": z, "R_l1": z, "energy": [energy] * slices, "inc_c0": [], "inc_c1": [],
            "trace": 0.0, "asym": 0.0, "div": 0.0}


def test_every_id_reported_once():
    e = SCHED.energy_floor()
    rep = verify.inductive_report([zero_norms(), zero_norms()], SCHED, 0, e)
    assert sorted(rep.items) == sorted(verify.ESTIMATE_IDS)
    assert len(rep.rows()) == len(verify.ESTIMATE_IDS)
    with pytest.raises(ContractError):
        verify.InductiveReport(0, {})


def test_zero_velocity_passes_trivially():
    e = SCHED.energy_floor()
    rep = verify.inductive_report([zero_norms(), zero_norms()], SCHED, 0, e)
    for id_ in ("v_sup", "v_moment", "v_c1"):
        assert rep.items[id_].passed
    # noise off: E||v_0 + z_0||^2 = 0 <= e/2
    assert rep.items["energy_window"].passed and rep.items["energy_window"].mode == "assert"
    assert rep.passed


def test_asymptotic_ids_diagnose_outside_proof_mode():
    rep = verify.inductive_report([zero_norms(), zero_norms()], SCHED, 0, SCHED.energy_floor())
    modes = {k: it.mode for k, it in rep.items.items()}
    assert modes.pop("energy_window") == "assert"
    assert set(modes.values()) == {"diagnose"}


def test_trace_breach_flagged():
    bad = zero_norms()
    bad["trace"] = 1e-3
    rep = verify.inductive_report([bad, zero_norms()], SCHED, 0, SCHED.energy_floor())
    assert rep.breaches and not rep.passed


def test_energy_window_interval_at_level_one():
    e = 1000.0
    d = float(SCHED.delta(2))
    inside = zero_norms(energy=e - d * e)
    rep = verify.inductive_report([inside, inside], SCHED, 1, e)
    assert rep.items["energy_window"].passed
    outside = zero_norms(energy=e - 2 * d * e)
    rep = verify.inductive_report([outside, outside], SCHED, 1, e)
    assert not rep.items["energy_window"].passed


def energy_member(rng, n_slices=3, offset=0.0):
    out = {}
    for n in range(n_slices):
        out[n] = {"wp_sq": 10.0 + rng.normal() * 0.01, "three_zeta": 10.0, "corrector": 0.0, "increment_sq": 0.0,
                  "increment_cross": 0.0, "curl_term": 0.0, "energy_next": 50.0 + offset}
    return out


def test_energy_check_seeds_and_members(rng):
    mem = [energy_member(rng) for _ in range(3)]
    with pytest.raises(ContractError):
        verify.energy_check(mem, [(0, 1)] * 3, 100.0, SCHED, 0)
    with pytest.raises(ContractError):
        verify.energy_check(mem[:1], [(0, 0)], 100.0, SCHED, 0)
    rep = verify.energy_check(mem, [(0, 0)] * 3, 100.0, SCHED, 0)
    # e(1 - 1/2) - 50 = 0
    assert rep.total[0] == pytest.approx(0.0, abs=1e-12)
    assert rep.passed
    assert abs(rep.terms["principal"][0]) < 0.05
    far = [energy_member(rng, offset=30.0) for _ in range(3)]
    assert not verify.energy_check(far, [(0, 0)] * 3, 100.0, SCHED, 0).passed


def test_constant_amplitude_wp_energy_matches_trace_oracle():
    # int |w_p|^2 = (2pi)^3 sum |a_xi|^2 (trace of the averaging identity)
    gc = geometric_coefficients()
    grid = PeriodicGrid(16)
    err, mean, target = verify.constant_amplitude_mean(np.zeros((3, 3)), 0.2, gc.ds.n_star, grid)
    cs = gc.cStarComputed
    rho = 1.0 + cs * 0.2
    abar = cs ** -0.5 * math.sqrt(rho) * gc.gamma(np.eye(3), 0)
    assert np.trace(mean) == pytest.approx((abar ** 2).sum(), rel=1e-12)
    assert err < 1e-12


def test_bessel_cross_check():
    for k in (5, 10, 20):
        val = verify.oscillatory_integral_1d(lambda x: np.ones_like(x), lambda x: 0.2 * np.sin(x + 0.3), k)
        ref = verify.bessel_reference(k, 0.2, 0.3)
        assert abs(val - ref) < 1e-12


def test_probe_identity_map_is_orthogonal():
    gc = geometric_coefficients()
    xi = gc.ds.as_float(0)[0]
    ones = lambda x: np.ones_like(x)
    pr = verify.stationary_phase_probe([ones] * 3, verify.SeparableMap(), xi, [5, 10, 20], 3)
    assert max(pr["values"]) < 1e-13


def test_probe_smooth_amplitude_superalgebraic():
    gc = geometric_coefficients()
    xi = gc.ds.as_float(0)[0]
    smooth = lambda x: np.exp(np.cos(x))
    ones = lambda x: np.ones_like(x)
    lams = [5, 10, 15, 20]
    pr = verify.stationary_phase_probe([smooth, smooth, ones], verify.SeparableMap(), xi, lams, 6)
    vals = np.array(pr["values"])
    # spectral coefficient decay oracle: I_k(1) for the e^{cos x} Fourier coefficients
    from scipy.special import iv
    ref = [(2 * np.pi) ** 3 * iv(int(round(l * xi[0])), 1.0) * iv(int(round(l * xi[1])), 1.0) for l in lams]
    assert np.allclose(vals, ref, rtol=1e-8)
    assert pr["slope"] <= -6


def test_probe_contracts():
    xi = np.array([0.6, 0.8, 0.0])
    ones = lambda x: np.ones_like(x)
    with pytest.raises(ContractError):
        verify.stationary_phase_probe([ones] * 3, verify.SeparableMap((0.7, 0, 0)), xi, [5], 3)
    with pytest.raises(ContractError):
        verify.stationary_phase_probe([ones] * 3, verify.SeparableMap(), xi, [3], 3)


def test_ergodic_deterministic_field_identical_lags():
    times = np.arange(0, 20.01, 0.1)
    X = np.tile(np.linspace(1, 2, 5)[:, None], (1, len(times)))
    rep = verify.ergodic_average({"energy": X}, times, [0.5, 1, 2], [2, 4, 8, 16])
    for lag in (0.5, 1, 2):
        assert rep.stats["energy"][lag] == rep.stats["energy"][0.0]
        assert rep.lag_z["energy"][lag] == [0.0, 0.0]
    assert rep.lags_ok
    with pytest.raises(ContractError):
        verify.ergodic_average({"energy": X}, times, [0.5], [40])


def test_holder_report():
    with pytest.raises(ContractError):
        verify.holder_convergence_report([(1.0, 2.0)], SCHED)
    rep = verify.holder_convergence_report([(1.0, 10.0), (0.5, 8.0), (0.2, 6.0)], SCHED)
    assert rep["theta_ok"] and rep["monotone"]
    assert rep["beta_prime"] == rep["theta"] / 4 and rep["beta_second"] == 3 * rep["theta"] / 4
    rep0 = verify.holder_convergence_report([(1.0, 10.0), (0.5, 8.0)], SCHED, theta=0.0)
    assert rep0["increments"] == [1.0, 0.5]
    assert rep0["c0_reference"][1] == pytest.approx(SCHED.M_bar * math.sqrt(0.5))
    assert verify.theta_cap(1, 7) == Fraction(1, 120 * 7 ** 5)


def test_state_norms_of_zero_state():
    grid = PeriodicGrid(16)
    zh = np.zeros((3,) + grid.shape_spec, dtype=complex)
    st = iterate.StoredState(1, grid, 0.1, 0, {n: iterate.SliceFields(zh, np.zeros((3,) + zh.shape, complex),
                                                                     zh[0], zh) for n in range(-1, 3)})
    nm = verify.state_norms(st, [0, 1], previous=st)
    assert nm["v_c0"] == [0.0, 0.0] and nm["inc_c0"] == [0.0, 0.0]
    assert nm["trace"] == 0.0 and nm["div"] == 0.0
