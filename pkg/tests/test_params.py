import random
from fractions import Fraction

import pytest

from cieuler.errors import ConfigError
from cieuler.harness import RunConfig
from cieuler.params import (ID_BASE, ID_BETA_GAMMA, ID_GAMMA_BETA, ID_M_LOWER, LEDGER_IDS, EnergyBounds,
                            beta_cap, build_schedule, compare_power_difference, cutoff_gap_check,
                            desk_cutoff_band, exact_power, item_margin, suggested_gamma, verify_ledger)

PROOF_A = 2 ** 1764  # 2^(36*49): makes a^(b*gamma/8) an integer for b=7, gamma=2/3087


def schedule(a=2, mode="desk", beta=None, gamma=None, b=7, m=10, sigma=1):
    gamma = suggested_gamma(b) if gamma is None else gamma
    beta = beta_cap(b, sigma) / 2 if beta is None else beta
    cR, cStar = 0.1, 0.2
    floor = 6 * 48 * (2 * 3.141592653589793) ** 3 / cR
    return build_schedule(a, b, beta, gamma, sigma, 2, 1.0, m, Fraction(1, 1000), cR, cStar,
                          EnergyBounds(2 * floor, floor, 1.0), mode=mode)


def test_lambda_and_delta_values():
    s = schedule()
    assert s.lam(1) == 128
    assert s.delta(2) == Fraction(1, 2)
    assert suggested_gamma(7) == Fraction(2, 3087)


def test_sequences_monotone():
    s = schedule(a=PROOF_A, mode="proof")
    lams = [s.lam_exp(q) for q in range(6)]
    assert all(x < y for x, y in zip(lams, lams[1:]))
    dexp = [s.delta_exp(q) for q in range(2, 7)]  # delta_q = a^{delta_exp}/2 for q >= 2
    assert all(x > y for x, y in zip(dexp, dexp[1:]))


def test_truncation_frequency_integral_in_proof_mode():
    s = schedule(a=PROOF_A, mode="proof")
    for q in range(5):
        assert isinstance(s.f(q), int) and s.f(q) >= 1


def test_proof_mode_rejects_non_integral_frequency():
    with pytest.raises(ConfigError):
        schedule(a=2, mode="proof")
    assert "a^(b*gamma/8) integer" in schedule(a=2, mode="desk").waivers


def test_build_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        schedule(b=6)
    with pytest.raises(ConfigError):
        build_schedule(2, 7, Fraction(1, 10 ** 7), suggested_gamma(7), 1, 2, 1.0, 10, Fraction(1, 1000),
                       0.1, 0.2, EnergyBounds(1.0, 1.0, 1.0), mode="desk")


def test_ledger_passes_for_default_choice():
    rep = verify_ledger(schedule(a=PROOF_A, mode="proof"))
    assert rep.passed
    assert [it.id for it in rep.items] == list(LEDGER_IDS)


def test_ledger_example_gamma_beta():
    s = schedule(beta=Fraction(1, 10 ** 7))
    item = next(it for it in verify_ledger(s).items if it.id == ID_GAMMA_BETA)
    assert item.lhs == Fraction(2744, 3087) + 4 * 343 * Fraction(1, 10 ** 7)
    assert item.verdict == "pass"


def test_m_threshold():
    s = schedule()
    item = next(it for it in verify_ledger(s).items if it.id == ID_M_LOWER)
    assert item.rhs == Fraction(19, 2)
    assert item.verdict == "pass"
    assert next(it for it in verify_ledger(schedule(m=9)).items if it.id == ID_M_LOWER).verdict == "fail"


def test_beta_equal_gamma_fails_its_id():
    g = suggested_gamma(7)
    rep = verify_ledger(schedule(beta=g, gamma=g))
    assert ID_BETA_GAMMA in rep.failed_ids()


def test_base_item_waived_at_desk_scale():
    rep = verify_ledger(schedule(a=2))
    item = next(it for it in rep.items if it.id == ID_BASE)
    assert item.verdict == "waived-at-desk-scale"


@pytest.mark.parametrize("item_id", LEDGER_IDS)
def test_single_perturbation_fails_only_its_id(item_id):
    s = schedule(a=PROOF_A, mode="proof")
    base = {it.id: it for it in verify_ledger(s).items}
    rep = verify_ledger(s, perturb={item_id: item_margin(base[item_id])})
    assert rep.failed_ids() == {item_id}


def test_ledger_order_independent():
    s = schedule(a=PROOF_A, mode="proof")
    ref = verify_ledger(s).verdicts()
    order = list(range(len(LEDGER_IDS)))
    rnd = random.Random(7)
    for _ in range(5):
        rnd.shuffle(order)
        assert verify_ledger(s, order=order).verdicts() == ref


def test_theta_items():
    s = schedule(a=PROOF_A, mode="proof")
    assert verify_ledger(s, theta=Fraction(1, 10 ** 8)).passed
    assert not verify_ledger(s, theta=Fraction(1, 100)).passed


def test_cutoff_gap():
    assert cutoff_gap_check(schedule(a=PROOF_A, mode="proof"), 0)
    assert not cutoff_gap_check(schedule(a=2), 0)


def test_desk_band_widened_to_unit_slope():
    s = schedule(a=2)
    lo, hi, rescaled = desk_cutoff_band(s, 0)
    assert rescaled and 1.5 / (hi - lo) == pytest.approx(1.0)


def test_exact_power_helpers():
    assert exact_power(8, Fraction(2, 3)) == 4
    assert exact_power(2, Fraction(1, 2)) is None
    # 2^(3/2) - 2^1 = 0.828... < 1
    assert compare_power_difference(2, Fraction(3, 2), Fraction(1), Fraction(1)) < 0
    assert compare_power_difference(4, Fraction(3, 2), Fraction(1), Fraction(1)) > 0


def test_energy_floor_enforced():
    cfg = RunConfig.from_dict({})
    s = cfg.schedule()
    assert s.energy.lower >= s.energy_floor() * (1 - 1e-12)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"energy": {"K": s.energy_floor() / 2}}).schedule()
