"""Parameter schedule and the exact inequality ledger.

All exponents are kept as ``Fraction`` so that every inequality is decided
without floating point.  Powers of the base ``a`` are represented by their
exponent in base ``a`` (``lambda_q = a ** b**q`` is stored as ``b**q``) and
only turned into integers or floats on request.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import mpmath

from .errors import ConfigError

TWO_PI_CUBED = (2 * math.pi) ** 3
ENERGY_FLOOR_FACTOR = 6 * 48


def as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    if isinstance(x, float):
        # floats enter only through configs; keep the exact binary value
        return Fraction(x)
    raise TypeError(f"cannot convert {x!r} to Fraction")


def integer_root(n: int, r: int) -> Optional[int]:
    """Return the exact integer r-th root of n, or None."""
    if n < 0 or r <= 0:
        return None
    if n in (0, 1) or r == 1:
        return n
    lo, hi = 0, 1 << (n.bit_length() // r + 1)
    while lo < hi:
        mid = (lo + hi) // 2
        if mid ** r < n:
            lo = mid + 1
        else:
            hi = mid
    return lo if lo ** r == n else None


def exact_power(a: int, e: Fraction) -> Optional[Fraction]:
    """a**e as an exact rational if it is one, else None."""
    if e == 0:
        return Fraction(1)
    root = integer_root(a, e.denominator)
    if root is None:
        return None
    num = abs(e.numerator)
    if num * max(root.bit_length(), 1) > 50_000_000:
        return None  # too large to materialize; caller falls back to intervals
    val = Fraction(root) ** num
    return val if e > 0 else 1 / val


def _power_interval(a: int, e: Fraction):
    iv = mpmath.iv
    return iv.exp(iv.mpf(e.numerator) / e.denominator * iv.log(iv.mpf(a)))


def compare_power_difference(a: int, x: Fraction, y: Fraction, rhs: Fraction = Fraction(1)) -> int:
    """Sign of (a**x - a**y - rhs), decided exactly.

    Uses exact integer roots when both powers are rational and certified
    interval arithmetic (with increasing precision) otherwise.
    """
    px, py = exact_power(a, x), exact_power(a, y)
    if px is not None and py is not None:
        d = px - py - rhs
        return (d > 0) - (d < 0)
    if x == y:
        return -1 if rhs > 0 else (0 if rhs == 0 else 1)
    iv = mpmath.iv
    saved = iv.prec
    try:
        prec = 128
        while prec <= 1 << 16:
            iv.prec = prec
            val = _power_interval(a, x) - _power_interval(a, y) - iv.mpf(rhs.numerator) / rhs.denominator
            if val.a > 0:
                return 1
            if val.b < 0:
                return -1
            prec *= 2
    finally:
        iv.prec = saved
    raise ArithmeticError("could not separate power difference from rhs")


@dataclass(frozen=True)
class EnergyBounds:
    upper: float  # e-bar
    lower: float  # e-underline
    slope: float  # bound on |e'|


@dataclass(frozen=True)
class ParameterSchedule:
    a: int
    b: int
    beta: Fraction
    gamma: Fraction
    sigma: Fraction
    r: Fraction
    L: float
    m: int
    alpha: Fraction
    cR: float
    cStar: float
    energy: EnergyBounds
    mode: str = "proof"
    M_universal: float = 0.0  # sum of C^n norms of the geometric coefficients
    M_bar: float = 1.0
    waivers: tuple = field(default_factory=tuple)

    # -- exponents in base a -------------------------------------------------
    def lam_exp(self, q: int) -> int:
        return self.b ** q

    def lam(self, q: int) -> int:
        """lambda_q as an exact integer."""
        return self.a ** self.lam_exp(q)

    def lam_float(self, q: int) -> float:
        return float(mpmath.power(self.a, self.lam_exp(q)))

    def log_lam(self, q: int) -> float:
        return self.lam_exp(q) * math.log(self.a)

    def delta(self, q: int) -> Fraction | float:
        """delta_q; exact for q <= 2, float view for q >= 3."""
        if q < 1:
            raise ValueError("delta_q is defined for q >= 1")
        if q == 1:
            return 3 * self.r * Fraction(self.L) * Fraction(self.L)
        if q == 2:
            return Fraction(1, 2)
        return 0.5 * math.exp(2 * float(self.beta) * (self.log_lam(2) - self.log_lam(q)))

    def delta_exp(self, q: int) -> Fraction:
        """log_a of 2*delta_q for q >= 2 (exact)."""
        return 2 * self.beta * (self.lam_exp(2) - self.lam_exp(q))

    def ell_exp(self, q: int) -> int:
        return -2 * self.lam_exp(q)

    def ell(self, q: int) -> float:
        return math.exp(-2 * self.log_lam(q))

    def f_exp(self, q: int) -> Fraction:
        return self.gamma * self.lam_exp(q + 1) / 8

    def f(self, q: int) -> int:
        """Noise truncation frequency lambda_{q+1}^{gamma/8}."""
        val = exact_power(self.a, self.f_exp(q))
        if val is None or val.denominator != 1:
            raise ValueError(f"f({q}) is not an integer for a={self.a}")
        return int(val)

    def f_float(self, q: int) -> float:
        return math.exp(float(self.f_exp(q)) * math.log(self.a))

    def cutoff_exps(self, q: int) -> tuple[Fraction, Fraction]:
        return self.gamma * self.lam_exp(q + 2), self.gamma * self.lam_exp(q + 3) / 4

    def cutoff_thresholds(self, q: int) -> tuple[float, float]:
        lo, hi = self.cutoff_exps(q)
        la = math.log(self.a)
        return math.exp(float(lo) * la), math.exp(float(hi) * la)

    def energy_floor(self) -> float:
        return ENERGY_FLOOR_FACTOR * TWO_PI_CUBED * self.L ** 2 / self.cR


def build_schedule(a, b, beta, gamma, sigma, r, L, m, alpha, cR, cStar, energy,
                   mode: str = "proof", M_universal: float = 0.0, M_bar: float = 1.0) -> ParameterSchedule:
    """Validate the scalar parameters and return an immutable schedule.

    In ``desk`` mode the integrality of a^{b gamma/8} is recorded as a waiver
    instead of raising, because desk-scale bases cannot satisfy it.
    """
    if mode not in ("proof", "desk"):
        raise ConfigError(f"unknown mode {mode!r}")
    a, b, m = int(a), int(b), int(m)
    beta, gamma, sigma, r, alpha = (as_fraction(v) for v in (beta, gamma, sigma, r, alpha))
    if not isinstance(energy, EnergyBounds):
        energy = EnergyBounds(*energy)
    if a < 2:
        raise ConfigError("a must be an integer >= 2")
    if b < 7:
        raise ConfigError("b must be >= 7")
    for name, v in (("beta", beta), ("gamma", gamma), ("alpha", alpha)):
        if not 0 < v < 1:
            raise ConfigError(f"{name} must lie in (0, 1)")
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    if r <= 1:
        raise ConfigError("r must be > 1")
    if L < 1:
        raise ConfigError("L must be >= 1")
    if not 0 < cR < cStar:
        raise ConfigError("need 0 < c_R < c_*")
    waivers = []
    fe = gamma * b / 8
    pw = exact_power(a, fe)
    if pw is None or pw.denominator != 1:
        if mode == "proof":
            raise ConfigError(f"a^(b*gamma/8) = {a}^({fe}) is not an integer")
        waivers.append("a^(b*gamma/8) integer")
    floor = ENERGY_FLOOR_FACTOR * TWO_PI_CUBED * L ** 2 / cR
    if energy.lower < floor * (1 - 1e-12):
        raise ConfigError(f"energy lower bound {energy.lower} below floor {floor}")
    if energy.upper < energy.lower:
        raise ConfigError("energy upper bound must be >= lower bound")
    return ParameterSchedule(a=a, b=b, beta=beta, gamma=gamma, sigma=sigma, r=r, L=float(L), m=m,
                             alpha=alpha, cR=float(cR), cStar=float(cStar), energy=energy, mode=mode,
                             M_universal=float(M_universal), M_bar=float(M_bar), waivers=tuple(waivers))


def suggested_gamma(b: int) -> Fraction:
    return Fraction(2, 9 * b ** 3)


def beta_cap(b: int, sigma) -> Fraction:
    sigma = as_fraction(sigma)
    return min(sigma / (78 * b ** 5), Fraction(2, 27 * b ** 4))


# ---------------------------------------------------------------------------
# ledger


@dataclass(frozen=True)
class LedgerItem:
    id: str
    lhs: Fraction
    rhs: Fraction
    verdict: str  # "pass", "fail" or "waived-at-desk-scale"
    source: str
    scale: str = "linear"  # "log_a" when both sides are exponents of a

    @property
    def passed(self) -> bool:
        return self.verdict != "fail"


@dataclass(frozen=True)
class LedgerReport:
    items: tuple
    mode: str

    @property
    def passed(self) -> bool:
        return all(it.passed for it in self.items)

    def failed_ids(self) -> set:
        return {it.id for it in self.items if it.verdict == "fail"}

    def verdicts(self) -> dict:
        return {it.id: it.verdict for it in self.items}

    def table(self) -> str:
        w = max(len(it.id) for it in self.items)
        lines = [f"{'id':<{w}}  {'lhs':>24}  {'rhs':>24}  verdict"]
        for it in self.items:
            lines.append(f"{it.id:<{w}}  {_fmt(it.lhs):>24}  {_fmt(it.rhs):>24}  {it.verdict}")
        lines.append(f"overall: {'pass' if self.passed else 'fail'} ({self.mode} mode)")
        return "\n".join(lines)

    def csv_rows(self) -> list:
        return [[it.id, str(it.lhs), str(it.rhs), it.verdict, it.source, it.scale] for it in self.items]


def _fmt(x: Fraction) -> str:
    if x.denominator == 1 or abs(x.denominator) < 10 ** 6:
        s = str(x)
        if len(s) <= 24:
            return s
    return f"{float(x):.6e}"


ID_GAMMA_BETA = "4b³γ+4b³β<1"
ID_BETA_GAMMA = "3bβ<γ"
ID_SIGMA = "2b²β+β<γσ/8"
ID_ALPHA = "4b³γ+4b³β+2bα<1"
ID_M_LOWER = "m>(2b+5)/(b−5)"
ID_M_LINEAR = "5m+2b+5<bm"
ID_BASE = "2<a^{(b/4−1)b²γ}"
ID_BETA_CAP = "β<min{σ/(78b⁵),2/(27b⁴)}"
ID_THETA_A = "ϑ<min{σ/(120·7⁵),1/(3·7⁵)}"
ID_THETA_B = "ϑ<min{σ/(73·62³),1/(7·62³)}"

LEDGER_IDS = (ID_GAMMA_BETA, ID_BETA_GAMMA, ID_SIGMA, ID_ALPHA, ID_M_LOWER, ID_M_LINEAR, ID_BASE, ID_BETA_CAP)

# items whose truth depends on the size of a (waived in desk mode)
A_DEPENDENT = frozenset({ID_BASE})


def _items_raw(s: ParameterSchedule):
    b, beta, gamma, sigma, alpha, m = s.b, s.beta, s.gamma, s.sigma, s.alpha, s.m
    yield ID_GAMMA_BETA, 4 * b ** 3 * gamma + 4 * b ** 3 * beta, Fraction(1), "parameter-choice", "linear"
    yield ID_BETA_GAMMA, 3 * b * beta, gamma, "parameter-choice", "linear"
    yield ID_SIGMA, 2 * b ** 2 * beta + beta, gamma * sigma / 8, "parameter-choice", "linear"
    yield ID_ALPHA, 4 * b ** 3 * gamma + 4 * b ** 3 * beta + 2 * b * alpha, Fraction(1), "stationary-phase-order", "linear"
    yield ID_M_LOWER, Fraction(m), Fraction(2 * b + 5, b - 5), "stationary-phase-order", "linear"
    yield ID_M_LINEAR, Fraction(5 * m + 2 * b + 5), Fraction(b * m), "stationary-phase-order", "linear"
    # 2 < a^e  <=>  log_a 2 < e ; compared exactly below
    yield ID_BASE, Fraction(1), (Fraction(b, 4) - 1) * b ** 2 * gamma, "parameter-choice", "log_a"
    yield ID_BETA_CAP, beta, beta_cap(b, sigma), "parameter-choice", "linear"


def _strict_less(item_id, lhs, rhs, a) -> bool:
    if item_id == ID_M_LOWER:
        return lhs > rhs
    if item_id == ID_BASE:
        # 2 < a^rhs, rhs = p/q > 0  <=>  2^q < a^p
        if rhs <= 0:
            return False
        return 2 ** rhs.denominator < a ** rhs.numerator
    return lhs < rhs


def verify_ledger(schedule: ParameterSchedule, perturb: Optional[dict] = None,
                  theta: Optional[Fraction] = None, order=None) -> LedgerReport:
    """Evaluate every inequality exactly.

    ``perturb`` maps an item id to a rational shift added to that item's
    left-hand side (for ``m>...`` it is subtracted, so a positive shift always
    pushes the item towards failure).  ``theta`` adds the two optional
    regularity-cap checks.  ``order`` permutes evaluation (used in tests).
    """
    perturb = perturb or {}
    raw = list(_items_raw(schedule))
    if theta is not None:
        th = as_fraction(theta)
        sg = schedule.sigma
        raw.append((ID_THETA_A, th, min(sg / (120 * 7 ** 5), Fraction(1, 3 * 7 ** 5)), "regularity-cap-a", "linear"))
        raw.append((ID_THETA_B, th, min(sg / (73 * 62 ** 3), Fraction(1, 7 * 62 ** 3)), "regularity-cap-b", "linear"))
    unknown = set(perturb) - {r[0] for r in raw}
    if unknown:
        raise KeyError(f"unknown ledger ids: {sorted(unknown)}")
    if order is not None:
        raw = [raw[i] for i in order]
    items = []
    for item_id, lhs, rhs, src, scale in raw:
        shift = as_fraction(perturb.get(item_id, 0))
        if item_id == ID_M_LOWER:
            lhs = lhs - shift
        elif item_id == ID_BASE:
            rhs = rhs - shift
        else:
            lhs = lhs + shift
        ok = _strict_less(item_id, lhs, rhs, schedule.a)
        if not ok and schedule.mode == "desk" and item_id in A_DEPENDENT:
            verdict = "waived-at-desk-scale"
        else:
            verdict = "pass" if ok else "fail"
        items.append(LedgerItem(item_id, lhs, rhs, verdict, src, scale))
    items.sort(key=lambda it: _ORDER.get(it.id, 99))
    return LedgerReport(tuple(items), schedule.mode)


_ORDER = {k: i for i, k in enumerate(LEDGER_IDS + (ID_THETA_A, ID_THETA_B))}


def item_margin(item: LedgerItem) -> Fraction:
    """Shift that makes the item fail (used by the perturbation tests)."""
    if item.id == ID_M_LOWER:
        return item.lhs - item.rhs
    if item.id == ID_BASE:
        return item.rhs  # drives the exponent to zero
    return item.rhs - item.lhs


def cutoff_gap_check(schedule: ParameterSchedule, q: int) -> bool:
    """1/(lambda_{q+3}^{gamma/4} - lambda_{q+2}^gamma) <= 1, decided exactly."""
    if q < 0:
        raise ValueError("q must be >= 0")
    lo, hi = schedule.cutoff_exps(q)
    if hi <= lo:
        return False
    return compare_power_difference(schedule.a, hi, lo, Fraction(1)) >= 0


def desk_cutoff_band(schedule: ParameterSchedule, q: int, max_slope: float = 1.0):
    """Cutoff band (lo, hi) for the smoothstep ramp whose peak slope is 1.5/(hi-lo).

    Returns (lo, hi, rescaled) where ``rescaled`` is True when the proof-scale
    band was too narrow for a slope <= max_slope and had to be widened.
    """
    lo, hi = schedule.cutoff_thresholds(q)
    width = hi - lo
    need = 1.5 / max_slope
    if width >= need:
        return lo, hi, False
    if schedule.mode == "proof":
        return lo, hi, False
    return lo, lo + need, True
