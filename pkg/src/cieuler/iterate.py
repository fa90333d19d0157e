"""One convex-integration step on a uniform time grid t_n = n dt.

Discrete conventions that make the level-(q+1) equation hold exactly
except for the oscillation term:

* d/dt is the centered difference D f(n) = (f(n+1) - f(n-1)) / (2 dt);
* every quadratic term uses one bilinear product Q(a, b), the pointwise
  product with 2/3-rule truncation of its output;
* transport and Nash terms are written in divergence form,
  (u.grad) w = div(w (x) u) and (w.grad) u = div(u (x) w);
* mollification is a Fourier multiplier in space and a fixed one-sided
  weighted sum over past slices in time, so it commutes with D, div and
  grad on the grid.

Every field is kept as spectral coefficients in the real-FFT layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional

import numpy as np

from .beltrami import geometric_coefficients
from .errors import AdmissibilityError, ContractError, StageError
from .noise import CutoffSeries
from .spectral import (PeriodicGrid, curl_hat, dealias_hat, div_hat, grad_hat, hminus1_norm_hat, inverse_divergence_hat,
                       leray_hat, to_physical, to_spectral)
from .transport import AdvectingField, eta_kj, solve_flow

TWO_PI_CUBED = (2 * math.pi) ** 3
EYE = np.eye(3)


# -- mollifiers --------------------------------------------------------------


def _bump(x):
    out = np.zeros_like(x)
    m = np.abs(x) < 1
    out[m] = np.exp(-1.0 / (1.0 - x[m] ** 2))
    return out


@lru_cache(maxsize=16)
def time_weights(substeps: int = 8):
    """One-sided weights on the past slices n-1 .. n-substeps+1 (support inside (0, ell))."""
    s = np.arange(1, substeps) / substeps
    w = _bump(2 * s - 1)
    return tuple(w / w.sum())


@lru_cache(maxsize=16)
def _space_multiplier_cached(N: int, ell: float):
    grid = PeriodicGrid(N)
    # radial bump phi(r) = exp(-1/(1-r^2)) on the unit ball, Fourier transform by Gauss-Legendre
    r, wq = np.polynomial.legendre.leggauss(400)
    r = 0.5 * (r + 1.0)
    wq = 0.5 * wq
    phi = _bump(r) * r ** 2
    mass = float((wq * phi).sum())
    kk = np.unique(grid.ksq)
    kap = ell * np.sqrt(kk)
    vals = np.array([float((wq * phi * np.sinc(kp * r / math.pi)).sum()) / mass for kp in kap])
    return np.interp(grid.ksq, kk, vals)  # exact at the sampled |k|^2 values


def space_multiplier(grid: PeriodicGrid, ell: float):
    return _space_multiplier_cached(grid.N, float(ell))


# -- products ----------------------------------------------------------------


def Q_hat(a, b, grid, sym=False):
    """Dealiased product a_i b_j from physical vectors, returned as (3, 3) coefficients."""
    out = np.empty((3, 3) + grid.shape_spec, dtype=complex)
    if sym:
        pairs = [(i, j) for i in range(3) for j in range(i, 3)]
        prods = np.stack([a[i] * b[j] for i, j in pairs])
        ph = dealias_hat(to_spectral(prods, grid), grid)
        for n, (i, j) in enumerate(pairs):
            out[i, j] = ph[n]
            out[j, i] = ph[n]
        return out
    prods = a[:, None] * b[None, :]
    return dealias_hat(to_spectral(prods, grid), grid)


def traceless_hat(T):
    tr = (T[0, 0] + T[1, 1] + T[2, 2]) / 3.0
    out = T.copy()
    for i in range(3):
        out[i, i] = out[i, i] - tr
    return out


def trace_hat(T):
    return T[0, 0] + T[1, 1] + T[2, 2]


def R_hat(vh, grid):
    """Inverse divergence after dropping the mean mode."""
    vh = vh.copy()
    vh[..., 0, 0, 0] = 0.0
    return inverse_divergence_hat(vh, grid, check=False)


def grad_scalar_hat(ph, grid):
    return grad_hat(ph, grid)


# -- level states ------------------------------------------------------------


@dataclass
class SliceFields:
    v: np.ndarray  # (3, ...) coefficients
    R: np.ndarray  # (3, 3, ...) traceless symmetric
    p: np.ndarray  # (...) scalar
    z: np.ndarray  # (3, ...) level-q noise z_q
    Q: Optional[np.ndarray] = None  # cached Q(u_q, u_q), u_q = v + z


class LevelState:
    """A level-q solution (v_q, R_q, p_q, z_q) addressable by slice index n."""

    q: int
    grid: PeriodicGrid
    dt: float
    member: int

    def slice(self, n: int) -> SliceFields:
        raise NotImplementedError

    def has(self, n: int) -> bool:
        raise NotImplementedError

    def energy(self, n: int) -> float:
        """||v_q + z_q||_{L^2}^2 at slice n."""
        s = self.slice(n)
        return l2_sq_hat(s.v + s.z, self.grid)


def l2_sq_hat(fh, grid):
    return TWO_PI_CUBED * float((grid.weight * np.abs(fh) ** 2).reshape(-1, *grid.shape_spec).sum())


def l2_inner_hat(fh, gh, grid):
    return TWO_PI_CUBED * float((grid.weight * (fh * np.conj(gh)).real).reshape(-1, *grid.shape_spec).sum())


class ColdStartState(LevelState):
    """v_0 = 0, R_0 = z_0 o z_0 - Rz_0, p_0 = -tr Q(z_0, z_0)/3."""

    def __init__(self, cut: CutoffSeries, dt: float, n_first: int, member: int = 0):
        self.q = 0
        self.cut = cut
        self.grid = cut.grid
        self.dt = dt
        self.n_first = n_first  # slice index of the first noise time
        self.n_last = n_first + len(cut.path.times) - 1
        self.member = member
        self._cache: Dict[int, SliceFields] = {}

    def has(self, n):
        return self.n_first <= n <= self.n_last

    def slice(self, n):
        if n in self._cache:
            return self._cache[n]
        if not self.has(n):
            raise StageError("mollify", f"cold start has no slice {n}")
        g = self.grid
        zh = self.cut.z_hat(n - self.n_first)
        z = to_physical(zh, g)
        Qz = Q_hat(z, z, g, sym=True)
        R = traceless_hat(Qz) - R_hat(zh, g)
        p = -trace_hat(Qz) / 3.0
        out = SliceFields(np.zeros_like(zh), R, p, zh, Qz)
        if len(self._cache) > 40:
            self._cache.pop(next(iter(self._cache)))
        self._cache[n] = out
        return out

    def energy(self, n):
        i = n - self.n_first
        return float(self.cut.chi[i] ** 2 * self.cut.path.energy(self.cut.K)[i])


class StoredState(LevelState):
    def __init__(self, q, grid, dt, member, slices: Dict[int, SliceFields], diagnostics=None):
        self.q, self.grid, self.dt, self.member = q, grid, dt, member
        self.slices = slices
        self.diagnostics = diagnostics or {}

    def has(self, n):
        return n in self.slices

    def slice(self, n):
        if n not in self.slices:
            raise StageError("mollify", f"level-{self.q} state has no slice {n}")
        return self.slices[n]


def level_residual(state: LevelState, n: int):
    """H^{-1} norm of D v - z + div Q(u, u) + grad p - div R at slice n, absolute and relative."""
    g = state.grid
    s = state.slice(n)
    sp, sm = state.slice(n + 1), state.slice(n - 1)
    Dv = (sp.v - sm.v) / (2 * state.dt)
    u = to_physical(s.v + s.z, g)
    divQ = div_hat(Q_hat(u, u, g, sym=True), g)
    gp = grad_hat(s.p, g)
    divR = div_hat(s.R, g)
    E = Dv - s.z + divQ + gp - divR
    parts = [hminus1_norm_hat(x, g) for x in (Dv, s.z, divQ, gp, divR)]
    scale = sum(parts)
    absval = hminus1_norm_hat(E, g)
    proj = hminus1_norm_hat(leray_hat(E, g), g)
    return {"abs": absval, "rel": absval / scale if scale > 0 else absval,
            "proj_rel": proj / scale if scale > 0 else proj, "scale": scale}


# -- configuration -----------------------------------------------------------


@dataclass
class StepConfig:
    lam: int  # lambda_{q+1}
    ell: float
    dt: float
    n_out: int = 4  # outputs at n = 0 .. n_out (plus one guard slice each side)
    N_flow: Optional[int] = None
    osc_form: str = "structured"  # or "divergence"
    cfl_fraction: float = 1.0
    c_star: Optional[float] = None
    k_window: int = 0

    @property
    def substeps(self):
        s = self.ell / self.dt
        if abs(s - round(s)) > 1e-9 or round(s) < 2:
            raise ContractError("ell must be an integer multiple (>= 2) of dt")
        return int(round(s))

    def output_slices(self):
        return list(range(-1, self.n_out + 2))

    def residual_slices(self):
        return list(range(0, self.n_out + 1))

    def flow_slices(self):
        return list(range(-self.substeps, self.n_out + 2))

    def history_needed(self):
        """Oldest level-q slice read by the step."""
        return self.flow_slices()[0] - self.substeps + 1


def desk_lambda(N: int, n_star: int) -> int:
    """Largest multiple of n_* strictly below one third of Nyquist (N/6)."""
    lam = (N // 6) // n_star * n_star
    while lam * 6 >= N:
        lam -= n_star
    if lam <= 0:
        raise ContractError(f"grid N={N} admits no multiple of n_*={n_star} below N/6")
    return lam


# -- mollification -----------------------------------------------------------


@dataclass
class Mollified:
    v: np.ndarray
    z: np.ndarray
    R: np.ndarray
    u: np.ndarray  # v + z, mollified
    R_com: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None


def mollify(state: LevelState, n: int, cfg: StepConfig, with_commutator: bool = True) -> Mollified:
    """Space-time mollification at slice n using only slices n-1 .. n-substeps+1."""
    g = state.grid
    w = time_weights(cfg.substeps)
    m = space_multiplier(g, cfg.ell)
    acc_v = acc_z = acc_R = acc_p = acc_Q = 0.0
    for i, wi in enumerate(w, start=1):
        if not state.has(n - i):
            raise StageError("mollify", f"insufficient history: slice {n - i} missing")
        s = state.slice(n - i)
        acc_v = acc_v + wi * s.v
        acc_z = acc_z + wi * s.z
        acc_R = acc_R + wi * s.R
        if with_commutator:
            acc_p = acc_p + wi * s.p
            if s.Q is None:
                uq = to_physical(s.v + s.z, g)
                s.Q = Q_hat(uq, uq, g, sym=True)
            acc_Q = acc_Q + wi * s.Q
    v, z, R = acc_v * m, acc_z * m, acc_R * m
    out = Mollified(v, z, R, v + z)
    if with_commutator:
        Qm = acc_Q * m
        ul = to_physical(out.u, g)
        Ql = Q_hat(ul, ul, g, sym=True)
        out.R_com = traceless_hat(Ql) - traceless_hat(Qm)
        out.p = acc_p * m - (trace_hat(Ql) - trace_hat(Qm)) / 3.0
    return out


# -- energy gap ----------------------------------------------------------------


def energy_gap(states: List[LevelState], e, q: int, schedule, slices, delta_next=None):
    """zeta_q(n) = [e(t)(1 - delta_{q+2}) - E||v_q + z_q||^2] / (3 (2pi)^3) per slice.

    Returns (zeta dict, info).  Raises StageError when zeta_q <= 0 anywhere.
    """
    if len(states) < 2:
        raise ContractError("energy_gap needs an ensemble of at least 2 members")
    d = float(schedule.delta(q + 2)) if delta_next is None else delta_next
    dt = states[0].dt
    zeta, info = {}, {"E_energy": {}, "se": {}}
    for n in slices:
        en = np.array([s.energy(n) for s in states])
        t = n * dt
        et = e(t) if callable(e) else float(e)
        zeta[n] = (et * (1 - d) - en.mean()) / (3 * TWO_PI_CUBED)
        info["E_energy"][n] = float(en.mean())
        info["se"][n] = float(en.std(ddof=1) / math.sqrt(len(en)))
        if zeta[n] <= 0:
            raise StageError("energy_gap", f"zeta_{q} <= 0 at t={t}")
        if q == 0 and en.mean() > et / 2:
            raise StageError("energy_gap", f"start condition E||z_0||^2 <= e/2 fails at t={t}")
    return zeta, info


def mollify_zeta(zeta: dict, n: int, substeps: int):
    w = time_weights(substeps)
    return sum(wi * zeta[n - i] for i, wi in enumerate(w, start=1))


# -- amplitudes and perturbation -------------------------------------------------


@dataclass
class SliceAmplitudes:
    rho: np.ndarray
    grad_rho: np.ndarray
    a: Dict[tuple, np.ndarray]  # (j, xi index in half set) -> a
    grad_a: Dict[tuple, np.ndarray]
    identity_residual: float
    amax: float


def amplitudes(R_hat_l, zeta_l: float, ell: float, t: float, cfg: StepConfig, grid: PeriodicGrid,
               coeffs=None, with_gradient: bool = True) -> SliceAmplitudes:
    """rho, a_(xi) = c_*^{-1/2} rho^{1/2} eta_{k,j} gamma_xi(Id - c_* R/rho) and their gradients."""
    coeffs = coeffs or geometric_coefficients()
    cs = cfg.c_star or coeffs.cStarComputed
    R = to_physical(R_hat_l, grid)
    Rn = np.sqrt(ell ** 2 + (R ** 2).sum(axis=(0, 1)))
    rho = Rn + cs * zeta_l
    if np.min(rho) < ell * (1 - 1e-12):
        raise AdmissibilityError("rho < ell: negative energy gap reached the amplitudes")
    S = EYE.reshape(3, 3, 1, 1, 1) - cs * R / rho
    gR = to_physical(grad_hat(R_hat_l, grid), grid) if with_gradient else None
    grad_rho = np.einsum("ij...,ijk...->k...", R, gR) / Rn if with_gradient else None
    a, ga = {}, {}
    recon = R - rho / cs * EYE.reshape(3, 3, 1, 1, 1)  # minus the target rho/c_* Id - R
    amax = 0.0
    half = 6
    for j in _active_windows(t, ell, cfg.k_window):
        eta = float(eta_kj(t, cfg.k_window, j, ell))
        alpha = j % 2
        gam = coeffs.gamma(S, alpha)  # (12, ...)
        M = coeffs.M[alpha]
        xs = coeffs.ds.as_float(alpha)
        if with_gradient:
            MR = np.einsum("nij,ij...->n...", M[:half], R)
            MgR = np.einsum("nij,ijk...->nk...", M[:half], gR)
        for n in range(half):
            an = cs ** -0.5 * np.sqrt(rho) * eta * gam[n]
            a[(j, n)] = an
            amax = max(amax, float(np.abs(an).max()))
            P = EYE - np.outer(xs[n], xs[n])
            # both +xi and -xi carry a^2/2 (Id - xi xi^T)
            recon += (an ** 2) * P.reshape(3, 3, 1, 1, 1)
            if with_gradient:
                gS = -cs * (MgR[n] / rho - MR[n] * grad_rho / rho ** 2)
                ggam = gS / (2 * gam[n])
                ga[(j, n)] = cs ** -0.5 * eta * (grad_rho * gam[n] / (2 * np.sqrt(rho)) + np.sqrt(rho) * ggam)
    scale = float(np.abs(rho / cs).max())
    ident = float(np.abs(recon).max()) / scale
    return SliceAmplitudes(rho, grad_rho, a, ga, ident, amax)


def _active_windows(t, ell, k=0):
    js = []
    jc = int(math.floor((t - k) / ell))
    for j in range(jc - 1, jc + 3):
        if float(eta_kj(t, k, j, ell)) != 0.0:
            js.append(j)
    return js


@dataclass
class SlicePerturbation:
    w_p: np.ndarray  # coefficients
    w: np.ndarray
    w_c: np.ndarray
    h_osc: Optional[np.ndarray] = None  # physical oscillation source
    p_osc: Optional[np.ndarray] = None  # coefficients
    w_c_closed_gap: float = float("nan")
    div_rel: float = float("nan")
    amp: Optional[SliceAmplitudes] = None


def _phase_data(atlas, j, t, grid, with_grad=True):
    win = atlas[j]
    Psi = win.psi(t, grid)
    if not with_grad:
        return Psi, None
    GPsi = win.grad_phi(t, grid) - EYE.reshape(3, 3, 1, 1, 1)
    return Psi, GPsi


def _plane_wave(kint, grid):
    # e^{i k.x} as an outer product of 1D exponentials
    x = grid.x
    e = [np.exp(1j * kint[c] * x) for c in range(3)]
    return e[0][:, None, None] * e[1][None, :, None] * e[2][None, None, :]


def perturbation(amp: SliceAmplitudes, atlas, t: float, cfg: StepConfig, grid: PeriodicGrid,
                 coeffs=None, with_oscillation: bool = True) -> SlicePerturbation:
    """w_p = sum a B e^{i lam xi.Phi}; w = curl(w_p)/lam spectrally; w_c = w - w_p.

    With ``with_oscillation`` also returns the pointwise oscillation source
    h = sum_{xi + xi' != 0} (W (x) W' - W.W'/2 Id) grad(G G') with
    G = a phi, evaluated through S1 - S2 plus the resonant-pair correction.
    """
    coeffs = coeffs or geometric_coefficients()
    lam = cfg.lam
    ds = coeffs.ds
    js = sorted({j for (j, _) in amp.a})
    phases = {}
    wp = np.zeros((3,) + grid.shape_phys)
    for j in js:
        alpha = j % 2
        Psi, GPsi = _phase_data(atlas, j, t, grid, with_grad=with_oscillation)
        kint = ds.integer_vectors(alpha, lam)
        xs = ds.as_float(alpha)
        B = ds.B(alpha)
        for n in range(6):
            ekx = _plane_wave(kint[n], grid)
            phi = np.exp(1j * lam * (xs[n][0] * Psi[0] + xs[n][1] * Psi[1] + xs[n][2] * Psi[2]))
            aW = amp.a[(j, n)] * ekx * phi
            phases[(j, n)] = (ekx, phi, GPsi)
            for c in range(3):
                wp[c] += 2.0 * (B[n][c] * aW).real
    wp_hat = to_spectral(wp, grid)
    w_hat = curl_hat(wp_hat, grid) / lam
    wc_hat = w_hat - wp_hat
    out = SlicePerturbation(wp_hat, w_hat, wc_hat, amp=amp)
    wnorm = float(np.abs(w_hat).max())
    out.div_rel = float(np.abs(div_hat(w_hat, grid)).max()) / wnorm if wnorm > 0 else 0.0
    if not with_oscillation:
        return out
    V = to_physical(wp_hat, grid)
    Dsum = np.zeros(grid.shape_phys, dtype=complex)
    WVG = np.zeros((3,) + grid.shape_phys, dtype=complex)
    VWG = np.zeros((3,) + grid.shape_phys, dtype=complex)
    pair = np.zeros((3,) + grid.shape_phys)
    wc_closed = np.zeros((3,) + grid.shape_phys, dtype=complex)
    asq = np.zeros(grid.shape_phys)
    for j in js:
        alpha = j % 2
        xs = ds.as_float(alpha)
        B = ds.B(alpha)
        for n in range(6):
            ekx, phi, GPsi = phases[(j, n)]
            a = amp.a[(j, n)]
            ga = amp.grad_a[(j, n)]
            W = B[n][:, None, None, None] * ekx  # B e^{i lam xi.x}
            # grad(a phi) = phi (grad a + i lam a (grad Psi)^T xi)
            gPsi_xi = np.einsum("ij...,i->j...", GPsi, xs[n])
            gG = phi * (ga + 1j * lam * a * gPsi_xi)
            WgG = (W * gG).sum(axis=0)
            Dsum += WgG
            WVG += W * (V * gG).sum(axis=0)
            VWG += (V * W).sum(axis=0) * gG
            pair += np.einsum("ij,j...->i...", np.outer(xs[n], xs[n]), 2 * a * ga)
            asq += a ** 2
            wc_closed += np.cross(gG, W, axis=0)
    # the -xi terms are complex conjugates of the +xi terms
    D = 2 * Dsum.real
    S1 = V * D + 2 * WVG.real
    S2 = 2 * VWG.real
    out.h_osc = S1 - S2 + pair
    p = 0.5 * (V ** 2).sum(axis=0) - asq + amp.rho / (cfg.c_star or coeffs.cStarComputed)
    out.p_osc = to_spectral(p, grid)
    closed = to_spectral(2 * wc_closed.real / lam, grid)
    denom = math.sqrt(l2_sq_hat(wc_hat, grid)) or 1.0
    out.w_c_closed_gap = math.sqrt(l2_sq_hat(closed - wc_hat, grid)) / denom
    return out


# -- Reynolds stress ----------------------------------------------------------------


TERM_NAMES = ("transport", "oscillation", "nash", "corrector", "commutator", "commutator1")


@dataclass
class SliceReynolds:
    terms: Dict[str, np.ndarray]
    total: np.ndarray
    p: np.ndarray
    sum_gap: float
    trace_rel: float
    cancellation_gap: float = float("nan")


def reynolds(n: int, mol: Dict[int, Mollified], pert: Dict[int, SlicePerturbation], z_next: Dict[int, np.ndarray],
             state: LevelState, cfg: StepConfig, grid: PeriodicGrid) -> SliceReynolds:
    g = grid
    dt = cfg.dt
    m = mol[n]
    P = pert[n]
    ul = to_physical(m.u, g)
    wp = to_physical(P.w_p, g)
    wc = to_physical(P.w_c, g)
    w = to_physical(P.w, g)
    Dwp = (pert[n + 1].w_p - pert[n - 1].w_p) / (2 * dt)
    Dwc = (pert[n + 1].w_c - pert[n - 1].w_c) / (2 * dt)
    # transport: D w_p + div(w_p (x) u_l); the means of D w_p and D w_c cancel since mean(w) = 0
    tr_src = Dwp + div_hat(Q_hat(wp, ul, g), g)
    R_tr = R_hat(tr_src, g)
    R_nash = R_hat(div_hat(Q_hat(ul, w, g), g), g)
    R_corr = R_hat(Dwc + div_hat(Q_hat(wc, ul, g), g), g)
    Qcc = Q_hat(wc, wc, g, sym=True)
    Qpc = Q_hat(wp, wc, g)
    Qcp = np.swapaxes(Qpc, 0, 1)
    R_corr = R_corr + traceless_hat(Qcc + Qpc + Qcp)
    p_corr = trace_hat(Qcc + Qpc + Qcp) / 3.0
    # oscillation
    if cfg.osc_form == "structured":
        h = dealias_hat(to_spectral(P.h_osc, g), g)
        R_osc = R_hat(h, g)
        p_osc = P.p_osc
    elif cfg.osc_form == "divergence":
        src = div_hat(Q_hat(wp, wp, g, sym=True) + m.R, g)
        p_osc = P.p_osc if P.p_osc is not None else trace_hat(Q_hat(wp, wp, g, sym=True)) / 3.0
        R_osc = R_hat(src - grad_hat(p_osc, g), g)
    else:
        raise ContractError(f"unknown oscillation form {cfg.osc_form!r}")
    # commutator1 with Z = z_{q+1} - z_l
    v1 = m.v + P.w
    Zh = z_next[n] - m.z
    v1p, Zp = to_physical(v1, g), to_physical(Zh, g)
    z1p, zlp = to_physical(z_next[n], g), to_physical(m.z, g)
    Qvz = Q_hat(v1p, Zp, g)
    C1 = Qvz + np.swapaxes(Qvz, 0, 1) + Q_hat(z1p, z1p, g, sym=True) - Q_hat(zlp, zlp, g, sym=True)
    R_c1 = traceless_hat(C1) - R_hat(Zh, g)
    p_c1 = trace_hat(C1) / 3.0
    terms = {"transport": R_tr, "oscillation": R_osc, "nash": R_nash, "corrector": R_corr,
             "commutator": m.R_com, "commutator1": R_c1}
    total = 0.0
    for name in TERM_NAMES:
        total = total + terms[name]
    rev = 0.0
    for name in reversed(TERM_NAMES):
        rev = rev + terms[name]
    scale = max(float(np.abs(total).max()), 1e-300)
    sum_gap = float(np.abs(total - rev).max()) / scale
    Tp = to_physical(total, g)
    trace_rel = float(np.abs(Tp[0, 0] + Tp[1, 1] + Tp[2, 2]).max()) / max(float(np.abs(Tp).max()), 1e-300)
    p1 = m.p - p_osc - p_corr - p_c1
    return SliceReynolds(terms, total, p1, sum_gap, trace_rel)


def cancellation_transport_gap(n, pert, amps, atlas, mol, cfg, grid, coeffs=None):
    """L^2 gap between D w_p + div(w_p (x) u) and sum (D_t a) B e^{i lam xi.Phi}, relative to the two terms."""
    coeffs = coeffs or geometric_coefficients()
    g = grid
    ds = coeffs.ds
    t = n * cfg.dt
    ul = to_physical(mol[n].u, g)
    out = np.zeros((3,) + g.shape_phys)
    psis = {}
    keys = set(amps[n - 1].a) | set(amps[n].a) | set(amps[n + 1].a)
    for (j, k) in sorted(keys):
        alpha = j % 2
        ap = amps[n + 1].a.get((j, k), 0.0)
        am = amps[n - 1].a.get((j, k), 0.0)
        Dta = (ap - am) / (2 * cfg.dt)
        if (j, k) in amps[n].grad_a:
            Dta = Dta + (ul * amps[n].grad_a[(j, k)]).sum(axis=0)
        if j not in psis:
            psis[j] = _phase_data(atlas, j, t, g, with_grad=False)[0]
        Psi = psis[j]
        kint = ds.integer_vectors(alpha, cfg.lam)[k]
        xs = ds.as_float(alpha)[k]
        ph = _plane_wave(kint, g) * np.exp(1j * cfg.lam * (xs[0] * Psi[0] + xs[1] * Psi[1] + xs[2] * Psi[2]))
        out += 2.0 * (Dta * ph * ds.B(alpha)[k][:, None, None, None]).real
    wp = to_physical(pert[n].w_p, g)
    Dwp = (pert[n + 1].w_p - pert[n - 1].w_p) / (2 * cfg.dt)
    adv = div_hat(Q_hat(wp, ul, g), g)
    gap = to_spectral(out, g) - Dwp - adv
    # scaled by the two pieces separately: their sum nearly cancels on the eta plateau
    den = (math.sqrt(l2_sq_hat(Dwp, g)) + math.sqrt(l2_sq_hat(adv, g))) or 1.0
    return math.sqrt(l2_sq_hat(gap, g)) / den


# -- the step ---------------------------------------------------------------------------


@dataclass
class StepResult:
    state: StoredState
    diagnostics: dict
    energy_terms: Dict[int, dict]
    terms: Optional[Dict[str, np.ndarray]] = None  # the six stress terms at slice 0, on request


def residual_next(n, v1, z1, R1, p1, dt, grid):
    g = grid
    Dv = (v1[n + 1] - v1[n - 1]) / (2 * dt)
    u = to_physical(v1[n] + z1[n], g)
    divQ = div_hat(Q_hat(u, u, g, sym=True), g)
    gp = grad_hat(p1[n], g)
    divR = div_hat(R1[n], g)
    E = Dv - z1[n] + divQ + gp - divR
    parts = [hminus1_norm_hat(x, g) for x in (Dv, z1[n], divQ, gp, divR)]
    scale = sum(parts)
    absval = hminus1_norm_hat(E, g)
    proj = hminus1_norm_hat(leray_hat(E, g), g)
    return {"abs": absval, "rel": absval / scale, "proj_rel": proj / scale, "scale": scale}


def step(state: LevelState, zeta: Dict[int, float], z_next: CutoffSeries, n_first_next: int,
         cfg: StepConfig, coeffs=None, diagnostics: bool = True, keep_terms: bool = False) -> StepResult:
    """Advance one ensemble member from level q to q+1 on slices n = 0 .. n_out.

    ``zeta`` holds the ensemble energy gap zeta_q on every slice the time
    mollifier reads.  ``z_next`` is the level-(q+1) cut-off noise of the
    same member, whose first time is slice ``n_first_next``.
    """
    g = state.grid
    coeffs = coeffs or geometric_coefficients()
    if cfg.lam % coeffs.ds.n_star:
        raise ContractError(f"lambda={cfg.lam} is not a multiple of n_*={coeffs.ds.n_star}")
    if 6 * cfg.lam >= g.N:
        raise ContractError("lambda_{q+1} must stay below one third of Nyquist")
    outs = cfg.output_slices()
    res = cfg.residual_slices()
    # mollified fields; the advecting field needs u_l back to the start of window j = 0
    mol = {}
    for n in cfg.flow_slices():
        mol[n] = mollify(state, n, cfg, with_commutator=n in res)
    field_ = AdvectingField(g, cfg.flow_slices()[0] * cfg.dt, cfg.dt,
                            np.stack([mol[n].u for n in cfg.flow_slices()]))
    times = np.array(cfg.flow_slices()) * cfg.dt
    js = sorted({j for n in outs for j in _active_windows(n * cfg.dt, cfg.ell, cfg.k_window)})
    atlas = {j: solve_flow(field_, cfg.k_window, j, cfg.ell, times, N_flow=cfg.N_flow,
                           cfl_fraction=cfg.cfl_fraction) for j in js}
    amps, pert = {}, {}
    for n in outs:
        zl = mollify_zeta(zeta, n, cfg.substeps)
        amps[n] = amplitudes(mol[n].R, zl, cfg.ell, n * cfg.dt, cfg, g, coeffs, with_gradient=n in res)
        pert[n] = perturbation(amps[n], atlas, n * cfg.dt, cfg, g, coeffs, with_oscillation=n in res)
    z1 = {n: z_next.z_hat(n - n_first_next) for n in outs}
    v1 = {n: mol[n].v + pert[n].w for n in outs}
    slices, R1, p1, rey = {}, {}, {}, {}
    for n in res:
        rey[n] = reynolds(n, mol, pert, z1, state, cfg, g)
        R1[n], p1[n] = rey[n].total, rey[n].p
    resid = {n: residual_next(n, v1, z1, R1, p1, cfg.dt, g) for n in res}
    for n in res:
        slices[n] = SliceFields(v1[n], R1[n], p1[n], z1[n])
    diag = {
        "residual": resid,
        "residual_max_rel": max(r["rel"] for r in resid.values()),
        "residual_max_proj_rel": max(r["proj_rel"] for r in resid.values()),
        "div_v_rel": max(_div_rel(v1[n], g) for n in res),
        "trace_rel": max(rey[n].trace_rel for n in res),
        "sum_gap": max(rey[n].sum_gap for n in res),
        "w_mean": max(float(np.abs(pert[n].w[:, 0, 0, 0]).max()) for n in outs),
        "identity_residual": max(a.identity_residual for a in amps.values()),
        "amp_max": max(a.amax for a in amps.values()),
        "w_c_closed_gap": max(pert[n].w_c_closed_gap for n in res),
        "term_norms": {name: max(math.sqrt(l2_sq_hat(rey[n].terms[name], g)) for n in res) for name in TERM_NAMES},
        "lambda": cfg.lam, "ell": cfg.ell, "dt": cfg.dt, "windows": js,
        "time_derivative": "centered-difference",
        "osc_form": cfg.osc_form,
        "flow_substeps": {j: atlas[j].substeps for j in js},
    }
    if diagnostics:
        diag["cancellation_gap"] = max(cancellation_transport_gap(n, pert, amps, atlas, mol, cfg, g, coeffs)
                                       for n in res)
    energy = {}
    for n in res:
        sq = state.slice(n)
        d = mol[n].v - sq.v + z1[n] - sq.z
        energy[n] = {
            "wp_sq": l2_sq_hat(pert[n].w_p, g),
            "three_zeta": 3 * TWO_PI_CUBED * zeta[n] if n in zeta else float("nan"),
            "corrector": l2_sq_hat(pert[n].w_c, g) + 2 * l2_inner_hat(pert[n].w_p, pert[n].w_c, g),
            "increment_sq": l2_sq_hat(d, g),
            "increment_cross": 2 * l2_inner_hat(d, sq.v + sq.z, g),
            "curl_term": 2 * l2_inner_hat(mol[n].v + z1[n], pert[n].w, g),
            "energy_next": l2_sq_hat(v1[n] + z1[n], g),
            "energy_prev": l2_sq_hat(sq.v + sq.z, g),
        }
    st = StoredState(state.q + 1, g, cfg.dt, state.member, slices, diag)
    return StepResult(st, diag, energy, dict(rey[0].terms) if keep_terms else None)


def _div_rel(vh, g):
    nv = float(np.abs(vh).max())
    return float(np.abs(div_hat(vh, g)).max()) / nv if nv > 0 else 0.0
