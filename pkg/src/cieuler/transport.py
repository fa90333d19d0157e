"""Time cutoffs eta_{k,j} and backward-characteristic flow maps.

A flow map Phi_{k,j} solves d_t Phi + u . grad Phi = 0 on
[k + (j-1) ell, k + (j+1) ell] with Phi = x at the left end.  Phi(t, x)
is the foot at the window start of the characteristic through (t, x), so
each slice is computed by integrating dX/ds = u(s, X) backward in time
with classical RK4, evaluating u at off-grid points by direct Fourier
summation on its retained modes.  Only the periodic displacement
Psi = Phi - x is stored, in spectral form on a (possibly coarse) flow grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._accel import fourier_eval
from .errors import CFLError, ContractError
from .spectral import PeriodicGrid, _pointwise_abs, cn_norm, grad_hat, to_physical, to_spectral

ETA_PLATEAU = 0.25
ETA_SUPPORT = 0.75


def _smootherstep(u):
    # C^2 ramp from 0 to 1 on [0, 1]
    u = np.clip(u, 0.0, 1.0)
    return u ** 3 * (u * (6 * u - 15) + 10)


def eta_raw(s):
    a = np.abs(np.asarray(s, dtype=float))
    return _smootherstep((ETA_SUPPORT - a) / (ETA_SUPPORT - ETA_PLATEAU))


def eta(s):
    """Normalized profile: sum over integer shifts of eta^2 is exactly 1 up to rounding."""
    s = np.asarray(s, dtype=float)
    raw = eta_raw(s)
    norm = sum(eta_raw(s - n) ** 2 for n in (-2, -1, 0, 1, 2))
    return np.where(raw > 0, raw / np.sqrt(np.where(raw > 0, norm, 1.0)), 0.0)


def window_indices(ell):
    return range(0, int(math.ceil(1.0 / ell - 1e-12)) + 1)


def eta_kj(t, k, j, ell):
    return eta((np.asarray(t, dtype=float) - k) / ell - j)


def partition_weights(t, k, ell, tol=1e-12):
    """Nonzero (j, eta_{k,j}(t)) pairs for t in [k, k+1]."""
    if not k - tol <= t <= k + 1 + tol:
        raise ContractError(f"t={t} outside window [{k}, {k + 1}]")
    out = []
    for j in window_indices(ell):
        w = float(eta_kj(t, k, j, ell))
        if w != 0.0:
            out.append((j, w))
    return out


# -- advecting field container -----------------------------------------------


@dataclass
class AdvectingField:
    """Spectral samples u_hat (nt, 3, N, N, N//2+1) on a uniform time grid."""

    grid: PeriodicGrid
    t0: float
    dt: float
    u_hat: np.ndarray
    mode_tol: float = 1e-13

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.u_hat.shape[0])

    def covers(self, a, b, tol=1e-9):
        t = self.times
        return t[0] <= a + tol and b <= t[-1] + tol

    def retained_modes(self):
        """Integer wavevectors and half-spectrum weights of modes that are ever nonzero."""
        if getattr(self, "_modes", None) is not None:
            return self._modes
        amp = np.abs(self.u_hat).max(axis=(0, 1))
        top = amp.max()
        sel = amp > self.mode_tol * top if top > 0 else np.zeros_like(amp, dtype=bool)
        idx = np.argwhere(sel)
        k1, k2, k3 = self.grid.k
        kv = np.stack([k1[idx[:, 0], 0, 0], k2[0, idx[:, 1], 0], k3[0, 0, idx[:, 2]]], axis=1)
        wt = np.where(idx[:, 2] > 0, 2.0, 1.0)
        self._modes = (kv, idx, wt)
        return self._modes

    def coefficients_at(self, s):
        """(m, 3) retained-mode coefficients at time s, cubic Lagrange in time."""
        kv, idx, wt = self.retained_modes()
        nt = self.u_hat.shape[0]
        x = (s - self.t0) / self.dt
        i0 = int(math.floor(x + 1e-12))
        if abs(x - round(x)) < 1e-12 and 0 <= round(x) < nt:
            sl = self.u_hat[int(round(x))]
            return (sl[:, idx[:, 0], idx[:, 1], idx[:, 2]] * wt).T
        lo = min(max(i0 - 1, 0), max(nt - 4, 0))
        nodes = list(range(lo, min(lo + 4, nt)))
        coef = 0.0
        for a in nodes:
            la = 1.0
            for b in nodes:
                if b != a:
                    la *= (x - b) / (a - b)
            sl = self.u_hat[a]
            coef = coef + la * sl[:, idx[:, 0], idx[:, 1], idx[:, 2]]
        return (coef * wt).T

    def sup_norm(self):
        return max(float(_pointwise_abs(to_physical(self.u_hat[i], self.grid)).max())
                   for i in range(self.u_hat.shape[0]))

    def c0c1_norm(self):
        """sup over time slices of sup|u| + sup|grad u|."""
        best = 0.0
        for i in range(self.u_hat.shape[0]):
            uh = self.u_hat[i]
            val = float(_pointwise_abs(to_physical(uh, self.grid)).max()
                        + _pointwise_abs(to_physical(grad_hat(uh, self.grid), self.grid)).max())
            best = max(best, val)
        return best

    def max_wavenumber(self):
        kv, _, _ = self.retained_modes()
        return int(np.abs(kv).max()) if len(kv) else 0


# -- flow maps ---------------------------------------------------------------


@dataclass
class FlowWindow:
    k: int
    j: int
    ell: float
    t_start: float
    t_end: float
    times: np.ndarray
    flow_grid: PeriodicGrid
    psi_hat: np.ndarray  # (nt, 3, Nf, Nf, Nf//2+1)
    substeps: list = field(default_factory=list)

    def contains(self, t, tol=1e-9):
        return self.t_start - tol <= t <= self.t_end + tol

    def slice_index(self, t, tol=1e-9):
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > tol:
            raise ContractError(f"flow map {self.k},{self.j} has no slice at t={t}")
        return i

    def _lift(self, fh, grid):
        """Zero-pad coarse coefficients onto a finer grid (spectral interpolation)."""
        Nf, N = self.flow_grid.N, grid.N
        if N == Nf:
            return fh
        if N < Nf:
            raise ContractError("target grid coarser than the flow grid")
        out = np.zeros(fh.shape[:-3] + grid.shape_spec, dtype=complex)
        h = Nf // 2
        out[..., :h, :h, :h + 1] = fh[..., :h, :h, :]
        out[..., N - h:, :h, :h + 1] = fh[..., h:, :h, :]
        out[..., :h, N - h:, :h + 1] = fh[..., :h, h:, :]
        out[..., N - h:, N - h:, :h + 1] = fh[..., h:, h:, :]
        return out

    def psi(self, t, grid):
        """Displacement Psi = Phi - x at time t on the given grid."""
        if not self.contains(t):
            raise ContractError(f"read of flow map {self.k},{self.j} outside its window at t={t}")
        return to_physical(self._lift(self.psi_hat[self.slice_index(t)], grid), grid)

    def grad_phi(self, t, grid):
        """grad Phi = Id + spectral grad Psi, shape (3, 3, N, N, N); [i, j] = d_j Phi_i."""
        if not self.contains(t):
            raise ContractError(f"read of flow map {self.k},{self.j} outside its window at t={t}")
        gh = grad_hat(self._lift(self.psi_hat[self.slice_index(t)], grid), grid)
        G = to_physical(gh, grid)
        for i in range(3):
            G[i, i] += 1.0
        return G


def _rk4_back(field_, X, s0, s1, nsub):
    h = (s1 - s0) / nsub
    kv = field_.retained_modes()[0]
    if len(kv) == 0:
        return X
    s = s0
    for _ in range(nsub):
        k1 = fourier_eval(kv, field_.coefficients_at(s), X)
        k2 = fourier_eval(kv, field_.coefficients_at(s + h / 2), X + (h / 2) * k1)
        k3 = fourier_eval(kv, field_.coefficients_at(s + h / 2), X + (h / 2) * k2)
        k4 = fourier_eval(kv, field_.coefficients_at(s + h), X + h * k3)
        X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        s += h
    return X


def default_flow_grid(field_: AdvectingField, N_flow: Optional[int] = None) -> PeriodicGrid:
    if N_flow is not None:
        return PeriodicGrid(min(N_flow, field_.grid.N))
    need = 16
    kmax = field_.max_wavenumber()
    while need < 3 * kmax and need < field_.grid.N:
        need *= 2
    return PeriodicGrid(min(need, field_.grid.N))


def solve_flow(field_: AdvectingField, k: int, j: int, ell: float, times, N_flow=None,
               cfl_fraction: float = 1.0, steps_per_window: int = 16, steps_per_turnover: int = 4) -> FlowWindow:
    """Flow map Phi_{k,j} on the slices of ``times`` that fall inside its window."""
    a, b = k + (j - 1) * ell, k + (j + 1) * ell
    times = np.asarray(times, dtype=float)
    sl = times[(times >= a - 1e-12) & (times <= b + 1e-12)]
    if len(sl) == 0:
        raise ContractError("no time slices inside the flow window")
    if not field_.covers(a, sl[-1]):
        raise ContractError(f"advecting field does not cover [{a}, {sl[-1]}]")
    fgrid = default_flow_grid(field_, N_flow)
    umax = field_.sup_norm()
    if umax * field_.dt > cfl_fraction * field_.grid.h:
        raise CFLError(f"|u| dt = {umax * field_.dt:.3g} exceeds {cfl_fraction} x grid spacing")
    hmax = (b - a) / steps_per_window
    if umax > 0:
        hmax = min(hmax, ell / (steps_per_turnover * umax))
    X0 = np.stack([c.ravel() for c in fgrid.coords], axis=1)
    psi_hat = np.zeros((len(sl), 3) + fgrid.shape_spec, dtype=complex)
    subs = []
    for n, t in enumerate(sl):
        span = t - a
        if span <= 1e-14:
            subs.append(0)
            continue  # Phi = x exactly on the initial slice
        nsub = max(1, int(math.ceil(span / hmax - 1e-9)))
        X = _rk4_back(field_, X0.copy(), t, a, nsub)
        disp = (X - X0).T.reshape((3,) + fgrid.shape_phys)
        psi_hat[n] = to_spectral(disp, fgrid)
        subs.append(nsub)
    return FlowWindow(k, j, ell, a, b, sl, fgrid, psi_hat, subs)


def flow_atlas(field_: AdvectingField, k: int, ell: float, times, js=None, **kw):
    js = window_indices(ell) if js is None else js
    return {j: solve_flow(field_, k, j, ell, times, **kw) for j in js}


def _singular_bounds(G):
    A = np.moveaxis(G.reshape(3, 3, -1), -1, 0)
    s = np.linalg.svd(A, compute_uv=False)
    return float(s[:, 0].max()), float(s[:, -1].min()), np.linalg.det(A)


def flow_diagnostics(window: FlowWindow, field_: AdvectingField, grid: Optional[PeriodicGrid] = None, n_max: int = 2):
    """Appendix-style flow-map diagnostics for one window.

    Reports |grad Phi - Id|_{C^0} against exp(2 ell |u|_{C^0 C^1}) - 1, the
    singular-value bounds 1/2 <= |grad Phi| <= 2, determinant drift,
    C^n norms of grad Phi against ell^{-n+1/4}, time-derivative sizes and
    the transport residual at interior slices.
    """
    grid = grid or window.flow_grid
    ell = window.ell
    c0c1 = field_.c0c1_norm()
    span = window.t_end - window.t_start
    bound = math.expm1(span * c0c1)
    dev, smax, smin, detdev = 0.0, 0.0, math.inf, 0.0
    cn = {n: 0.0 for n in range(1, n_max + 1)}
    for t in window.times:
        G = window.grad_phi(t, grid)
        D = G - np.eye(3).reshape(3, 3, 1, 1, 1)
        A = np.moveaxis(D.reshape(3, 3, -1), -1, 0)
        dev = max(dev, float(np.linalg.norm(A, ord=2, axis=(1, 2)).max()))
        hi, lo, det = _singular_bounds(G)
        smax, smin = max(smax, hi), min(smin, lo)
        detdev = max(detdev, float(np.abs(det - 1).max()))
        psih = window._lift(window.psi_hat[window.slice_index(t)], grid)
        gh = grad_hat(psih, grid)
        for n in cn:
            # C^n of grad Phi through spectral derivatives of grad Psi
            cn[n] = max(cn[n], cn_norm(to_physical(gh, grid), grid, n))
    # time derivatives and residual by centered differences
    dt_phi, dt_grad, resid = 0.0, 0.0, 0.0
    ts = window.times
    g = window.flow_grid
    for n in range(1, len(ts) - 1):
        h = ts[n + 1] - ts[n - 1]
        dpsi = to_physical(window.psi_hat[n + 1] - window.psi_hat[n - 1], g) / h
        dt_phi = max(dt_phi, float(_pointwise_abs(dpsi).max()))
        dgrad = to_physical(grad_hat(window.psi_hat[n + 1] - window.psi_hat[n - 1], g), g) / h
        dt_grad = max(dt_grad, float(_pointwise_abs(dgrad).max()))
        # d_t Phi + (u . grad) Phi with grad Phi = Id + grad Psi
        kv = field_.retained_modes()[0]
        if len(kv):
            pts = np.stack([c.ravel() for c in g.coords], axis=1)
            u = fourier_eval(kv, field_.coefficients_at(ts[n]), pts).T.reshape((3,) + g.shape_phys)
        else:
            u = np.zeros((3,) + g.shape_phys)
        G = to_physical(grad_hat(window.psi_hat[n], g), g)
        adv = np.einsum("ij...,j...->i...", G, u) + u
        resid = max(resid, float(_pointwise_abs(dpsi + adv).max()))
    return {
        "k": window.k, "j": window.j, "ell": ell,
        "grad_dev": dev, "gronwall_bound": bound, "c0c1": c0c1,
        "ratio": dev / bound if bound > 0 else (0.0 if dev == 0 else math.inf),
        "sigma_max": smax, "sigma_min": smin,
        "two_sided_ok": smax <= 2.0 and smin >= 0.5,
        "det_dev": detdev,
        "cn": cn, "cn_shape": {n: ell ** (-n + 0.25) for n in cn},
        "dt_phi": dt_phi, "dt_grad_phi": dt_grad, "transport_residual": resid,
    }
