"""Ornstein-Uhlenbeck noise on the torus: sampling, truncation and the C^1 cutoff.

The noise lives on a real L^2-orthonormal divergence-free basis:
for every wavevector k in a half space and each of two polarizations e_p
(orthogonal to k) there are two coordinates, multiplying
sqrt(2/(2pi)^3) cos(k.x) e_p and sqrt(2/(2pi)^3) sin(k.x) e_p.
Each coordinate is an independent OU process dX = -X dt + sqrt(c_k) dW
with stationary variance c_k/2, so E||z||_{L^2}^2 = sum_{k != 0} c_k
(sum over all nonzero k, both signs).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .spectral import PeriodicGrid, _pointwise_abs, grad_hat, to_physical

BASIS_NORM = math.sqrt(2.0 / (2 * math.pi) ** 3)


@dataclass(frozen=True)
class NoiseSpectrum:
    s: float = 4.5
    c0: float = 0.1
    sigma: float = 1.0
    K: int = 4  # mode budget |k| <= K

    def __post_init__(self):
        if self.c0 < 0:
            raise ConfigError("c0 must be non-negative")
        if self.K < 1:
            raise ConfigError("mode budget must be >= 1")

    @property
    def trace_margin(self) -> float:
        """2s - (6 + 2 sigma); positive means the trace condition holds."""
        return 2 * self.s - (6 + 2 * self.sigma)

    def check_trace(self):
        if self.trace_margin <= 0:
            raise ConfigError(f"trace condition fails: 2s={2 * self.s} <= 6+2sigma={6 + 2 * self.sigma}")
        return self.trace_margin

    def ck(self, kabs):
        return self.c0 * np.asarray(kabs, dtype=float) ** (-2 * self.s)

    @property
    def zero(self) -> bool:
        return self.c0 == 0


@lru_cache(maxsize=32)
def _half_space_modes(K: int):
    r = np.arange(-K, K + 1)
    k = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    ksq = (k ** 2).sum(axis=1)
    k = k[(ksq > 0) & (ksq <= K * K)]
    # half space: first nonzero coordinate positive
    first = np.where(k[:, 0] != 0, k[:, 0], np.where(k[:, 1] != 0, k[:, 1], k[:, 2]))
    k = k[first > 0]
    order = np.lexsort((k[:, 2], k[:, 1], k[:, 0], (k ** 2).sum(axis=1)))
    return k[order]


def _polarizations(k):
    kf = k / np.linalg.norm(k)
    ax = np.zeros(3)
    ax[int(np.argmin(np.abs(kf)))] = 1.0
    e1 = np.cross(kf, ax)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(kf, e1)
    return np.stack([e1, e2])


@dataclass(frozen=True)
class ModeBasis:
    spectrum: NoiseSpectrum
    k: np.ndarray  # (n_rep, 3) integer wavevectors in a half space
    kabs: np.ndarray
    ck: np.ndarray
    pol: np.ndarray  # (n_rep, 2, 3)

    @property
    def n_rep(self):
        return len(self.k)

    @property
    def ncoord(self):
        return 4 * self.n_rep

    def coord_kabs(self):
        """|k| per flattened coordinate (layout: rep, pol, cos/sin)."""
        return np.repeat(self.kabs, 4)

    def coord_ck(self):
        return np.repeat(self.ck, 4)

    def select(self, K: Optional[float]):
        """Boolean mask over reps with |k| <= K."""
        if K is None:
            return np.ones(self.n_rep, dtype=bool)
        return self.kabs <= K + 1e-9


@lru_cache(maxsize=32)
def mode_basis(spectrum: NoiseSpectrum) -> ModeBasis:
    k = _half_space_modes(spectrum.K)
    kabs = np.sqrt((k ** 2).sum(axis=1).astype(float))
    pol = np.stack([_polarizations(kk.astype(float)) for kk in k])
    return ModeBasis(spectrum, k, kabs, spectrum.ck(kabs), pol)


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    steps: int

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def index(self, t, tol=1e-9):
        i = (t - self.t0) / self.dt
        j = int(round(i))
        if abs(i - j) > tol or not 0 <= j <= self.steps:
            raise ContractError(f"time {t} not on the grid")
        return j


def member_generator(seed: int, member: int) -> np.random.Generator:
    """Counter-based stream per (seed, member); independent of scheduling."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, member & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def ou_transition(z, ck, dt, xi):
    """Exact OU update z(t+dt) = e^{-dt} z + sqrt(c_k (1 - e^{-2dt}) / 2) xi."""
    return math.exp(-dt) * z + np.sqrt(np.asarray(ck) * (1.0 - math.exp(-2 * dt)) / 2.0) * xi


def _simulate(basis: ModeBasis, tgrid: TimeGrid, seed: int, member: int):
    gen = member_generator(seed, member)
    xi = gen.standard_normal((tgrid.steps + 1, basis.ncoord))
    ck = basis.coord_ck()
    out = np.empty_like(xi)
    out[0] = np.sqrt(ck / 2.0) * xi[0]  # stationary start
    decay = math.exp(-tgrid.dt)
    amp = np.sqrt(ck * (1.0 - math.exp(-2 * tgrid.dt)) / 2.0)
    for i in range(1, tgrid.steps + 1):
        out[i] = decay * out[i - 1] + amp * xi[i]
    return out, xi


@dataclass
class NoisePath:
    spectrum: NoiseSpectrum
    tgrid: TimeGrid
    seed: int
    member: int
    coords: np.ndarray  # (nt, ncoord)
    innovations: np.ndarray  # (nt, ncoord) standard normals; row 0 seeds the stationary start

    @property
    def basis(self) -> ModeBasis:
        return mode_basis(self.spectrum)

    def tail(self, i0: int) -> "NoisePath":
        """The same path restricted to time indices i0, i0+1, ..."""
        tg = TimeGrid(self.tgrid.t0 + i0 * self.tgrid.dt, self.tgrid.dt, self.tgrid.steps - i0)
        return NoisePath(self.spectrum, tg, self.seed, self.member, self.coords[i0:], self.innovations[i0:])

    @property
    def times(self):
        return self.tgrid.times

    def energy(self, K=None):
        """||z(t)||_{L^2}^2 per time slice (optionally truncated to |k| <= K)."""
        sel = np.repeat(self.basis.select(K), 4)
        return (self.coords[:, sel] ** 2).sum(axis=1)

    def hs_norm(self, s, K=None):
        b = self.basis
        sel = np.repeat(b.select(K), 4)
        w = (1.0 + b.coord_kabs() ** 2) ** s
        return np.sqrt((w[sel] * self.coords[:, sel] ** 2).sum(axis=1))

    def field_hat(self, i, grid: PeriodicGrid, K=None):
        return coords_to_hat(self.coords[i], self.basis, grid, K)

    def field(self, i, grid: PeriodicGrid, K=None):
        return to_physical(self.field_hat(i, grid, K), grid)


def coords_to_hat(c, basis: ModeBasis, grid: PeriodicGrid, K=None):
    """Spectral coefficients (3, N, N, N//2+1) of the field with coordinates c."""
    N = grid.N
    if basis.spectrum.K >= N // 2:
        raise ContractError("noise mode budget exceeds the grid Nyquist limit")
    c = np.asarray(c).reshape(basis.n_rep, 2, 2)
    sel = basis.select(K)
    # coefficient of exp(ik.x): BASIS_NORM * sum_p e_p (Zc - i Zs) / 2
    amp = BASIS_NORM * 0.5 * (c[:, :, 0] - 1j * c[:, :, 1])  # (n_rep, 2)
    vec = np.einsum("rp,rpi->ri", amp, basis.pol)
    vec[~sel] = 0.0
    out = np.zeros((3,) + grid.shape_spec, dtype=complex)
    k = basis.k
    pos = k[:, 2] >= 0
    kp = k[pos]
    out[:, kp[:, 0] % N, kp[:, 1] % N, kp[:, 2]] += vec[pos].T
    neg = k[:, 2] <= 0
    kn = -k[neg]
    out[:, kn[:, 0] % N, kn[:, 1] % N, kn[:, 2]] += np.conj(vec[neg]).T
    return out


def sample_ou_path(spectrum: NoiseSpectrum, tgrid: TimeGrid, seed: int, member: int = 0) -> NoisePath:
    spectrum.check_trace()
    basis = mode_basis(spectrum)
    coords, xi = _simulate(basis, tgrid, seed, member)
    return NoisePath(spectrum, tgrid, seed, member, coords, xi)


def sample_ensemble(spectrum, tgrid, seed, members: int, start: int = 0):
    """Lazily yields members start .. start+members-1."""
    for m in range(start, start + members):
        yield sample_ou_path(spectrum, tgrid, seed, m)


def sample_ou_coords(spectrum, tgrid, seed, members: int, select=None):
    """Coordinates (members, nt, nsel) without building paths; identical draws to sample_ou_path."""
    spectrum.check_trace()
    basis = mode_basis(spectrum)
    idx = np.arange(basis.ncoord) if select is None else np.asarray(select)
    out = np.empty((members, tgrid.steps + 1, len(idx)))
    for m in range(members):
        c, _ = _simulate(basis, tgrid, seed, m)
        out[m] = c[:, idx]
    return out


# -- truncation and cutoff ---------------------------------------------------


def smoothstep_cutoff(x, lo, hi):
    """chi(x) = 1 - w(u), w(u) = 3u^2 - 2u^3, u = clamp((x - lo)/(hi - lo)); peak slope 1.5/(hi - lo)."""
    if hi <= lo:
        raise ContractError("degenerate cutoff band")
    u = np.clip((np.asarray(x, dtype=float) - lo) / (hi - lo), 0.0, 1.0)
    return 1.0 - (3 * u ** 2 - 2 * u ** 3)


def cutoff_slope(lo, hi):
    return 1.5 / (hi - lo)


def c1_norm_hat(fh, grid):
    """sup|f| + sup|grad f| from spectral coefficients."""
    f = to_physical(fh, grid)
    g = to_physical(grad_hat(fh, grid), grid)
    return float(_pointwise_abs(f).max() + _pointwise_abs(g).max())


@dataclass
class CutoffSeries:
    path: NoisePath
    grid: PeriodicGrid
    K: float
    band: tuple  # (lo, hi)
    rescaled: bool
    c1: np.ndarray  # ||z~_q(t)||_{C^1_x} per slice
    chi: np.ndarray

    def z_tilde_hat(self, i):
        return self.path.field_hat(i, self.grid, self.K)

    def z_hat(self, i):
        return self.chi[i] * self.z_tilde_hat(i)

    def z(self, i):
        return to_physical(self.z_hat(i), self.grid)

    @property
    def slope(self):
        return cutoff_slope(*self.band)


def truncation_frequency(schedule, q, desk_f=None):
    """f(q): exact in proof mode; in desk mode the configured integer (default q+2)."""
    if schedule is not None and schedule.mode == "proof":
        return schedule.f(q)
    return (q + 2) if desk_f is None else desk_f(q) if callable(desk_f) else int(desk_f)


def truncate_and_cutoff(path: NoisePath, q: int, schedule, grid: PeriodicGrid, K=None, band=None) -> CutoffSeries:
    from .params import desk_cutoff_band

    K = truncation_frequency(schedule, q) if K is None else K
    if K >= grid.N // 2:
        raise ContractError(f"f(q)={K} exceeds the grid Nyquist limit {grid.N // 2}")
    if band is None:
        lo, hi, rescaled = desk_cutoff_band(schedule, q)
    else:
        (lo, hi), rescaled = band, False
    c1 = np.array([c1_norm_hat(path.field_hat(i, grid, K), grid) for i in range(len(path.times))])
    chi = smoothstep_cutoff(c1, lo, hi)
    return CutoffSeries(path, grid, K, (lo, hi), rescaled, c1, chi)


# -- moments -----------------------------------------------------------------


def gaussian_abs_moment(p):
    """(E|X|^p)^{1/p} for standard normal X."""
    return (2 ** (p / 2) * math.gamma((p + 1) / 2) / math.sqrt(math.pi)) ** (1.0 / p)


def fit_sqrt_growth(ps, values):
    """Least-squares exponent e in values ~ C (p-1)^{e/2}."""
    x = np.log(np.sqrt(np.asarray(ps, dtype=float) - 1.0))
    v = np.asarray(values, dtype=float)
    if np.any(v <= 0) or np.any(~np.isfinite(v)):
        return float("nan")
    y = np.log(v)
    A = np.vstack([x, np.ones_like(x)]).T
    return float(np.linalg.lstsq(A, y, rcond=None)[0][0])


GAUSSIAN_GROWTH = fit_sqrt_growth([2, 4, 8], [gaussian_abs_moment(p) for p in (2, 4, 8)])


def coordinate_moment_fit(samples, ps=(2, 4, 8)):
    """Per-coordinate moment growth; samples (M, ncoord) at a fixed time."""
    X = np.asarray(samples)
    out = []
    for c in range(X.shape[1]):
        x = np.abs(X[:, c])
        if not np.any(x):
            out.append(float("nan"))
            continue
        m = [np.mean(x ** p) ** (1.0 / p) for p in ps]
        out.append(fit_sqrt_growth(ps, m))
    return np.array(out)


def _window_sups(values, times, window=1.0):
    """sup over [t, t+window] of a per-slice series, for every slice start t that fits."""
    out = []
    for i, t in enumerate(times):
        j = np.searchsorted(times, t + window + 1e-12, side="right")
        if times[-1] < t + window - 1e-12 and out:
            break
        out.append(values[i:j].max())
    return np.array(out)


def _time_holder(hs_series_coords, w, times, exponent):
    """sup_{s<t} ||z(t)-z(s)||_{H}/|t-s|^exponent from coordinates."""
    best = 0.0
    for i in range(len(times)):
        d = hs_series_coords[i + 1:] - hs_series_coords[i]
        if len(d) == 0:
            continue
        nrm = np.sqrt((w * d ** 2).sum(axis=1))
        best = max(best, float((nrm / (times[i + 1:] - times[i]) ** exponent).max()))
    return best


def moment_report(paths: Sequence[NoisePath], ps=(2, 4, 8), delta=0.1, grid=None, window=1.0,
                  schedule=None, q=None):
    """Moment table of ensemble norms and fitted growth in p.

    Norms: H^{3/2+sigma} (from coordinates), C^0 and C^1 on the grid (if a
    grid is given), and the time Hoelder norm of exponent 1/2-delta in
    H^{3/2+sigma}.
    """
    paths = list(paths)
    if len(paths) < 100:
        raise ContractError("moment_report needs an ensemble of at least 100 paths")
    spec = paths[0].spectrum
    basis = mode_basis(spec)
    times = paths[0].times
    s = 1.5 + spec.sigma
    w = (1.0 + basis.coord_kabs() ** 2) ** s
    per = {"H": [], "C0": [], "C1": [], "time_holder": []}
    for path in paths:
        hs = path.hs_norm(s)
        per["H"].append(_window_sups(hs, times, window))
        per["time_holder"].append(_time_holder(path.coords, w, times, 0.5 - delta))
        if grid is not None:
            c0 = np.array([float(_pointwise_abs(path.field(i, grid)).max()) for i in range(len(times))])
            c1 = np.array([c1_norm_hat(path.field_hat(i, grid), grid) for i in range(len(times))])
            per["C0"].append(_window_sups(c0, times, window))
            per["C1"].append(_window_sups(c1, times, window))
    table = {}
    for name, vals in per.items():
        if not vals:
            continue
        arr = np.array(vals, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        moments = {p: float(np.max(np.mean(arr ** p, axis=0) ** (1.0 / p))) for p in ps}
        table[name] = {"moments": moments, "growth": fit_sqrt_growth(ps, [moments[p] for p in ps])}
    report = {"table": table, "ps": list(ps), "delta": delta, "members": len(paths),
              "gaussian_growth": GAUSSIAN_GROWTH}
    if schedule is not None and q is not None and "C1" in table:
        K = truncation_frequency(schedule, q)
        report["zq_C1_scale"] = {"f(q)": K, "ratio_p2": table["C1"]["moments"][ps[0]] / K}
    return report


def increment_report(paths: Sequence[NoisePath], q: int, schedule, grid: PeriodicGrid, p: float = 2.0,
                     K=None, K_next=None, bands=None):
    """Monte Carlo split of the moment of z_{q+1} - z_q into the spectral tail and cutoff disagreement."""
    K = truncation_frequency(schedule, q) if K is None else K
    K_next = truncation_frequency(schedule, q + 1) if K_next is None else K_next
    bands = bands or (None, None)
    I_vals, II_vals, tot_vals = [], [], []
    for path in paths:
        a = truncate_and_cutoff(path, q, schedule, grid, K, bands[0])
        b = truncate_and_cutoff(path, q + 1, schedule, grid, K_next, bands[1])
        I_s, II_s, T_s = [], [], []
        for i in range(len(path.times)):
            za, zb = a.z_tilde_hat(i), b.z_tilde_hat(i)
            I_s.append(float(_pointwise_abs(to_physical(zb - za, grid)).max()) * b.chi[i])
            II_s.append(float(_pointwise_abs(to_physical(za, grid)).max()) * abs(b.chi[i] - a.chi[i]))
            T_s.append(float(_pointwise_abs(to_physical(b.chi[i] * zb - a.chi[i] * za, grid)).max()))
        I_vals.append(max(I_s))
        II_vals.append(max(II_s))
        tot_vals.append(max(T_s))

    def mom(v):
        return float(np.mean(np.asarray(v) ** p) ** (1.0 / p))

    return {"q": q, "p": p, "f(q)": K, "f(q+1)": K_next, "term_I": mom(I_vals), "term_II": mom(II_vals),
            "total": mom(tot_vals), "members": len(I_vals)}


# -- statistics used by the acceptance checks -----------------------------------


def variance_check(X, target):
    """Sample variance of zero-mean samples vs target with standard error; returns (est, se, z)."""
    X = np.asarray(X, dtype=float)
    sq = X ** 2
    est = float(sq.mean())
    se = float(sq.std(ddof=1) / math.sqrt(len(X)))
    return est, se, (est - target) / se if se > 0 else 0.0


def lag_covariance_check(X0, X1, target):
    prod = np.asarray(X0) * np.asarray(X1)
    est = float(prod.mean())
    se = float(prod.std(ddof=1) / math.sqrt(len(prod)))
    return est, se, (est - target) / se if se > 0 else 0.0
