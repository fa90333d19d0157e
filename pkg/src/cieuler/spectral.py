"""Periodic fields on [0, 2pi)^3 in Fourier representation.

Arrays use the real-FFT layout: a physical field has shape (..., N, N, N)
and its coefficients shape (..., N, N, N//2+1) with
f(x) = sum_k fh[k] exp(i k.x), i.e. fh = rfftn(f) / N^3.  Modes on the
Nyquist planes (|k_i| = N/2) are always zeroed.

Vector fields carry a leading axis of length 3, tensors a leading (3, 3).
The Jacobian convention is grad(v)[i, j] = d_j v_i and
div(T)[i] = sum_j d_j T[i, j].
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from .errors import ContractError


def _workers():
    try:
        return max(1, int(os.environ.get("CIEULER_WORKERS", "1")))
    except ValueError:
        return 1


class PeriodicGrid:
    def __init__(self, N: int):
        N = int(N)
        if N < 8 or N & (N - 1):
            raise ContractError(f"grid size must be a power of two >= 8, got {N}")
        self.N = N
        self.h = 2 * math.pi / N
        self.x = np.arange(N) * self.h

    def __repr__(self):
        return f"PeriodicGrid({self.N})"

    def __eq__(self, other):
        return isinstance(other, PeriodicGrid) and other.N == self.N

    def __hash__(self):
        return hash(("grid", self.N))

    @cached_property
    def k(self):
        N = self.N
        k1 = np.fft.fftfreq(N, 1.0 / N).reshape(N, 1, 1)
        k2 = k1.reshape(1, N, 1)
        k3 = np.arange(N // 2 + 1, dtype=float).reshape(1, 1, N // 2 + 1)
        return (k1, k2, k3)

    @cached_property
    def shape_spec(self):
        return (self.N, self.N, self.N // 2 + 1)

    @cached_property
    def shape_phys(self):
        return (self.N, self.N, self.N)

    @cached_property
    def ksq(self):
        k1, k2, k3 = self.k
        return k1 ** 2 + k2 ** 2 + k3 ** 2

    @cached_property
    def kabs(self):
        return np.sqrt(self.ksq)

    @cached_property
    def inv_ksq(self):
        out = np.zeros(self.shape_spec)
        nz = self.ksq > 0
        out[nz] = 1.0 / self.ksq[nz]
        return out

    @cached_property
    def keep(self):
        """Mask of retained modes (Nyquist planes removed)."""
        k1, k2, k3 = self.k
        half = self.N // 2
        return (np.abs(k1) < half) & (np.abs(k2) < half) & (np.abs(k3) < half)

    @cached_property
    def dealias_mask(self):
        k1, k2, k3 = self.k
        cut = self.N // 3
        return (np.abs(k1) <= cut) & (np.abs(k2) <= cut) & (np.abs(k3) <= cut)

    @cached_property
    def weight(self):
        """Multiplicity of each rfft coefficient in the full spectrum."""
        w = np.full(self.shape_spec, 2.0)
        w[..., 0] = 1.0
        if self.N % 2 == 0:
            w[..., -1] = 1.0
        return w

    @cached_property
    def coords(self):
        X = np.meshgrid(self.x, self.x, self.x, indexing="ij")
        return np.stack(X)

    def zeros(self, *lead):
        return np.zeros(lead + self.shape_phys)


# -- transforms -------------------------------------------------------------


def to_spectral(f, grid: PeriodicGrid):
    fh = sfft.rfftn(f, axes=(-3, -2, -1), workers=_workers())
    fh *= 1.0 / grid.N ** 3
    fh *= grid.keep
    return fh


def to_physical(fh, grid: PeriodicGrid):
    return sfft.irfftn(fh * grid.N ** 3, s=grid.shape_phys, axes=(-3, -2, -1), workers=_workers())


# -- differential operators (spectral in, spectral out) ---------------------


def grad_hat(fh, grid):
    """Gradient; appends a derivative axis: out[..., j] = d_j f, placed before the spatial axes."""
    k = grid.k
    return np.stack([1j * k[j] * fh for j in range(3)], axis=-4)


def div_hat(vh, grid):
    """Divergence over the last component axis before the spatial axes."""
    k = grid.k
    return sum(1j * k[j] * vh[..., j, :, :, :] for j in range(3))


def curl_hat(vh, grid):
    k1, k2, k3 = grid.k
    v1, v2, v3 = vh[0], vh[1], vh[2]
    return np.stack([1j * (k2 * v3 - k3 * v2), 1j * (k3 * v1 - k1 * v3), 1j * (k1 * v2 - k2 * v1)])


def _mean_norm(fh):
    return np.abs(fh[..., 0, 0, 0]).max() if fh.size else 0.0


def laplace_inverse_hat(fh, grid, check=True, tol=1e-12):
    if check:
        scale = max(np.abs(fh).max(), 1e-300)
        if _mean_norm(fh) > tol * scale and _mean_norm(fh) > 1e-300:
            raise ContractError("laplace_inverse requires mean-zero input")
    return -fh * grid.inv_ksq


def leray_hat(vh, grid):
    k = grid.k
    kdotv = sum(k[j] * vh[j] for j in range(3)) * grid.inv_ksq
    return np.stack([vh[j] - k[j] * kdotv for j in range(3)])


def low_pass_hat(fh, grid, K):
    if K < 0:
        raise ContractError("low_pass cutoff must be >= 0")
    return fh * (grid.kabs <= K + 1e-9)


def dealias_hat(fh, grid):
    return fh * grid.dealias_mask


def inverse_divergence_hat(vh, grid, check=True, tol=1e-12):
    """Symmetric traceless right inverse of div; returns (3, 3, ...) coefficients."""
    if check:
        scale = max(np.abs(vh).max(), 1e-300)
        if _mean_norm(vh) > tol * scale and _mean_norm(vh) > 1e-300:
            raise ContractError("inverse_divergence requires mean-zero input")
    k = grid.k
    u = -vh * grid.inv_ksq  # Delta^{-1} v
    divu = sum(1j * k[j] * u[j] for j in range(3))
    out = np.empty((3, 3) + vh.shape[1:], dtype=complex)
    for a in range(3):
        for b in range(a, 3):
            val = 1j * k[a] * u[b] + 1j * k[b] * u[a]
            val = val - 0.5 * ((1.0 if a == b else 0.0) + k[a] * k[b] * grid.inv_ksq) * divu
            out[a, b] = val
            if a != b:
                out[b, a] = val
    out[..., 0, 0, 0] = 0.0
    return out


# -- physical-space helpers -------------------------------------------------


def grad(f, grid):
    return to_physical(grad_hat(to_spectral(f, grid), grid), grid)


def div(v, grid):
    return to_physical(div_hat(to_spectral(v, grid), grid), grid)


def curl(v, grid):
    return to_physical(curl_hat(to_spectral(v, grid), grid), grid)


def leray(v, grid):
    return to_physical(leray_hat(to_spectral(v, grid), grid), grid)


def inverse_divergence(v, grid, drop_mean=False):
    vh = to_spectral(v, grid)
    if drop_mean:
        vh[..., 0, 0, 0] = 0.0
    return to_physical(inverse_divergence_hat(vh, grid), grid)


def dealias(f, grid):
    return to_physical(dealias_hat(to_spectral(f, grid), grid), grid)


def outer(u, w, grid=None, dealiased=True):
    """u_i w_j as a (3, 3, ...) array; 2/3-rule truncated when grid is given."""
    T = u[:, None] * w[None, :]
    if dealiased and grid is not None:
        T = dealias(T, grid)
    return T


def product(f, g, grid=None, dealiased=True):
    out = f * g
    if dealiased and grid is not None:
        out = dealias(out, grid)
    return out


def traceless(T):
    tr = (T[0, 0] + T[1, 1] + T[2, 2]) / 3.0
    out = T.copy()
    for i in range(3):
        out[i, i] = out[i, i] - tr
    return out


def trace(T):
    return T[0, 0] + T[1, 1] + T[2, 2]


def mean(f):
    return f.mean(axis=(-3, -2, -1))


# -- typed wrappers ---------------------------------------------------------

_PACK = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


@dataclass(frozen=True, eq=False)
class SpectralField:
    grid: PeriodicGrid
    coeffs: np.ndarray  # (c, N, N, N//2+1) complex, c in {1, 3}
    divergence_free: bool = False
    mean_zero: bool = False

    def __post_init__(self):
        if self.coeffs.shape[-3:] != self.grid.shape_spec:
            raise ContractError("coefficient shape does not match grid")
        if self.mean_zero and _mean_norm(self.coeffs) > 1e-12 * max(np.abs(self.coeffs).max(), 1e-300):
            raise ContractError("mean-zero flag set on a field with nonzero mean")
        if self.divergence_free and self.rank == 1:
            scale = np.abs(self.coeffs).max()
            d = np.abs(sum(self.grid.k[j] * self.coeffs[j] for j in range(3))).max()
            if d > 1e-12 * max(scale, 1e-300):
                raise ContractError("divergence-free flag set on a field with divergence")

    @property
    def rank(self):
        return 0 if self.coeffs.shape[0] == 1 else 1

    @classmethod
    def from_physical(cls, f, grid, **flags):
        f = np.asarray(f, dtype=float)
        if f.ndim == 3:
            f = f[None]
        return cls(grid, to_spectral(f, grid), **flags)

    def physical(self):
        out = to_physical(self.coeffs, self.grid)
        return out[0] if self.rank == 0 else out


@dataclass(frozen=True, eq=False)
class SpectralTensorField:
    grid: PeriodicGrid
    coeffs: np.ndarray  # (6, N, N, N//2+1), packed 11, 22, 33, 12, 13, 23
    traceless: bool = False

    def __post_init__(self):
        if self.traceless:
            tr = self.coeffs[0] + self.coeffs[1] + self.coeffs[2]
            scale = max(np.abs(self.coeffs).max(), 1e-300)
            if np.abs(tr).max() > 1e-12 * scale:
                raise ContractError("traceless flag set on a tensor with trace")

    @classmethod
    def from_full_hat(cls, Th, grid, **flags):
        return cls(grid, np.stack([Th[i, j] for i, j in _PACK]), **flags)

    @classmethod
    def from_physical(cls, T, grid, **flags):
        return cls.from_full_hat(to_spectral(T, grid), grid, **flags)

    def full_hat(self):
        out = np.empty((3, 3) + self.coeffs.shape[1:], dtype=complex)
        for n, (i, j) in enumerate(_PACK):
            out[i, j] = self.coeffs[n]
            out[j, i] = self.coeffs[n]
        return out

    def physical(self):
        return to_physical(self.full_hat(), self.grid)


def differentiate(fld: SpectralField, op: str):
    g = fld.grid
    c = fld.coeffs
    if op == "grad":
        if fld.rank != 0:
            raise ContractError("grad is implemented for scalar fields")
        return SpectralField(g, grad_hat(c[0], g), mean_zero=True)
    if op == "div":
        if fld.rank != 1:
            raise ContractError("div needs a vector field")
        return SpectralField(g, div_hat(c, g)[None], mean_zero=True)
    if op == "curl":
        if fld.rank != 1:
            raise ContractError("curl needs a vector field")
        return SpectralField(g, curl_hat(c, g), divergence_free=True, mean_zero=True)
    if op == "laplace_inverse":
        return SpectralField(g, laplace_inverse_hat(c, g), divergence_free=fld.divergence_free, mean_zero=True)
    raise ContractError(f"unknown operator {op!r}")


def leray_project(fld: SpectralField) -> SpectralField:
    out = leray_hat(fld.coeffs, fld.grid)
    return SpectralField(fld.grid, out, divergence_free=True, mean_zero=fld.mean_zero)


def low_pass(fld, K):
    out = low_pass_hat(fld.coeffs, fld.grid, K)
    if fld.mean_zero:
        out[..., 0, 0, 0] = 0.0
    return SpectralField(fld.grid, out, divergence_free=fld.divergence_free, mean_zero=fld.mean_zero)


def inverse_divergence_field(fld: SpectralField) -> SpectralTensorField:
    return SpectralTensorField.from_full_hat(inverse_divergence_hat(fld.coeffs, fld.grid), fld.grid, traceless=True)


# -- norms ------------------------------------------------------------------


def _pointwise_abs(f):
    """Euclidean norm over leading component axes."""
    if f.ndim == 3:
        return np.abs(f)
    return np.sqrt((f.reshape((-1,) + f.shape[-3:]) ** 2).sum(axis=0))


def _multi_indices(n):
    out = []
    for a in range(n + 1):
        for b in range(n + 1 - a):
            for c in range(n + 1 - a - b):
                out.append((a, b, c))
    return out


def cn_norm(f, grid, n):
    """sum over |beta| <= n of sup_x |D^beta f| (derivatives spectral)."""
    fh = to_spectral(f, grid)
    k1, k2, k3 = grid.k
    total = 0.0
    for a, b, c in _multi_indices(n):
        mult = (1j * k1) ** a * (1j * k2) ** b * (1j * k3) ** c
        total += float(_pointwise_abs(to_physical(fh * mult, grid)).max())
    return total


def c1_norm(f, grid):
    """sup|f| + sup|grad f|, the first-order norm used by the noise cutoff."""
    fh = to_spectral(f, grid)
    gh = grad_hat(fh, grid)
    return float(_pointwise_abs(f).max() + _pointwise_abs(to_physical(gh, grid)).max())


def holder_offsets(N, per_octave=8):
    """Grid offsets (in units of h) up to half a period, dyadic plus sub-octave fill."""
    ms = set()
    top = N // 2
    j = 0
    while 2 ** j <= top:
        for i in range(per_octave):
            m = int(round(2 ** (j + i / per_octave)))
            if 1 <= m <= top:
                ms.add(m)
        j += 1
    return sorted(ms)


_DIRECTIONS = ((1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, -1, 0), (1, 0, -1),
               (0, 1, -1), (1, 1, 1), (1, 1, -1), (1, -1, 1), (-1, 1, 1))


def holder_seminorm(f, grid, alpha, per_octave=8, directions=None):
    """Lower-bound estimate of the C^alpha seminorm from grid pair sampling.

    Returns (value, info) where info records the sampling density.
    """
    if not 0 < alpha < 1:
        raise ContractError("Hoelder exponent must lie in (0, 1)")
    directions = directions or _DIRECTIONS
    offs = holder_offsets(grid.N, per_octave)
    best = 0.0
    npairs = 0
    for d in directions:
        dn = math.sqrt(sum(c * c for c in d))
        for m in offs:
            shift = tuple(-m * c for c in d)
            g = np.roll(f, shift, axis=(-3, -2, -1))
            dist = m * grid.h * dn
            if dist > math.pi * math.sqrt(3) + 1e-12:
                continue
            val = float(_pointwise_abs(g - f).max()) / dist ** alpha
            npairs += grid.N ** 3
            best = max(best, val)
    info = {"offsets": offs, "directions": len(directions), "pairs": npairs, "per_octave": per_octave}
    return best, info


def lp_norm(f, grid, p, normalized=True):
    a = _pointwise_abs(f)
    vol = 1.0 if normalized else (2 * math.pi) ** 3
    if math.isinf(p):
        return float(a.max())
    return float((vol * np.mean(a ** p)) ** (1.0 / p))


def hs_norm(f, grid, s, normalized=True):
    """(sum_k (1+|k|^2)^s |fh(k)|^2)^{1/2}; normalized measure by default."""
    fh = to_spectral(f, grid)
    w = (1.0 + grid.ksq) ** s * grid.weight
    tot = float((w * np.abs(fh) ** 2).reshape(-1, *grid.shape_spec).sum())
    if not normalized:
        tot *= (2 * math.pi) ** 3
    return math.sqrt(tot)


def hminus1_norm_hat(fh, grid):
    w = grid.weight / (1.0 + grid.ksq)
    return math.sqrt(float((w * np.abs(fh) ** 2).reshape(-1, *grid.shape_spec).sum()))


def norm(f, kind, param=None, grid=None, dt=None):
    """Norm dispatcher.  ``f`` is a physical array (or a SpectralField).

    kinds: C0, CN (param n), Holder (param alpha), Lp (param p),
    Hs (param s), C1_tx (time series along axis 0, needs dt).
    """
    if isinstance(f, (SpectralField, SpectralTensorField)):
        grid = f.grid
        f = f.physical()
    if grid is None:
        grid = PeriodicGrid(f.shape[-1])
    if kind == "C0":
        return float(_pointwise_abs(f).max())
    if kind == "CN":
        return cn_norm(f, grid, int(param))
    if kind == "Holder":
        val, _ = holder_seminorm(f, grid, param)
        return float(_pointwise_abs(f).max()) + val
    if kind == "Lp":
        return lp_norm(f, grid, param)
    if kind == "Hs":
        return hs_norm(f, grid, param)
    if kind == "C1_tx":
        if dt is None:
            raise ContractError("C1_tx needs a time series and dt")
        space = max(cn_norm(f[i], grid, 1) for i in range(f.shape[0]))
        dtf = np.diff(f, axis=0) / dt
        tpart = float(max(_pointwise_abs(d).max() for d in dtf)) if len(dtf) else 0.0
        return space + tpart
    raise ContractError(f"unknown norm kind {kind!r}")


def write_norm_csv(path, rows):
    """rows: iterable of (time, norm_kind, value)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "norm_kind", "value"])
        for t, k, v in rows:
            w.writerow([repr(float(t)), k, repr(float(v))])
