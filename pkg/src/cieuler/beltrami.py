"""Beltrami plane waves, rational direction sets and geometric coefficients.

Both direction sets are the 12 signed permutations of (3, 4, 0)/5 split by
cyclic orientation, so n_* = 5 and each set is isotropic
(sum of xi xi^T equals 4 Id).  The coefficients are affine in R:
c_xi(R) = <M_xi, R> with M_xi the minimum-norm right inverse of
R -> 1/2 sum c_xi (Id - xi xi^T), and gamma_xi = sqrt(c_xi).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import lcm

import numpy as np

from .errors import AdmissibilityError, ContractError

# numerators over 5; closure under negation is added at load time
_BASE_SETS = (
    ((3, 4, 0), (3, -4, 0), (0, 3, 4), (0, 3, -4), (4, 0, 3), (-4, 0, 3)),
    ((4, 3, 0), (4, -3, 0), (0, 4, 3), (0, 4, -3), (3, 0, 4), (-3, 0, 4)),
)
_DEN = 5

_SYM = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def _frac_vec(v, den=1):
    return tuple(Fraction(c, den) for c in v)


def _dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def _cross(u, v):
    return (u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0])


def frame_vector(xi):
    """Rational unit A with A.xi = 0, using the canonical sign so A_{-xi} = A_xi."""
    xi = tuple(Fraction(c) for c in xi)
    # canonical representative: first nonzero coordinate positive
    s = next(c for c in xi if c != 0)
    rep = xi if s > 0 else tuple(-c for c in xi)
    zeros = [i for i, c in enumerate(rep) if c == 0]
    if zeros:
        i, j = [k for k in range(3) if k != zeros[0]]
        A = [Fraction(0)] * 3
        A[i], A[j] = -rep[j], rep[i]
        return tuple(A)
    raise ContractError(f"no rational frame rule for {xi}")


def _rank(rows):
    rows = [list(r) for r in rows]
    rank, ncol = 0, len(rows[0])
    for col in range(ncol):
        piv = next((r for r in range(rank, len(rows)) if rows[r][col] != 0), None)
        if piv is None:
            continue
        rows[rank], rows[piv] = rows[piv], rows[rank]
        for r in range(len(rows)):
            if r != rank and rows[r][col] != 0:
                f = rows[r][col] / rows[rank][col]
                rows[r] = [a - f * b for a, b in zip(rows[r], rows[rank])]
        rank += 1
    return rank


def _solve(Amat, b):
    """Exact Gauss-Jordan solve for a square rational system."""
    n = len(Amat)
    M = [list(row) + [b[i]] for i, row in enumerate(Amat)]
    for col in range(n):
        piv = next(r for r in range(col, n) if M[r][col] != 0)
        M[col], M[piv] = M[piv], M[col]
        p = M[col][col]
        M[col] = [x / p for x in M[col]]
        for r in range(n):
            if r != col and M[r][col] != 0:
                f = M[r][col]
                M[r] = [a - f * c for a, c in zip(M[r], M[col])]
    return [M[i][n] for i in range(n)]


def _sym_inner(S, T):
    """Frobenius inner product of symmetric matrices in packed coordinates."""
    return sum(S[i] * T[i] for i in range(3)) + 2 * sum(S[i] * T[i] for i in range(3, 6))


def _proj(xi):
    """Packed coordinates of Id - xi xi^T."""
    I = (1, 1, 1, 0, 0, 0)
    return tuple(Fraction(I[n]) - xi[i] * xi[j] for n, (i, j) in enumerate(_SYM))


@dataclass(frozen=True)
class DirectionSet:
    sets: tuple  # two tuples of 12 Fraction triples
    frames: dict  # xi -> A_xi
    n_star: int

    def vectors(self, alpha):
        return self.sets[alpha % 2]

    def as_float(self, alpha):
        return np.array([[float(c) for c in xi] for xi in self.vectors(alpha)])

    def frames_float(self, alpha):
        return np.array([[float(c) for c in self.frames[xi]] for xi in self.vectors(alpha)])

    def B(self, alpha):
        """Complex B_xi for every xi in the set, shape (12, 3)."""
        xs = self.as_float(alpha)
        As = self.frames_float(alpha)
        return (As + 1j * np.cross(xs, As)) / math.sqrt(2.0)

    def integer_vectors(self, alpha, lam):
        if lam % self.n_star:
            raise ContractError(f"lambda={lam} is not a multiple of n_*={self.n_star}")
        return np.array([[int(c * lam) for c in xi] for xi in self.vectors(alpha)])

    def validate(self):
        s0, s1 = set(self.sets[0]), set(self.sets[1])
        assert not s0 & s1, "direction sets overlap"
        for S in (s0, s1):
            assert len(S) == 12
            assert {tuple(-c for c in xi) for xi in S} == S, "set not closed under negation"
            for xi in S:
                assert _dot(xi, xi) == 1, "non-unit direction"
                A = self.frames[xi]
                assert _dot(A, xi) == 0 and _dot(A, A) == 1
                assert self.frames[tuple(-c for c in xi)] == A
            assert _rank([_proj(xi) for xi in S]) == 6, "set does not span symmetric matrices"
        for S in self.sets:
            for xi in S:
                assert all((c * self.n_star).denominator == 1 for c in xi)
        return True


@lru_cache(maxsize=1)
def make_direction_sets() -> DirectionSet:
    sets = []
    frames = {}
    for base in _BASE_SETS:
        vecs = [_frac_vec(v, _DEN) for v in base]
        vecs = vecs + [tuple(-c for c in v) for v in vecs]
        for v in vecs:
            frames[v] = frame_vector(v)
        sets.append(tuple(vecs))
    dens = [c.denominator for S in sets for v in S for c in v]
    ds = DirectionSet(tuple(sets), frames, lcm(*dens))
    ds.validate()
    return ds


# -- waves -------------------------------------------------------------------


def wave(xi, lam, grid, A=None):
    """Complex Beltrami wave B_xi exp(i lam xi.x) sampled on the grid, shape (3, N, N, N)."""
    xi = tuple(Fraction(c) for c in xi)
    k = [c * lam for c in xi]
    if any(c.denominator != 1 for c in k):
        raise ContractError("lambda*xi must be an integer vector")
    k = np.array([int(c) for c in k])
    if np.abs(k).max() >= grid.N // 2:
        raise ContractError("wave frequency beyond Nyquist")
    A = frame_vector(xi) if A is None else A
    xf = np.array([float(c) for c in xi])
    Af = np.array([float(c) for c in A])
    B = (Af + 1j * np.cross(xf, Af)) / math.sqrt(2.0)
    X = grid.coords
    ph = np.exp(1j * (k[0] * X[0] + k[1] * X[1] + k[2] * X[2]))
    return B[:, None, None, None] * ph


def complex_curl(f):
    N = f.shape[-1]
    k = np.fft.fftfreq(N, 1.0 / N)
    k1, k2, k3 = k.reshape(N, 1, 1), k.reshape(1, N, 1), k.reshape(1, 1, N)
    fh = np.fft.fftn(f, axes=(-3, -2, -1))
    c = np.stack([1j * (k2 * fh[2] - k3 * fh[1]), 1j * (k3 * fh[0] - k1 * fh[2]), 1j * (k1 * fh[1] - k2 * fh[0])])
    return np.fft.ifftn(c, axes=(-3, -2, -1))


def superpose(coeffs, alpha, lam, grid, ds=None):
    """W = sum a_xi B_xi exp(i lam xi.x); coeffs must satisfy conj(a_xi) = a_{-xi}."""
    ds = ds or make_direction_sets()
    out = np.zeros((3,) + grid.shape_phys, dtype=complex)
    for a, xi in zip(coeffs, ds.vectors(alpha)):
        out += a * wave(xi, lam, grid, ds.frames[xi])
    return out


def hermitian_coefficients(rng, alpha=0, ds=None):
    """Random complex a_xi with conj(a_xi) = a_{-xi} (the second half of a set negates the first)."""
    ds = ds or make_direction_sets()
    half = len(ds.vectors(alpha)) // 2
    a = rng.normal(size=half) + 1j * rng.normal(size=half)
    return np.concatenate([a, np.conj(a)])


def averaging_reference(coeffs, alpha, ds=None):
    """1/2 sum |a_xi|^2 (Id - xi xi^T)."""
    ds = ds or make_direction_sets()
    xs = ds.as_float(alpha)
    out = np.zeros((3, 3))
    for a, x in zip(coeffs, xs):
        out += 0.5 * abs(a) ** 2 * (np.eye(3) - np.outer(x, x))
    return out


# -- geometric coefficients ---------------------------------------------------


@dataclass(frozen=True)
class GeometricCoefficients:
    M: tuple  # per alpha: (12, 3, 3) float array of M_xi
    M_exact: tuple  # per alpha: list of packed Fraction 6-tuples
    c_id: tuple  # per alpha: (12,) values c_xi(Id)
    cStarComputed: float
    ds: DirectionSet

    def c(self, R, alpha):
        """c_xi(R) for R of shape (3, 3, ...) -> (12, ...)."""
        M = self.M[alpha % 2]
        return np.einsum("nij,ij...->n...", M, R)

    def gamma(self, R, alpha, check=True, tol=1e-12):
        R = np.asarray(R, dtype=float)
        if check:
            dev = R - np.eye(3).reshape((3, 3) + (1,) * (R.ndim - 2))
            fro = np.sqrt((dev ** 2).sum(axis=(0, 1)))
            if np.max(fro) > self.cStarComputed * (1 + tol):
                raise AdmissibilityError(
                    f"R outside the admissibility ball: |R-Id|_F = {float(np.max(fro)):.6g} > {self.cStarComputed:.6g}")
        c = self.c(R, alpha)
        if np.min(c) <= 0:
            raise AdmissibilityError("nonpositive geometric coefficient")
        return np.sqrt(c)

    def reconstruct(self, gam, alpha):
        xs = self.ds.as_float(alpha)
        P = np.eye(3)[None] - xs[:, :, None] * xs[:, None, :]
        return 0.5 * np.einsum("n...,nij->ij...", gam ** 2, P)

    def to_json(self):
        return {"cStarComputed": self.cStarComputed,
                "c_id": [list(map(float, c)) for c in self.c_id]}


@lru_cache(maxsize=1)
def geometric_coefficients() -> GeometricCoefficients:
    ds = make_direction_sets()
    Ms, Mex, cids = [], [], []
    radius = math.inf
    for alpha in (0, 1):
        projs = [_proj(xi) for xi in ds.vectors(alpha)]
        half_projs = [tuple(p / 2 for p in P) for P in projs]
        # Gram operator G X = sum_xi <P_xi/2, X> P_xi/2 in packed coordinates
        basis = [tuple(Fraction(1 if n == m else 0) for n in range(6)) for m in range(6)]
        cols = []
        for E in basis:
            img = [Fraction(0)] * 6
            for hp in half_projs:
                w = _sym_inner(hp, E)
                img = [a + w * b for a, b in zip(img, hp)]
            cols.append(img)
        G = [[cols[m][n] for m in range(6)] for n in range(6)]
        exact = []
        for hp in half_projs:
            exact.append(tuple(_solve(G, list(hp))))  # M_xi = G^{-1}(P_xi/2)
        Id = (1, 1, 1, 0, 0, 0)
        c_id = [_sym_inner(Mx, Id) for Mx in exact]
        # exact reconstruction check: sum c_xi(S) P_xi/2 = S for each basis S
        for E in basis:
            acc = [Fraction(0)] * 6
            for Mx, hp in zip(exact, half_projs):
                w = _sym_inner(Mx, E)
                acc = [a + w * b for a, b in zip(acc, hp)]
            assert acc == list(E), "affine right inverse failed exact check"
        mats = np.zeros((12, 3, 3))
        for n, Mx in enumerate(exact):
            for m, (i, j) in enumerate(_SYM):
                mats[n, i, j] = mats[n, j, i] = float(Mx[m])
        fro = [math.sqrt(float(_sym_inner(Mx, Mx))) for Mx in exact]
        radius = min(radius, min(float(c) / f for c, f in zip(c_id, fro)))
        Ms.append(mats)
        Mex.append(exact)
        cids.append(np.array([float(c) for c in c_id]))
    return GeometricCoefficients(tuple(Ms), tuple(Mex), tuple(cids), radius, ds)


def gamma_coeffs(R, alpha, coeffs=None):
    coeffs = coeffs or geometric_coefficients()
    return coeffs.gamma(R, alpha)


def _derivative_factor(k):
    # |d^k/dc^k sqrt(c)| = prod_{i<k} |1/2 - i| * c^{1/2-k}
    f = 1.0
    for i in range(k):
        f *= abs(0.5 - i)
    return f


def measure_universal_M(n: int, radius=None, samples: int = 4000, seed: int = 0, coeffs=None) -> float:
    """Sampled bound of sum_xi ||gamma_xi||_{C^n} over the ball B_radius(Id).

    Samples the ball uniformly (fixed seed, center included) and, for each
    xi, takes the sup over samples of each derivative order, using the
    closed form |D^k gamma|(R) = |d^k sqrt/dc^k| |M_xi|_F^k.
    """
    if n > 4:
        raise ContractError("n must be <= 4")
    coeffs = coeffs or geometric_coefficients()
    r = coeffs.cStarComputed if radius is None else float(radius)
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(samples, 6))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rad = rng.random(samples) ** (1.0 / 6.0)
    pts = np.vstack([np.zeros(6), dirs * rad[:, None]])
    # orthonormal packed basis for symmetric matrices under the Frobenius product
    S = np.zeros((len(pts), 3, 3))
    s2 = 1.0 / math.sqrt(2.0)
    for m, (i, j) in enumerate(_SYM):
        w = 1.0 if i == j else s2
        S[:, i, j] += w * pts[:, m]
        if i != j:
            S[:, j, i] += w * pts[:, m]
    total = 0.0
    for alpha in (0, 1):
        M = coeffs.M[alpha]
        fro = np.sqrt((M ** 2).sum(axis=(1, 2)))
        c = coeffs.c_id[alpha][:, None] + r * np.einsum("nij,sij->ns", M, S)
        if np.min(c) <= 0:
            return math.inf
        for xi in range(M.shape[0]):
            for k in range(n + 1):
                total += float(np.max(_derivative_factor(k) * fro[xi] ** k * c[xi] ** (0.5 - k)))
    return total / 2.0  # average over the two index sets


def dump_json(coeffs=None, n_M: int = 0) -> str:
    coeffs = coeffs or geometric_coefficients()
    ds = coeffs.ds
    payload = {
        "Lambda0": [[str(c) for c in xi] for xi in ds.sets[0]],
        "Lambda1": [[str(c) for c in xi] for xi in ds.sets[1]],
        "n_star": ds.n_star,
        "cStarComputed": coeffs.cStarComputed,
        "M": measure_universal_M(n_M, coeffs=coeffs),
        "M_order": n_M,
    }
    return json.dumps(payload, indent=2)
