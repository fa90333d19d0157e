"""Optional numba acceleration for the per-point kernels.

Set CIEULER_NO_NUMBA=1 to force the pure-numpy code paths (useful for
debugging and for the numba-vs-numpy benchmark).
"""
import os

import numpy as np

DISABLED = os.environ.get("CIEULER_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if DISABLED:
        raise ImportError
    from numba import njit, prange  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


def opts():
    # fastmath stays off: reductions must be bitwise reproducible
    return dict(cache=True, fastmath=False, nogil=True, error_model="numpy")


if HAVE_NUMBA:

    @njit(**opts())
    def _fourier_eval_nb(kvec, coef, pts, out):
        # out[p, c] = sum_m Re(coef[m, c] * exp(i k_m . x_p)), half-spectrum weights in coef
        npts = pts.shape[0]
        nm = kvec.shape[0]
        nc = coef.shape[1]
        for p in range(npts):
            x0 = pts[p, 0]
            x1 = pts[p, 1]
            x2 = pts[p, 2]
            for c in range(nc):
                out[p, c] = 0.0
            for m in range(nm):
                ph = kvec[m, 0] * x0 + kvec[m, 1] * x1 + kvec[m, 2] * x2
                cr = np.cos(ph)
                si = np.sin(ph)
                for c in range(nc):
                    z = coef[m, c]
                    out[p, c] += z.real * cr - z.imag * si
        return out


def _fourier_eval_np(kvec, coef, pts, out, chunk=8192):
    for s in range(0, pts.shape[0], chunk):
        ph = pts[s:s + chunk] @ kvec.T.astype(np.float64)
        e = np.exp(1j * ph)
        out[s:s + chunk] = (e @ coef).real
    return out


def fourier_eval(kvec, coef, pts, use_numba=None):
    """Evaluate a real trigonometric sum at arbitrary points.

    kvec: (m, 3) integer wavevectors, coef: (m, c) complex weights already
    doubled for conjugate pairs, pts: (n, 3) positions. Returns (n, c).
    """
    kvec = np.ascontiguousarray(kvec, dtype=np.float64)
    coef = np.ascontiguousarray(coef, dtype=np.complex128)
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    out = np.empty((pts.shape[0], coef.shape[1]), dtype=np.float64)
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba and HAVE_NUMBA:
        return _fourier_eval_nb(kvec, coef, pts, out)
    return _fourier_eval_np(kvec, coef, pts, out)
