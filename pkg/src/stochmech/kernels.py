"""Hot numerical kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import: numba when it imports cleanly and the
environment variable ``STOCHMECH_NO_NUMBA`` is unset (or "0"), numpy
otherwise.  Both backends are always importable as ``*_numpy`` / ``*_numba``
so tests and the benchmark can compare them side by side.
"""
from __future__ import annotations

import os

import numpy as np
from scipy.linalg import solve_banded

from .errors import LinearSolveFailure

PIVOT_FLOOR = 1e-300

try:
    if os.environ.get("STOCHMECH_NO_NUMBA", "0") not in ("", "0"):
        raise ImportError("numba disabled by STOCHMECH_NO_NUMBA")
    import numba
    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# -- Euler-Maruyama -----------------------------------------------------------
#
# Advance every path ``n_steps`` steps of size ``dt``.  ``sign`` is +1 for
# forward integration (x += b dt) and -1 for backward (x -= b dt).  The drift
# is tabulated on ``frames[F, n_grid]`` at ``frame_times`` (ascending) and is
# interpolated linearly in space (clamped at the grid ends) and in time.
# ``z[n_steps, n_paths]`` holds standard normals.  Paths that leave the grid
# by more than one cell are reflected and flagged.

def _time_weights(frame_times, t):
    nf = frame_times.shape[0]
    if nf == 1 or t <= frame_times[0]:
        return 0, 0, 0.0
    if t >= frame_times[nf - 1]:
        return nf - 1, nf - 1, 0.0
    j = np.searchsorted(frame_times, t, side="right") - 1
    w = (t - frame_times[j]) / (frame_times[j + 1] - frame_times[j])
    return j, j + 1, w


def em_block_numpy(x, flags, z, frames, frame_times, x_min, dx, t0, dt, sign, sigma):
    n_grid = frames.shape[1]
    x_max = x_min + (n_grid - 1) * dx
    sq = np.sqrt(dt)
    for s in range(z.shape[0]):
        t = t0 + sign * s * dt
        j0, j1, w = _time_weights(frame_times, t)
        pos = np.clip((x - x_min) / dx, 0.0, n_grid - 1.0)
        i = np.minimum(pos.astype(np.int64), n_grid - 2)
        a = pos - i
        b0 = frames[j0, i] * (1.0 - a) + frames[j0, i + 1] * a
        b1 = frames[j1, i] * (1.0 - a) + frames[j1, i + 1] * a
        b = b0 * (1.0 - w) + b1 * w
        x += sign * b * dt + sigma * sq * z[s]
        lo = x < x_min - dx
        hi = x > x_max + dx
        if lo.any() or hi.any():
            x[lo] = 2 * x_min - x[lo]
            x[hi] = 2 * x_max - x[hi]
            np.clip(x, x_min - dx, x_max + dx, out=x)
            flags |= lo | hi
    return x, flags


def tridiag_numpy(lower, diag, upper, rhs):
    """Solve a tridiagonal system; ``lower[0]`` and ``upper[-1]`` are ignored."""
    ab = np.zeros((3, diag.shape[0]), dtype=np.result_type(lower, diag, upper, rhs))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    try:
        out = solve_banded((1, 1), ab, rhs)
    except np.linalg.LinAlgError as exc:
        raise LinearSolveFailure(str(exc)) from exc
    if not np.all(np.isfinite(out)):
        raise LinearSolveFailure("tridiagonal solve produced non-finite values")
    return out


if HAVE_NUMBA:
    @numba.njit(cache=True, nogil=True)
    def _em_block_jit(x, flags, z, frames, frame_times, x_min, dx, t0, dt, sign, sigma):
        n_grid = frames.shape[1]
        nf = frame_times.shape[0]
        x_max = x_min + (n_grid - 1) * dx
        sq = np.sqrt(dt)
        top = n_grid - 1.0
        for s in range(z.shape[0]):
            t = t0 + sign * s * dt
            if nf == 1 or t <= frame_times[0]:
                j0 = 0
                j1 = 0
                w = 0.0
            elif t >= frame_times[nf - 1]:
                j0 = nf - 1
                j1 = nf - 1
                w = 0.0
            else:
                j0 = np.searchsorted(frame_times, t, side="right") - 1
                j1 = j0 + 1
                w = (t - frame_times[j0]) / (frame_times[j1] - frame_times[j0])
            for p in range(x.shape[0]):
                pos = (x[p] - x_min) / dx
                if pos < 0.0:
                    pos = 0.0
                elif pos > top:
                    pos = top
                i = int(pos)
                if i > n_grid - 2:
                    i = n_grid - 2
                a = pos - i
                b0 = frames[j0, i] * (1.0 - a) + frames[j0, i + 1] * a
                b1 = frames[j1, i] * (1.0 - a) + frames[j1, i + 1] * a
                b = b0 * (1.0 - w) + b1 * w
                xn = x[p] + (sign * b * dt + sigma * sq * z[s, p])
                if xn < x_min - dx:
                    xn = 2 * x_min - xn
                    flags[p] = True
                elif xn > x_max + dx:
                    xn = 2 * x_max - xn
                    flags[p] = True
                if xn < x_min - dx:
                    xn = x_min - dx
                elif xn > x_max + dx:
                    xn = x_max + dx
                x[p] = xn
        return x, flags

    @numba.njit(cache=True, nogil=True)
    def _tridiag_jit(lower, diag, upper, rhs):
        n = diag.shape[0]
        c = np.empty(n, dtype=rhs.dtype)
        d = np.empty(n, dtype=rhs.dtype)
        ok = True
        beta = diag[0]
        if abs(beta) < PIVOT_FLOOR:
            ok = False
            beta = 1.0
        c[0] = upper[0] / beta
        d[0] = rhs[0] / beta
        for i in range(1, n):
            beta = diag[i] - lower[i] * c[i - 1]
            if abs(beta) < PIVOT_FLOOR:
                ok = False
                beta = 1.0
            c[i] = upper[i] / beta if i < n - 1 else 0.0
            d[i] = (rhs[i] - lower[i] * d[i - 1]) / beta
        for i in range(n - 2, -1, -1):
            d[i] = d[i] - c[i] * d[i + 1]
        return d, ok

    def em_block_numba(x, flags, z, frames, frame_times, x_min, dx, t0, dt, sign, sigma):
        return _em_block_jit(x, flags, z, frames, frame_times, float(x_min), float(dx),
                             float(t0), float(dt), float(sign), float(sigma))

    def tridiag_numba(lower, diag, upper, rhs):
        dtype = np.result_type(lower, diag, upper, rhs)
        out, ok = _tridiag_jit(lower.astype(dtype), diag.astype(dtype),
                               upper.astype(dtype), rhs.astype(dtype))
        if not ok or not np.all(np.isfinite(out)):
            raise LinearSolveFailure("zero pivot in tridiagonal solve")
        return out
else:
    em_block_numba = None
    tridiag_numba = None


if BACKEND == "numba":
    em_block = em_block_numba
    solve_tridiagonal = tridiag_numba
else:
    em_block = em_block_numpy
    solve_tridiagonal = tridiag_numpy
