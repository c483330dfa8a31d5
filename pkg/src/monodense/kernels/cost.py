"""Temporal SAD aggregation kernel.

For every reference pixel, depth sample and aggregation frame the pixel is
warped with ``h + rho * c`` (``rho`` the inverse depth, zero at the far
sentinel) and compared against the bilinearly sampled 3x3 patch. Sums and
per-sample frame counts are written; normalisation happens in the caller.
"""

import math

import numpy as np

from .._accel import njit, numba_enabled


@njit
def _bilinear(img, x, y):
    h, w = img.shape
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    if x0 >= w - 1:
        x0 = w - 2
    if y0 >= h - 1:
        y0 = h - 2
    fx = x - x0
    fy = y - y0
    top = (1.0 - fx) * img[y0, x0] + fx * img[y0, x0 + 1]
    bot = (1.0 - fx) * img[y0 + 1, x0] + fx * img[y0 + 1, x0 + 1]
    return (1.0 - fy) * top + fy * bot


@njit
def _aggregate_rows_nb(ref, srcs, A, c, rho, row0, row1, cost, count):
    H, W = ref.shape
    n_src = srcs.shape[0]
    n_d = rho.shape[0]
    for y in range(max(row0, 1), min(row1, H - 1)):
        for x in range(1, W - 1):
            for j in range(n_src):
                hx = A[j, 0, 0] * x + A[j, 0, 1] * y + A[j, 0, 2]
                hy = A[j, 1, 0] * x + A[j, 1, 1] * y + A[j, 1, 2]
                hz = A[j, 2, 0] * x + A[j, 2, 1] * y + A[j, 2, 2]
                for k in range(n_d):
                    pz = hz + rho[k] * c[j, 2]
                    if pz <= 0.0:
                        continue
                    uj = (hx + rho[k] * c[j, 0]) / pz
                    vj = (hy + rho[k] * c[j, 1]) / pz
                    if not (uj >= 1.0 and uj <= W - 2.0 and vj >= 1.0 and vj <= H - 2.0):
                        continue
                    sad = 0.0
                    for dy in range(-1, 2):
                        for dx in range(-1, 2):
                            val = _bilinear(srcs[j], uj + dx, vj + dy)
                            sad += abs(ref[y + dy, x + dx] - val)
                    cost[y, x, k] += sad
                    count[y, x, k] += 1


def _bilinear_np(img, x, y):
    h, w = img.shape
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.minimum(x0, w - 2)
    y0 = np.minimum(y0, h - 2)
    fx = x - x0
    fy = y - y0
    top = (1.0 - fx) * img[y0, x0] + fx * img[y0, x0 + 1]
    bot = (1.0 - fx) * img[y0 + 1, x0] + fx * img[y0 + 1, x0 + 1]
    return (1.0 - fy) * top + fy * bot


def _aggregate_rows_np(ref, srcs, A, c, rho, row0, row1, cost, count):
    H, W = ref.shape
    y_lo, y_hi = max(row0, 1), min(row1, H - 1)
    if y_hi <= y_lo or W < 3:
        return
    ys, xs = np.mgrid[y_lo:y_hi, 1 : W - 1].astype(np.float64)
    yi, xi = ys.astype(np.int64), xs.astype(np.int64)
    for j in range(srcs.shape[0]):
        hx = A[j, 0, 0] * xs + A[j, 0, 1] * ys + A[j, 0, 2]
        hy = A[j, 1, 0] * xs + A[j, 1, 1] * ys + A[j, 1, 2]
        hz = A[j, 2, 0] * xs + A[j, 2, 1] * ys + A[j, 2, 2]
        for k in range(rho.shape[0]):
            pz = hz + rho[k] * c[j, 2]
            ok = pz > 0.0
            with np.errstate(divide="ignore", invalid="ignore"):
                uj = (hx + rho[k] * c[j, 0]) / pz
                vj = (hy + rho[k] * c[j, 1]) / pz
            ok &= (uj >= 1.0) & (uj <= W - 2.0) & (vj >= 1.0) & (vj <= H - 2.0)
            if not ok.any():
                continue
            u_ok, v_ok = uj[ok], vj[ok]
            py, px = yi[ok], xi[ok]
            sad = np.zeros(u_ok.shape)
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    val = _bilinear_np(srcs[j], u_ok + dx, v_ok + dy)
                    sad += np.abs(ref[py + dy, px + dx] - val)
            cost[py, px, k] += sad
            count[py, px, k] += 1


def aggregate_rows(ref, srcs, A, c, rho, row0, row1, cost, count, use_numba=None):
    """Accumulate SAD sums and counts for reference rows ``[row0, row1)``."""
    if use_numba is None:
        use_numba = numba_enabled()
    fn = _aggregate_rows_nb if use_numba else _aggregate_rows_np
    fn(ref, srcs, A, c, rho, int(row0), int(row1), cost, count)
