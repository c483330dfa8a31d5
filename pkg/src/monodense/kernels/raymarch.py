"""Ray marching from emitted depth pixels into voxel update records.

Each pixel ray is sampled at a fixed step in camera depth ``t`` (the ray is
``t * K^-1 [u, v, 1]``). Consecutive samples in the same voxel collapse to
one visit. A visited voxel is classified by the camera depth ``z_c`` of its
centre against the measured depth ``d``:

* hit when ``d - r <= z_c <= d + r``: record ``(key, alpha, d - z_c)``
* carve when ``z_c <= d - r`` and the pixel passes the carving gate
* ignored otherwise

The camera-side part of the ray is only marched for pixels that may carve.
"""

import math

import numpy as np

from .._accel import njit, numba_enabled
from .voxel_hash import COORD_BITS, COORD_MASK, COORD_OFFSET


@njit
def _march_nb(depth, alpha, inlier, fx, fy, cx, cy, R, T, vs, r, step, gate, row0, row1,
              fill, hit_key, hit_alpha, hit_delta, carve_key):
    H, W = depth.shape
    nh = 0
    nc = 0
    for y in range(row0, row1):
        for x in range(W):
            d = depth[y, x]
            if not (d > 0.0):
                continue
            carve = inlier[y, x] > gate
            qx = (x - cx) / fx
            qy = (y - cy) / fy
            rx = R[0, 0] * qx + R[0, 1] * qy + R[0, 2]
            ry = R[1, 0] * qx + R[1, 1] * qy + R[1, 2]
            rz = R[2, 0] * qx + R[2, 1] * qy + R[2, 2]
            t0 = 0.0 if carve else max(0.0, d - r)
            n = int(math.floor((d + r - t0) / step)) + 1
            prev = np.int64(-1)
            for s in range(n):
                t = t0 + s * step
                ix = np.int64(math.floor((t * rx + T[0]) / vs))
                iy = np.int64(math.floor((t * ry + T[1]) / vs))
                iz = np.int64(math.floor((t * rz + T[2]) / vs))
                key = (((ix + COORD_OFFSET) & COORD_MASK) << (2 * COORD_BITS)) | (
                    ((iy + COORD_OFFSET) & COORD_MASK) << COORD_BITS) | ((iz + COORD_OFFSET) & COORD_MASK)
                if key == prev:
                    continue
                prev = key
                zc = (R[0, 2] * ((ix + 0.5) * vs - T[0]) + R[1, 2] * ((iy + 0.5) * vs - T[1])
                      + R[2, 2] * ((iz + 0.5) * vs - T[2]))
                if d - r <= zc <= d + r:
                    if fill:
                        hit_key[nh] = key
                        hit_alpha[nh] = alpha[y, x]
                        hit_delta[nh] = d - zc
                    nh += 1
                elif carve and zc <= d - r:
                    if fill:
                        carve_key[nc] = key
                    nc += 1
    return nh, nc


def _march_np(depth, alpha, inlier, fx, fy, cx, cy, R, T, vs, r, step, gate, row0, row1):
    sub = depth[row0:row1]
    ys, xs = np.nonzero(sub > 0.0)
    empty = (np.empty(0, np.int64), np.empty(0), np.empty(0), np.empty(0, np.int64))
    if ys.size == 0:
        return empty
    yy = ys + row0
    d = sub[ys, xs]
    carve = inlier[yy, xs] > gate
    qx = (xs - cx) / fx
    qy = (yy - cy) / fy
    rx = R[0, 0] * qx + R[0, 1] * qy + R[0, 2]
    ry = R[1, 0] * qx + R[1, 1] * qy + R[1, 2]
    rz = R[2, 0] * qx + R[2, 1] * qy + R[2, 2]
    t0 = np.where(carve, 0.0, np.maximum(0.0, d - r))
    n = np.floor((d + r - t0) / step).astype(np.int64) + 1
    ray = np.repeat(np.arange(d.size), n)
    starts = np.cumsum(n) - n
    s = np.arange(ray.size) - starts[ray]
    t = t0[ray] + s * step
    ix = np.floor((t * rx[ray] + T[0]) / vs).astype(np.int64)
    iy = np.floor((t * ry[ray] + T[1]) / vs).astype(np.int64)
    iz = np.floor((t * rz[ray] + T[2]) / vs).astype(np.int64)
    key = (((ix + COORD_OFFSET) & COORD_MASK) << (2 * COORD_BITS)) | (
        ((iy + COORD_OFFSET) & COORD_MASK) << COORD_BITS) | ((iz + COORD_OFFSET) & COORD_MASK)
    fresh = np.ones(key.size, dtype=bool)
    fresh[1:] = (key[1:] != key[:-1]) | (ray[1:] != ray[:-1])
    ray, key, ix, iy, iz = ray[fresh], key[fresh], ix[fresh], iy[fresh], iz[fresh]
    zc = (R[0, 2] * ((ix + 0.5) * vs - T[0]) + R[1, 2] * ((iy + 0.5) * vs - T[1])
          + R[2, 2] * ((iz + 0.5) * vs - T[2]))
    dr = d[ray]
    hit = (zc >= dr - r) & (zc <= dr + r)
    carved = ~hit & carve[ray] & (zc <= dr - r)
    a = alpha[yy, xs][ray]
    return key[hit], a[hit], (dr - zc)[hit], key[carved]


def march_rows(depth, alpha, inlier, intr, pose, vs, r, step, gate, row0, row1, use_numba=None):
    """Hit and carve records for pixel rows ``[row0, row1)``.

    Returns ``(hit_keys, hit_alpha, hit_delta, carve_keys)`` in ray order.
    """
    if use_numba is None:
        use_numba = numba_enabled()
    R = np.ascontiguousarray(pose.rotation)
    T = np.ascontiguousarray(pose.translation)
    args = (depth, alpha, inlier, float(intr.fx), float(intr.fy), float(intr.cx), float(intr.cy),
            R, T, float(vs), float(r), float(step), float(gate), int(row0), int(row1))
    if not use_numba:
        return _march_np(*args)
    dummy_i = np.empty(0, np.int64)
    dummy_f = np.empty(0)
    nh, nc = _march_nb(*args, False, dummy_i, dummy_f, dummy_f, dummy_i)
    hk = np.empty(nh, np.int64)
    ha = np.empty(nh)
    hd = np.empty(nh)
    ck = np.empty(nc, np.int64)
    _march_nb(*args, True, hk, ha, hd, ck)
    return hk, ha, hd, ck
