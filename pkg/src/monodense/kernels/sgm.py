"""Single-direction semi-global aggregation along the width axis.

``scan_rows(e, P1, P2)`` runs the left-to-right recurrence on every row of a
C-contiguous ``(H, W, L)`` volume. Other directions are obtained by the
caller through flips and transposes. The update is written as
``e + (best - prev_min)`` so that with zero penalties the path cost equals
``e`` bit for bit.
"""

import numpy as np

from .._accel import njit, numba_enabled


@njit
def _scan_rows_nb(e, P1, P2, row0, row1, out):
    H, W, L = e.shape
    for y in range(row0, row1):
        for d in range(L):
            out[y, 0, d] = e[y, 0, d]
        for x in range(1, W):
            m = out[y, x - 1, 0]
            for d in range(1, L):
                if out[y, x - 1, d] < m:
                    m = out[y, x - 1, d]
            for d in range(L):
                best = out[y, x - 1, d]
                if d > 0:
                    v = out[y, x - 1, d - 1] + P1
                    if v < best:
                        best = v
                if d < L - 1:
                    v = out[y, x - 1, d + 1] + P1
                    if v < best:
                        best = v
                v = m + P2
                if v < best:
                    best = v
                out[y, x, d] = e[y, x, d] + (best - m)


def _scan_rows_np(e, P1, P2, row0, row1, out):
    H, W, L = e.shape
    rows = slice(row0, row1)
    out[rows, 0, :] = e[rows, 0, :]
    for x in range(1, W):
        prev = out[rows, x - 1, :]
        m = prev.min(axis=1, keepdims=True)
        best = prev.copy()
        if L > 1:
            np.minimum(best[:, 1:], prev[:, :-1] + P1, out=best[:, 1:])
            np.minimum(best[:, :-1], prev[:, 1:] + P1, out=best[:, :-1])
        np.minimum(best, m + P2, out=best)
        out[rows, x, :] = e[rows, x, :] + (best - m)


def scan_rows(e, P1, P2, row0=0, row1=None, out=None, use_numba=None):
    if use_numba is None:
        use_numba = numba_enabled()
    e = np.ascontiguousarray(e, dtype=np.float64)
    if row1 is None:
        row1 = e.shape[0]
    if out is None:
        out = np.empty_like(e)
    fn = _scan_rows_nb if use_numba else _scan_rows_np
    fn(e, float(P1), float(P2), int(row0), int(row1), out)
    return out
