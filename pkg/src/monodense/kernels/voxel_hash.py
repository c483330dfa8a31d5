"""Open-addressing voxel table kernels.

Keys are non-negative int64 values packing three signed 21-bit voxel
coordinates. Slots hold ``EMPTY`` or ``TOMBSTONE`` when unused. Probing is
linear from a multiplicative hash of the key; the capacity is a power of two.
"""

import numpy as np

from .._accel import njit, numba_enabled

EMPTY = np.int64(-1)
TOMBSTONE = np.int64(-2)

COORD_BITS = 21
COORD_OFFSET = 1 << (COORD_BITS - 1)
COORD_MASK = (1 << COORD_BITS) - 1
_HASH_MULT = np.uint64(0x9E3779B97F4A7C15)


def pack_keys(ijk):
    ijk = np.asarray(ijk, dtype=np.int64)
    if np.any(np.abs(ijk) >= COORD_OFFSET):
        raise OverflowError("voxel coordinate outside the packable range")
    u = (ijk + COORD_OFFSET) & COORD_MASK
    return (u[..., 0] << (2 * COORD_BITS)) | (u[..., 1] << COORD_BITS) | u[..., 2]


def unpack_keys(keys):
    keys = np.asarray(keys, dtype=np.int64)
    ix = (keys >> (2 * COORD_BITS)) & COORD_MASK
    iy = (keys >> COORD_BITS) & COORD_MASK
    iz = keys & COORD_MASK
    return np.stack([ix, iy, iz], axis=-1) - COORD_OFFSET


@njit
def _hash_nb(key, mask):
    h = np.uint64(key) * np.uint64(0x9E3779B97F4A7C15)
    return np.int64((h >> np.uint64(20)) & np.uint64(mask))


def _hash_np(keys, mask):
    with np.errstate(over="ignore"):
        h = keys.astype(np.uint64) * _HASH_MULT
    return ((h >> np.uint64(20)) & np.uint64(mask)).astype(np.int64)


@njit
def _find_nb(table, queries, out):
    mask = table.shape[0] - 1
    for i in range(queries.shape[0]):
        q = queries[i]
        pos = _hash_nb(q, mask)
        out[i] = -1
        for _ in range(table.shape[0]):
            k = table[pos]
            if k == q:
                out[i] = pos
                break
            if k == -1:
                break
            pos = (pos + 1) & mask


def _find_np(table, queries, out):
    mask = table.shape[0] - 1
    out[:] = -1
    pos = _hash_np(queries, mask)
    active = np.arange(queries.shape[0])
    for _ in range(table.shape[0]):
        if active.size == 0:
            break
        k = table[pos[active]]
        hit = k == queries[active]
        out[active[hit]] = pos[active[hit]]
        stop = hit | (k == EMPTY)
        active = active[~stop]
        pos[active] = (pos[active] + 1) & mask


@njit
def _insert_nb(table, keys, out):
    """Insert keys known to be absent; slot of each written to ``out``."""
    mask = table.shape[0] - 1
    for i in range(keys.shape[0]):
        pos = _hash_nb(keys[i], mask)
        while table[pos] >= 0:
            pos = (pos + 1) & mask
        table[pos] = keys[i]
        out[i] = pos


def _insert_np(table, keys, out):
    mask = table.shape[0] - 1
    pos = _hash_np(keys, mask)
    active = np.arange(keys.shape[0])
    while active.size:
        free = table[pos[active]] < 0
        cand = active[free]
        # lowest key index wins a contested slot; slot layout may differ from the
        # sequential kernel, lookups do not
        _, first = np.unique(pos[cand], return_index=True)
        winners = cand[first]
        table[pos[winners]] = keys[winners]
        out[winners] = pos[winners]
        done = np.zeros(keys.shape[0], dtype=bool)
        done[winners] = True
        active = active[~done[active]]
        pos[active] = (pos[active] + 1) & mask


def find_slots(table, queries, use_numba=None):
    if use_numba is None:
        use_numba = numba_enabled()
    queries = np.ascontiguousarray(queries, dtype=np.int64)
    out = np.empty(queries.shape[0], dtype=np.int64)
    (_find_nb if use_numba else _find_np)(table, queries, out)
    return out


def insert_keys(table, keys, use_numba=None):
    if use_numba is None:
        use_numba = numba_enabled()
    keys = np.ascontiguousarray(keys, dtype=np.int64)
    out = np.empty(keys.shape[0], dtype=np.int64)
    (_insert_nb if use_numba else _insert_np)(table, keys, out)
    return out
