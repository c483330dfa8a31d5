"""Marching cubes over sparse voxel samples.

Samples live at voxel centres. A cell is the cube spanned by eight
neighbouring voxels and is polygonised only when all eight are stored.
Vertices on shared edges are merged, so closed surfaces come out watertight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._mc_tables import CORNERS, EDGES, TRIANGLES
from .kernels.voxel_hash import pack_keys

_CORNERS = np.array(CORNERS, dtype=np.int64)
_TRI = np.full((256, 15), -1, dtype=np.int64)
for _i, _row in enumerate(TRIANGLES):
    _TRI[_i, : len(_row)] = _row
_NTRI = np.array([len(r) // 3 for r in TRIANGLES], dtype=np.int64)

# each edge as (lower corner, axis); the table's edges join corners one step apart
_EDGE_LO = np.empty(12, dtype=np.int64)
_EDGE_HI = np.empty(12, dtype=np.int64)
_EDGE_AXIS = np.empty(12, dtype=np.int64)
for _e, (_a, _b) in enumerate(EDGES):
    _diff = _CORNERS[_b] - _CORNERS[_a]
    _axis = int(np.flatnonzero(_diff)[0])
    _lo, _hi = (_a, _b) if _diff[_axis] > 0 else (_b, _a)
    _EDGE_LO[_e], _EDGE_HI[_e], _EDGE_AXIS[_e] = _lo, _hi, _axis


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh has non-finite vertices")

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self):
        return len(self.triangles)

    def edges(self):
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.sort(e, axis=1)

    def euler_characteristic(self):
        e = np.unique(self.edges(), axis=0) if len(self.triangles) else np.zeros((0, 2))
        used = np.unique(self.triangles) if len(self.triangles) else np.zeros(0)
        return len(used) - len(e) + len(self.triangles)

    def is_closed(self):
        if not len(self.triangles):
            return False
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 2))


def height_colors(vertices, axis=2):
    """Blue-to-red ramp over the vertex coordinate along ``axis``."""
    h = vertices[:, axis]
    if h.size == 0:
        return np.zeros((0, 3), np.uint8)
    span = h.max() - h.min()
    s = (h - h.min()) / span if span > 0 else np.zeros_like(h)
    r = np.clip(1.5 - np.abs(4 * s - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * s - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * s - 1), 0, 1)
    return np.round(255 * np.stack([r, g, b], axis=1)).astype(np.uint8)


def marching_cubes_sparse(ijk, phi, voxel_size, level=0.0, color_by_height=False, height_axis=2):
    """Triangulate the ``level`` isosurface of values ``phi`` at voxels ``ijk``."""
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    phi = np.asarray(phi, dtype=np.float64) - level
    if ijk.shape[0] == 0:
        return Mesh.empty()
    keys = pack_keys(ijk)
    order = np.argsort(keys, kind="stable")
    keys, ijk, phi = keys[order], ijk[order], phi[order]

    corner_keys = pack_keys(ijk[:, None, :] + _CORNERS[None, :, :])
    pos = np.searchsorted(keys, corner_keys)
    pos_c = np.minimum(pos, keys.size - 1)
    found = keys[pos_c] == corner_keys
    full = found.all(axis=1)
    if not full.any():
        return Mesh.empty()
    cell_idx = pos_c[full]  # (C, 8) voxel indices
    cell_ijk = ijk[full]
    vals = phi[cell_idx]
    case = ((vals < 0) << np.arange(8)).sum(axis=1)
    ntri = _NTRI[case]
    keep = ntri > 0
    if not keep.any():
        return Mesh.empty()
    cell_idx, cell_ijk, vals, case, ntri = cell_idx[keep], cell_ijk[keep], vals[keep], case[keep], ntri[keep]

    cell_of_tri = np.repeat(np.arange(case.size), ntri)
    tri_in_cell = np.arange(cell_of_tri.size) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    edges = _TRI[case[cell_of_tri][:, None], 3 * tri_in_cell[:, None] + np.arange(3)[None, :]]  # (T, 3)

    c = np.repeat(cell_of_tri, 3)
    e = edges.ravel()
    lo_ijk = cell_ijk[c] + _CORNERS[_EDGE_LO[e]]
    axis = _EDGE_AXIS[e]
    edge_id = np.stack([pack_keys(lo_ijk), axis], axis=1)
    uniq, inverse = np.unique(edge_id, axis=0, return_inverse=True)
    inverse = inverse.ravel()

    # one representative occurrence per unique edge for interpolation
    first = np.full(uniq.shape[0], -1, dtype=np.int64)
    first[inverse[::-1]] = np.arange(inverse.size)[::-1]
    ce, ee = c[first], e[first]
    pa = vals[ce, _EDGE_LO[ee]]
    pb = vals[ce, _EDGE_HI[ee]]
    t = pa / (pa - pb)
    base = (cell_ijk[ce] + _CORNERS[_EDGE_LO[ee]] + 0.5) * voxel_size
    verts = base.astype(np.float64)
    verts[np.arange(ee.size), _EDGE_AXIS[ee]] += t * voxel_size

    tris = inverse.reshape(-1, 3)[:, ::-1]
    colors = height_colors(verts, height_axis) if color_by_height else None
    return Mesh(verts, np.ascontiguousarray(tris), colors)
