"""Hash-indexed TSDF with uncertainty-weighted updates and gated space carving."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._accel import numba_enabled, run_chunked
from .kernels.raymarch import march_rows
from .kernels.voxel_hash import EMPTY, TOMBSTONE, find_slots, insert_keys, pack_keys, unpack_keys
from .marching_cubes import Mesh, marching_cubes_sparse

HIT = "hit"
CARVE = "carve"
UNDEFINED = "undefined"

CARVE_GATE = 0.8
WEIGHT_MODES = ("inverse-variance", "raw-variance")

DUMP_MAGIC = b"MDTSDF\x00\x00"
DUMP_VERSION = 1


def classify_ray_sample(u_dist, d, r):
    """Region of a ray sample at distance ``u_dist`` for measured depth ``d``.

    The two regions overlap at ``u_dist == d - r``; hit is tested first.
    """
    if d - r <= u_dist <= d + r:
        return HIT
    if u_dist <= d - r:
        return CARVE
    return UNDEFINED


@dataclass(frozen=True)
class Voxel:
    phi: float
    weight: float = 0.0


def update_hit_voxel(v, delta, alpha):
    """Weighted running mean of the signed distance."""
    if not alpha > 0:
        raise ValueError("update weight must be positive")
    w = v.weight + alpha
    return Voxel((v.phi * v.weight + delta * alpha) / w, w)


class VoxelTable:
    """Open-addressing map from packed voxel keys to ``(phi, weight)``."""

    def __init__(self, capacity=1 << 12):
        cap = 1
        while cap < capacity:
            cap <<= 1
        self.keys = np.full(cap, EMPTY, dtype=np.int64)
        self.phi = np.zeros(cap)
        self.weight = np.zeros(cap)
        self.size = 0
        self.tombstones = 0

    @property
    def capacity(self):
        return self.keys.shape[0]

    def __len__(self):
        return self.size

    def _rehash(self, min_capacity):
        live = self.keys >= 0
        keys, phi, weight = self.keys[live], self.phi[live], self.weight[live]
        order = np.argsort(keys, kind="stable")
        cap = self.capacity
        while cap < min_capacity:
            cap <<= 1
        self.keys = np.full(cap, EMPTY, dtype=np.int64)
        self.phi = np.zeros(cap)
        self.weight = np.zeros(cap)
        slots = insert_keys(self.keys, keys[order])
        self.phi[slots] = phi[order]
        self.weight[slots] = weight[order]
        self.tombstones = 0

    def find(self, keys):
        return find_slots(self.keys, np.asarray(keys, dtype=np.int64))

    def ensure(self, keys, init_phi=0.0):
        """Slots for unique ``keys``, inserting missing ones as ``(init_phi, 0)``."""
        keys = np.asarray(keys, dtype=np.int64)
        slots = self.find(keys)
        missing = slots < 0
        n_new = int(missing.sum())
        if n_new:
            if 2 * (self.size + self.tombstones + n_new) > self.capacity:
                self._rehash(4 * (self.size + n_new))
                slots = self.find(keys)
                missing = slots < 0
            new_slots = insert_keys(self.keys, keys[missing])
            self.phi[new_slots] = init_phi
            self.weight[new_slots] = 0.0
            slots[missing] = new_slots
            self.size += n_new
        return slots

    def remove(self, keys):
        slots = self.find(np.unique(np.asarray(keys, dtype=np.int64)))
        slots = slots[slots >= 0]
        self.keys[slots] = TOMBSTONE
        self.phi[slots] = 0.0
        self.weight[slots] = 0.0
        self.size -= slots.size
        self.tombstones += slots.size
        return slots.size

    def items(self):
        """Live ``(keys, phi, weight)`` sorted by key."""
        live = self.keys >= 0
        keys = self.keys[live]
        order = np.argsort(keys, kind="stable")
        return keys[order], self.phi[live][order], self.weight[live][order]


def _segment_sums(keys, alpha, delta):
    """Per-key ``(sum alpha, sum alpha*delta)`` in a canonical order."""
    order = np.lexsort((alpha, delta, keys))
    k, a, d = keys[order], alpha[order], delta[order]
    start = np.ones(k.size, dtype=bool)
    start[1:] = k[1:] != k[:-1]
    idx = np.flatnonzero(start)
    return k[idx], np.add.reduceat(a, idx), np.add.reduceat(a * d, idx)


@dataclass
class IntegrationStats:
    hits: int = 0
    carved_visits: int = 0
    removed: int = 0


class TsdfVolume:
    def __init__(self, voxel_size=0.1, truncation=None, weight_mode="inverse-variance",
                 carve_gate=CARVE_GATE, capacity=1 << 12):
        if weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        self.voxel_size = float(voxel_size)
        self.r = float(3.0 * voxel_size if truncation is None else truncation)
        self.weight_mode = weight_mode
        self.carve_gate = carve_gate
        self.table = VoxelTable(capacity)

    def __len__(self):
        return len(self.table)

    def key_of(self, points):
        return pack_keys(np.floor(np.asarray(points, dtype=np.float64) / self.voxel_size).astype(np.int64))

    def center_of(self, keys):
        return (unpack_keys(keys) + 0.5) * self.voxel_size

    def get(self, ijk):
        slot = self.table.find(pack_keys(np.asarray([ijk], dtype=np.int64)))[0]
        if slot < 0:
            return None
        return Voxel(float(self.table.phi[slot]), float(self.table.weight[slot]))

    def apply_hits(self, keys, alpha, delta):
        """Fold hit samples into their voxels, one weighted-mean update per voxel."""
        keys = np.asarray(keys, dtype=np.int64)
        if keys.size == 0:
            return 0
        alpha = np.asarray(alpha, dtype=np.float64)
        delta = np.clip(np.asarray(delta, dtype=np.float64), -self.r, self.r)
        k, sa, sad = _segment_sums(keys, alpha, delta)
        slots = self.table.ensure(k, init_phi=self.r)
        w = self.table.weight[slots]
        phi = self.table.phi[slots]
        w_new = w + sa
        self.table.phi[slots] = (phi * w + sad) / w_new
        self.table.weight[slots] = w_new
        return k.size

    def carve(self, keys):
        return self.table.remove(keys)

    def alpha_of(self, sigma2):
        if self.weight_mode == "raw-variance":
            return sigma2
        with np.errstate(divide="ignore"):
            return 1.0 / sigma2

    def integrate(self, output, frame, workers=1, use_numba=None):
        """March every emitted pixel ray of ``output`` seen from ``frame``.

        Carving (for pixels above the gate) runs before this frame's hit
        updates, so surfaces seen in the frame survive its own carving.
        """
        if use_numba is None:
            use_numba = numba_enabled()
        depth = np.ascontiguousarray(np.where(output.present, output.mu, np.nan))
        alpha = np.ascontiguousarray(self.alpha_of(np.where(output.present, output.sigma2, 1.0)))
        inlier = np.ascontiguousarray(np.where(output.present, output.inlier_prob, 0.0))
        step = 0.5 * self.voxel_size
        H = depth.shape[0]
        parts = run_chunked(
            lambda a, b: march_rows(depth, alpha, inlier, frame.intrinsics, frame.pose, self.voxel_size,
                                    self.r, step, self.carve_gate, a, b, use_numba=use_numba),
            H, workers,
        )
        hk = np.concatenate([p[0] for p in parts]) if parts else np.empty(0, np.int64)
        ha = np.concatenate([p[1] for p in parts]) if parts else np.empty(0)
        hd = np.concatenate([p[2] for p in parts]) if parts else np.empty(0)
        ck = np.concatenate([p[3] for p in parts]) if parts else np.empty(0, np.int64)
        stats = IntegrationStats(hits=hk.size, carved_visits=ck.size)
        if ck.size:
            stats.removed = self.carve(ck)
        self.apply_hits(hk, ha, hd)
        return stats

    def extract_mesh(self, color_by_height=False, height_axis=2):
        keys, phi, _ = self.table.items()
        return marching_cubes_sparse(unpack_keys(keys), phi, self.voxel_size,
                                     color_by_height=color_by_height, height_axis=height_axis)

    def dump(self, path):
        """Binary little-endian volume dump, records sorted by key."""
        keys, phi, weight = self.table.items()
        rec = np.empty(keys.size, dtype=[("key", "<i8"), ("phi", "<f8"), ("weight", "<f8")])
        rec["key"], rec["phi"], rec["weight"] = keys, phi, weight
        with open(path, "wb") as fh:
            fh.write(DUMP_MAGIC)
            fh.write(struct.pack("<IddQ", DUMP_VERSION, self.voxel_size, self.r, keys.size))
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            if fh.read(len(DUMP_MAGIC)) != DUMP_MAGIC:
                raise ValueError(f"{path}: not a volume dump")
            version, vs, r, n = struct.unpack("<IddQ", fh.read(struct.calcsize("<IddQ")))
            if version != DUMP_VERSION:
                raise ValueError(f"{path}: unsupported dump version {version}")
            rec = np.frombuffer(fh.read(), dtype=[("key", "<i8"), ("phi", "<f8"), ("weight", "<f8")], count=n)
        vol = cls(voxel_size=vs, truncation=r, capacity=max(16, 4 * n))
        slots = vol.table.ensure(rec["key"].astype(np.int64))
        vol.table.phi[slots] = rec["phi"]
        vol.table.weight[slots] = rec["weight"]
        return vol


def integrate(vol, output, frame, workers=1):
    vol.integrate(output, frame, workers=workers)
    return vol


def extract_mesh(vol, **kwargs):
    return vol.extract_mesh(**kwargs)


def export_ply(mesh, path):
    """ASCII PLY; identical meshes produce identical bytes."""
    v = np.asarray(mesh.vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(mesh.triangles, dtype=np.int64).reshape(-1, 3)
    has_color = mesh.colors is not None and len(mesh.colors) == len(v)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(v)}",
             "property double x", "property double y", "property double z"]
    if has_color:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines += [f"element face {len(f)}", "property list uchar int vertex_indices", "end_header"]
    if has_color:
        c = np.asarray(mesh.colors, dtype=np.uint8)
        lines += [f"{x!r} {y!r} {z!r} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(v.tolist(), c.tolist())]
    else:
        lines += [f"{x!r} {y!r} {z!r}" for x, y, z in v.tolist()]
    lines += [f"3 {a} {b} {c}" for a, b, c in f.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path):
    """Parse the ASCII PLY subset written by :func:`export_ply`."""
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text or text[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_v = n_f = 0
    props = []
    i = 1
    while text[i] != "end_header":
        parts = text[i].split()
        if parts[0] == "element" and parts[1] == "vertex":
            n_v = int(parts[2])
        elif parts[0] == "element" and parts[1] == "face":
            n_f = int(parts[2])
        elif parts[0] == "property" and parts[1] != "list":
            props.append(parts[2])
        i += 1
    body = text[i + 1:]
    vrows = [list(map(float, ln.split())) for ln in body[:n_v]]
    verts = np.array([r[:3] for r in vrows], dtype=np.float64).reshape(-1, 3)
    colors = None
    if "red" in props:
        colors = np.array([r[3:6] for r in vrows], dtype=np.uint8).reshape(-1, 3)
    faces = np.array([list(map(int, ln.split()))[1:4] for ln in body[n_v:n_v + n_f]], dtype=np.int64).reshape(-1, 3)
    return Mesh(verts, faces, colors)
