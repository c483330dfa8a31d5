"""TUM RGB-D sequence ingestion, camera configs and a synthetic ray-cast scene."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import CameraFrame, Intrinsics, Pose

logger = logging.getLogger(__name__)

DEPTH_SCALE = 5000.0  # PNG counts per metre
DEFAULT_MAX_DIFF = 0.02


class MissingInputError(FileNotFoundError):
    pass


class EmptyManifestError(ValueError):
    pass


class ManifestParseError(ValueError):
    pass


@dataclass
class SequenceManifest:
    rgb_entries: list = field(default_factory=list)  # (timestamp, relative path)
    depth_entries: list = field(default_factory=list)
    gt_poses: list = field(default_factory=list)  # (timestamp, translation, quaternion xyzw)
    root: Path | None = None


@dataclass(frozen=True)
class AssociatedFrame:
    rgb_path: Path
    depth_path: Path | None
    pose: Pose
    timestamp: float


def _read_lines(path):
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield lineno, line


def parse_file_list(path):
    """``timestamp filename`` lines; comments skipped, bad lines raise with line numbers."""
    entries, bad = [], []
    for lineno, line in _read_lines(path):
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError
            entries.append((float(parts[0]), parts[1]))
        except ValueError:
            bad.append(lineno)
    if bad:
        raise ManifestParseError(f"{path}: malformed lines {bad}")
    _check_increasing(path, [t for t, _ in entries])
    return entries


def parse_groundtruth(path):
    """``timestamp tx ty tz qx qy qz qw`` lines with unit-quaternion enforcement."""
    poses, bad = [], []
    for lineno, line in _read_lines(path):
        parts = line.split()
        try:
            if len(parts) != 8:
                raise ValueError
            vals = [float(p) for p in parts]
        except ValueError:
            bad.append(lineno)
            continue
        q = np.array(vals[4:8])
        norm = float(np.linalg.norm(q))
        if norm == 0:
            bad.append(lineno)
            continue
        if abs(norm - 1.0) > 1e-6:
            warnings.warn(f"{path}:{lineno}: quaternion norm {norm:.6f}, renormalised", stacklevel=2)
            q = q / norm
        poses.append((vals[0], tuple(vals[1:4]), tuple(q.tolist())))
    if bad:
        raise ManifestParseError(f"{path}: malformed lines {bad}")
    _check_increasing(path, [p[0] for p in poses])
    return poses


def _check_increasing(path, stamps):
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise ManifestParseError(f"{path}: timestamps are not strictly increasing")


def parse_tum_sequence(directory):
    root = Path(directory)
    rgb, gt = root / "rgb.txt", root / "groundtruth.txt"
    for p in (rgb, gt):
        if not p.is_file():
            raise MissingInputError(f"missing required input {p}")
    manifest = SequenceManifest(root=root)
    manifest.rgb_entries = parse_file_list(rgb)
    manifest.gt_poses = parse_groundtruth(gt)
    if (root / "depth.txt").is_file():
        manifest.depth_entries = parse_file_list(root / "depth.txt")
    if not manifest.rgb_entries or not manifest.gt_poses:
        raise EmptyManifestError(f"{root}: no parseable rgb or ground-truth lines")
    return manifest


def write_tum_sequence(manifest, directory):
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "rgb.txt", "w") as fh:
        fh.write("# timestamp filename\n")
        fh.writelines(f"{t!r} {p}\n" for t, p in manifest.rgb_entries)
    if manifest.depth_entries:
        with open(root / "depth.txt", "w") as fh:
            fh.write("# timestamp filename\n")
            fh.writelines(f"{t!r} {p}\n" for t, p in manifest.depth_entries)
    with open(root / "groundtruth.txt", "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, tr, q in manifest.gt_poses:
            fh.write(" ".join(repr(float(v)) for v in (t, *tr, *q)) + "\n")


def match_timestamps(first, second, max_diff):
    """Greedy mutual-nearest matching of two timestamp lists.

    Candidate pairs within ``max_diff`` are taken by increasing ``|dt|``
    (ties by ``t_a + t_b``), each entry at most once. Returns index pairs
    sorted by the first list.
    """
    if not max_diff > 0:
        raise ValueError("max_diff must be positive")
    a = np.asarray(first, dtype=np.float64)
    b = np.asarray(second, dtype=np.float64)
    cands = []
    j0 = 0
    for i, ta in enumerate(a):
        while j0 < b.size and b[j0] < ta - max_diff:
            j0 += 1
        j = j0
        while j < b.size and b[j] <= ta + max_diff:
            cands.append((abs(ta - b[j]), ta + b[j], i, j))
            j += 1
    cands.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, _, i, j in cands:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def associate(manifest, max_diff=DEFAULT_MAX_DIFF):
    """Pair rgb frames with poses (and depth when listed)."""
    rgb_t = [t for t, _ in manifest.rgb_entries]
    pose_pairs = dict(match_timestamps(rgb_t, [p[0] for p in manifest.gt_poses], max_diff))
    depth_pairs = {}
    if manifest.depth_entries:
        depth_pairs = dict(match_timestamps(rgb_t, [t for t, _ in manifest.depth_entries], max_diff))
    root = manifest.root or Path(".")
    frames = []
    for i, (t, rel) in enumerate(manifest.rgb_entries):
        if i not in pose_pairs:
            continue
        _, tr, q = manifest.gt_poses[pose_pairs[i]]
        depth = root / manifest.depth_entries[depth_pairs[i]][1] if i in depth_pairs else None
        frames.append(AssociatedFrame(root / rel, depth, Pose.from_quaternion(tr, *q), t))
    dropped = len(manifest.rgb_entries) - len(frames)
    if dropped:
        logger.info("association dropped %d of %d rgb frames", dropped, len(manifest.rgb_entries))
    if not frames:
        raise EmptyManifestError("no rgb frame matched a pose within max_diff")
    return frames


CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def parse_key_values(path):
    values = {}
    for lineno, line in _read_lines(path):
        if "=" not in line:
            raise ManifestParseError(f"{path}:{lineno}: expected key=value")
        key, _, val = line.partition("=")
        values[key.strip()] = val.split("#", 1)[0].strip()
    return values


def load_camera_config(path):
    values = parse_key_values(path)
    missing = [k for k in CAMERA_KEYS if k not in values]
    if missing:
        raise KeyError(f"{path}: missing camera key(s) {', '.join(missing)}")
    extra = sorted(set(values) - set(CAMERA_KEYS))
    if extra:
        warnings.warn(f"{path}: ignoring unknown camera keys {extra}", stacklevel=2)
    return Intrinsics(
        fx=float(values["fx"]), fy=float(values["fy"]), cx=float(values["cx"]), cy=float(values["cy"]),
        width=int(values["width"]), height=int(values["height"]),
    )


def write_camera_config(intr, path):
    Path(path).write_text("".join(f"{k}={getattr(intr, k)!r}\n" for k in CAMERA_KEYS))


def read_gray(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64)


def write_gray(image, path):
    from PIL import Image

    Image.fromarray(np.clip(np.round(image), 0, 255).astype(np.uint8)).save(path)


def read_depth_png(path, scale=DEPTH_SCALE):
    """Metric depth with NaN for the PNG's zero (invalid) counts."""
    from PIL import Image

    with Image.open(path) as im:
        raw = np.asarray(im, dtype=np.float64)
    return np.where(raw > 0, raw / scale, np.nan)


def write_depth_png(depth, path, scale=DEPTH_SCALE):
    from PIL import Image

    d = np.asarray(depth, dtype=np.float64)
    counts = np.where(np.isfinite(d) & (d > 0), np.round(d * scale), 0)
    counts = np.clip(counts, 0, 65535).astype(np.uint16)
    Image.fromarray(counts).save(path)


def load_frames(associated, intrinsics):
    """Grey images for associated frames, as pipeline-ready :class:`CameraFrame`s."""
    for i, af in enumerate(associated):
        yield CameraFrame(read_gray(af.rgb_path), intrinsics, af.pose, af.timestamp, frame_id=i)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class Plane:
    """Rectangle through ``center`` with unit ``normal``; extent along its in-plane axes."""

    center: tuple
    normal: tuple
    extent: tuple = (10.0, 10.0)
    texture: int = 1
    scale: float = 0.02


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    texture: int = 2
    scale: float = 0.02


@dataclass
class SyntheticScene:
    intrinsics: Intrinsics
    primitives: list
    trajectory: list  # Pose per frame
    noise_sigma: float = 0.0
    seed: int = 0

    def with_frames(self, n):
        """Copy with the trajectory extended or truncated to ``n`` frames at the same step."""
        traj = list(self.trajectory)
        if n <= len(traj):
            return replace(self, trajectory=traj[:n])
        if len(traj) < 2:
            raise ValueError("need two trajectory poses to extrapolate")
        step = traj[-2].inverse().compose(traj[-1])
        while len(traj) < n:
            traj.append(traj[-1].compose(step))
        return replace(self, trajectory=traj)

    def check_coverage(self, grid=9):
        """Raise if some trajectory pose sees none of the primitives on a coarse pixel grid."""
        intr = self.intrinsics
        xs = np.linspace(0, intr.width - 1, grid)
        ys = np.linspace(0, intr.height - 1, grid)
        pix = np.stack(np.meshgrid(xs, ys), axis=-1)
        for i, pose in enumerate(self.trajectory):
            depth, _ = raycast(self, pose, pix)
            if not np.isfinite(depth).any():
                raise ValueError(f"trajectory pose {i} views no primitive")


def _plane_axes(normal):
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, n)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return n, e1, e2


def _hash_lattice(ix, iy, seed):
    """Deterministic uniform values in [0, 1) at integer lattice points."""
    h = (ix.astype(np.int64) * 73856093) ^ (iy.astype(np.int64) * 19349663) ^ (int(seed) * 83492791)
    h = h.astype(np.uint64) & np.uint64(0xFFFFFFFF)
    with np.errstate(over="ignore"):
        h ^= h >> np.uint64(16)
        h = (h * np.uint64(0x7FEB352D)) & np.uint64(0xFFFFFFFF)
        h ^= h >> np.uint64(15)
        h = (h * np.uint64(0x846CA68B)) & np.uint64(0xFFFFFFFF)
        h ^= h >> np.uint64(16)
    return h.astype(np.float64) / 4294967296.0


def _value_noise(s, t, seed):
    ix, iy = np.floor(s), np.floor(t)
    fx, fy = s - ix, t - iy
    fx = fx * fx * (3 - 2 * fx)
    fy = fy * fy * (3 - 2 * fy)
    v00 = _hash_lattice(ix, iy, seed)
    v10 = _hash_lattice(ix + 1, iy, seed)
    v01 = _hash_lattice(ix, iy + 1, seed)
    v11 = _hash_lattice(ix + 1, iy + 1, seed)
    return (1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11)


def procedural_texture(s, t, texture_id, scale):
    """Band-limited intensity in [0, 255] from surface coordinates in metres.

    Texture id 0 is a uniform grey; other ids seed two octaves of lattice
    noise (feature size ``scale``) plus a low-frequency sinusoid.
    """
    if texture_id == 0:
        return np.full(np.shape(s), 128.0)
    u, v = np.asarray(s) / scale, np.asarray(t) / scale
    n = 0.65 * _value_noise(u, v, texture_id) + 0.35 * _value_noise(2.0 * u + 17.0, 2.0 * v + 5.0, texture_id + 101)
    wave = 0.5 + 0.5 * np.sin(0.37 * u + 0.23 * v) * np.cos(0.19 * u - 0.31 * v)
    return np.clip(128.0 + 150.0 * (n - 0.5) + 40.0 * (wave - 0.5), 0.0, 255.0)


def _intersect(prim, origin, dirs):
    """Ray parameter (in units of ``dirs``) and surface coordinates for each ray."""
    if isinstance(prim, Plane):
        n, e1, e2 = _plane_axes(prim.normal)
        c = np.asarray(prim.center, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origin) @ n) / denom
        p = origin + t[..., None] * dirs
        s = (p - c) @ e1
        q = (p - c) @ e2
        ok = (np.abs(denom) > 1e-12) & (t > 0) & (np.abs(s) <= prim.extent[0] / 2) & (np.abs(q) <= prim.extent[1] / 2)
        return np.where(ok, t, np.inf), s, q
    c = np.asarray(prim.center, dtype=np.float64)
    oc = origin - c
    A = np.einsum("...i,...i", dirs, dirs)
    B = 2.0 * dirs @ oc
    C = oc @ oc - prim.radius**2
    disc = B * B - 4 * A * C
    sq = np.sqrt(np.maximum(disc, 0.0))
    t1 = (-B - sq) / (2 * A)
    t2 = (-B + sq) / (2 * A)
    t = np.where(t1 > 0, t1, t2)
    ok = (disc >= 0) & (t > 0)
    p = origin + t[..., None] * dirs - c
    r = prim.radius
    lon = np.arctan2(p[..., 0], p[..., 2]) * r
    lat = np.arcsin(np.clip(p[..., 1] / r, -1, 1)) * r
    return np.where(ok, t, np.inf), lon, lat


def raycast(scene, pose, pixels):
    """Optical-axis depth and texture intensity at (sub)pixel positions ``(..., 2)``.

    Depth is NaN and intensity 0 where no primitive is hit.
    """
    intr = scene.intrinsics
    pixels = np.asarray(pixels, dtype=np.float64)
    rays_cam = np.stack(
        [(pixels[..., 0] - intr.cx) / intr.fx, (pixels[..., 1] - intr.cy) / intr.fy, np.ones(pixels.shape[:-1])],
        axis=-1,
    )
    dirs = rays_cam @ pose.rotation.T
    origin = pose.translation
    best = np.full(pixels.shape[:-1], np.inf)
    intensity = np.zeros(pixels.shape[:-1])
    for prim in scene.primitives:
        t, s, q = _intersect(prim, origin, dirs)
        closer = t < best
        if closer.any():
            best = np.where(closer, t, best)
            intensity = np.where(closer, procedural_texture(s, q, prim.texture, prim.scale), intensity)
    # rays have unit camera z, so the ray parameter is the optical-axis depth
    depth = np.where(np.isfinite(best), best, np.nan)
    return depth, intensity


def render_synthetic(scene, frame_idx, noise_seed=None):
    """Rendered grey frame (8-bit quantised) and its ground-truth depth image."""
    if not 0 <= frame_idx < len(scene.trajectory):
        raise IndexError(f"frame {frame_idx} outside trajectory of {len(scene.trajectory)}")
    intr = scene.intrinsics
    pose = scene.trajectory[frame_idx]
    ys, xs = np.mgrid[0 : intr.height, 0 : intr.width].astype(np.float64)
    depth, img = raycast(scene, pose, np.stack([xs, ys], axis=-1))
    if scene.noise_sigma > 0:
        seed = scene.seed if noise_seed is None else noise_seed
        rng = np.random.default_rng([int(seed), int(frame_idx)])
        img = img + rng.normal(0.0, scene.noise_sigma, img.shape)
    img = np.clip(np.round(img), 0, 255)
    frame = CameraFrame(img, intr, pose, timestamp=float(frame_idx) / 30.0, frame_id=frame_idx)
    return frame, depth


# scene description files: one directive per line, ``name key=value ...``


def _vec(text, n=None):
    vals = tuple(float(v) for v in text.split(","))
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def look_at(position, target, up=(0.0, -1.0, 0.0)):
    """Camera-to-world pose at ``position`` looking at ``target`` (camera y points down)."""
    p = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - p
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), p)


def parse_scene(path):
    """Parse a scene file.

    Directives::

        camera fx=300 fy=300 cx=160 cy=120 width=320 height=240
        plane center=0,0,2 normal=0,0,-1 extent=6,4 texture=1 scale=0.02
        sphere center=0,0,3 radius=1 texture=2
        trajectory start=0,0,0 step=0.02,0,0 frames=10 [target=0,0,2]
        noise sigma=2 seed=7
    """
    intr, prims, traj, sigma, seed = None, [], None, 0.0, 0
    for lineno, line in _read_lines(path):
        name, *tokens = line.split()
        kv = {}
        for tok in tokens:
            if "=" not in tok:
                raise ManifestParseError(f"{path}:{lineno}: expected key=value, got {tok!r}")
            k, _, v = tok.partition("=")
            kv[k] = v
        try:
            if name == "camera":
                intr = Intrinsics(float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]),
                                  int(kv["width"]), int(kv["height"]))
            elif name == "plane":
                prims.append(Plane(_vec(kv["center"], 3), _vec(kv["normal"], 3),
                                   _vec(kv.get("extent", "10,10"), 2), int(kv.get("texture", 1)),
                                   float(kv.get("scale", 0.02))))
            elif name == "sphere":
                prims.append(Sphere(_vec(kv["center"], 3), float(kv["radius"]), int(kv.get("texture", 2)),
                                    float(kv.get("scale", 0.02))))
            elif name == "trajectory":
                start = np.array(_vec(kv.get("start", "0,0,0"), 3))
                step = np.array(_vec(kv.get("step", "0.02,0,0"), 3))
                n = int(kv.get("frames", 10))
                target = _vec(kv["target"], 3) if "target" in kv else None
                traj = []
                for i in range(n):
                    pos = start + i * step
                    if target is None:
                        traj.append(Pose(np.eye(3), pos))
                    else:
                        traj.append(look_at(pos, target))
            elif name == "noise":
                sigma = float(kv.get("sigma", 0.0))
                seed = int(kv.get("seed", 0))
            else:
                raise ManifestParseError(f"{path}:{lineno}: unknown directive {name!r}")
        except KeyError as exc:
            raise ManifestParseError(f"{path}:{lineno}: {name} needs {exc.args[0]}=") from None
    if intr is None or traj is None:
        raise ManifestParseError(f"{path}: scene needs camera and trajectory lines")
    scene = SyntheticScene(intr, prims, traj, sigma, seed)
    scene.check_coverage()
    return scene


def plane_scene(depth=2.0, width=320, height=240, focal=300.0, frames=10, baseline=0.02,
                noise_sigma=2.0, seed=0, texture=1, scale=0.02):
    """Fronto-parallel textured plane seen by a camera moving along +x."""
    intr = Intrinsics(focal, focal, width / 2.0, height / 2.0, width, height)
    plane = Plane((0.0, 0.0, depth), (0.0, 0.0, -1.0), (40.0, 40.0), texture, scale)
    traj = [Pose(np.eye(3), (i * baseline, 0.0, 0.0)) for i in range(frames)]
    return SyntheticScene(intr, [plane], traj, noise_sigma, seed)
