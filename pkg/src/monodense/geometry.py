"""Camera model, poses, inverse-depth sampling and inter-frame warping."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

# Finite stand-in for the disparity-0 (infinitely far) depth sample.
INF_DEPTH = 1.0e10

PARALLAX_GRID = (16, 12)


class ParallaxWarning(UserWarning):
    """No probe pixel of the reference frame lands inside the other frame."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def shape(self):
        return (self.height, self.width)

    def project(self, points):
        """Project camera-frame points ``(..., 3)`` to pixels; also returns depth."""
        points = np.asarray(points, dtype=np.float64)
        z = points[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * points[..., 0] / z + self.cx
            v = self.fy * points[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def backproject(self, pixels, depth):
        """Camera-frame points for pixels ``(..., 2)`` at optical-axis depth."""
        pixels = np.asarray(pixels, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        x = (pixels[..., 0] - self.cx) / self.fx * depth
        y = (pixels[..., 1] - self.cy) / self.fy * depth
        return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)

    def contains(self, pixels, margin=0.0):
        pixels = np.asarray(pixels)
        u, v = pixels[..., 0], pixels[..., 1]
        return (
            (u >= margin)
            & (u <= self.width - 1 - margin)
            & (v >= margin)
            & (v <= self.height - 1 - margin)
        )


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform: ``x_world = rotation @ x_cam + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, translation, qx, qy, qz, qw):
        q = np.array([qx, qy, qz, qw], dtype=np.float64)
        q = q / np.linalg.norm(q)
        x, y, z, w = q
        R = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )
        # re-orthonormalise away the rounding of the closed form
        u, _, vt = np.linalg.svd(R)
        return cls(u @ vt, translation)

    def to_quaternion(self):
        """``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        R = self.rotation
        tr = np.trace(R)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
        elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
            s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
            q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
        elif R[1, 1] > R[2, 2]:
            s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
            q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
            q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
        q = np.array(q)
        return q if q[3] >= 0 else -q

    def inverse(self):
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def transform(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def relative_to(self, other):
        """Transform taking points in this camera's frame into ``other``'s frame."""
        return other.inverse().compose(self)


@dataclass(frozen=True)
class CameraFrame:
    image: np.ndarray
    intrinsics: Intrinsics
    pose: Pose
    timestamp: float = 0.0
    frame_id: int = 0

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.shape != self.intrinsics.shape:
            raise ValueError(f"image shape {img.shape} does not match intrinsics {self.intrinsics.shape}")
        img.setflags(write=False)
        object.__setattr__(self, "image", img)


@dataclass(frozen=True)
class DepthSampleSet:
    """Depth samples uniform in disparity.

    ``samples[k] = 1 / ((L - 1 - k) * c_d)``; the last entry (disparity 0) holds
    :data:`INF_DEPTH`. Kernels work on :attr:`inverse_depths`, which is exactly
    zero there, so warping at that sample reduces to the rotation-only map.
    """

    c_d: float
    L: int
    samples: np.ndarray = field(repr=False)

    @property
    def disparities(self):
        return np.arange(self.L - 1, -1, -1, dtype=np.float64)

    @property
    def inverse_depths(self):
        return self.disparities * self.c_d

    @property
    def z_near(self):
        return float(self.samples[0])

    @property
    def z_far(self):
        """Largest finite sample."""
        return float(self.samples[self.L - 2])

    def depth_at(self, index):
        """Depth for a (possibly fractional) sample index."""
        disp = (self.L - 1) - np.asarray(index, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return np.where(disp > 0, 1.0 / (np.maximum(disp, 1e-300) * self.c_d), INF_DEPTH)

    def index_of(self, depth):
        """Fractional sample index of a depth."""
        return (self.L - 1) - 1.0 / (np.asarray(depth, dtype=np.float64) * self.c_d)

    def spacing_at(self, depth):
        """Local depth distance between neighbouring samples, ``d^2 * c_d``."""
        depth = np.asarray(depth, dtype=np.float64)
        return depth * depth * self.c_d


def build_sample_set(baseline_m, focal_px, L=64):
    if not (baseline_m > 0 and focal_px > 0):
        raise ValueError("baseline and focal length must be positive")
    if L < 2:
        raise ValueError("need at least two depth samples")
    c_d = 1.0 / (baseline_m * focal_px)
    disp = np.arange(L - 1, 0, -1, dtype=np.float64)
    samples = np.empty(L)
    samples[:-1] = 1.0 / (disp * c_d)
    samples[-1] = INF_DEPTH
    samples.setflags(write=False)
    return DepthSampleSet(c_d=c_d, L=int(L), samples=samples)


def relative_warp(frame_i, frame_j):
    """``(A, c)`` such that ``h = A @ [u, 1]`` and ``c`` for the pair (i -> j)."""
    K = frame_i.intrinsics.K
    K_j = frame_j.intrinsics.K
    R_wj = frame_j.pose.rotation.T
    A = K_j @ R_wj @ frame_i.pose.rotation @ np.linalg.inv(K)
    c = K_j @ R_wj @ (frame_i.pose.translation - frame_j.pose.translation)
    return A, c


def warp_coeffs(u, frame_i, frame_j):
    """Coefficients ``(h, c)`` with ``[u_j; 1] ~ d * h + c`` for a pixel of frame i."""
    A, c = relative_warp(frame_i, frame_j)
    uh = np.array([u[0], u[1], 1.0])
    return A @ uh, c


def dehomogenize(p):
    p = np.asarray(p, dtype=np.float64)
    return p[..., :2] / p[..., 2:3]


def warp_pixel(u, depth, frame_i, frame_j):
    """Pixel in frame j of pixel ``u`` of frame i seen at ``depth``."""
    h, c = warp_coeffs(u, frame_i, frame_j)
    if depth >= INF_DEPTH:
        return dehomogenize(h)
    return dehomogenize(depth * h + c)


def _probe_grid(intr):
    nx, ny = PARALLAX_GRID
    xs = (np.arange(nx) + 0.5) * intr.width / nx
    ys = (np.arange(ny) + 0.5) * intr.height / ny
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def parallax_deviation(ref, other, probe_depth):
    """Mean rotation-compensated displacement (px) of a probe grid at ``probe_depth``.

    Emits :class:`ParallaxWarning` and returns 0 when no probe lands in ``other``.
    """
    if not probe_depth > 0:
        raise ValueError("probe depth must be positive")
    A, c = relative_warp(ref, other)
    grid = _probe_grid(ref.intrinsics)
    h = np.c_[grid, np.ones(len(grid))] @ A.T
    full = probe_depth * h + c
    ok = (full[:, 2] > 0) & (h[:, 2] > 0)
    u_full = dehomogenize(full[ok])
    u_rot = dehomogenize(h[ok])
    inside = other.intrinsics.contains(u_full)
    if not np.any(inside):
        warnings.warn("no probe pixel projects inside the other frame", ParallaxWarning, stacklevel=2)
        return 0.0
    return float(np.mean(np.linalg.norm(u_full[inside] - u_rot[inside], axis=1)))


def assign_to_targets(deviations, K_a, K_p, min_parallax=1e-6):
    """Indices of frames matched to ``K_a`` parallax targets spread over ``(0, K_p]``.

    Greedy global nearest assignment: pairs are taken in order of
    ``|deviation - target|`` (ties: target, then frame index) with every frame
    and every target used at most once. Zero-parallax frames are ineligible.
    Returned indices are ordered by target.
    """
    if K_a < 1:
        raise ValueError("K_a must be at least 1")
    dev = np.asarray(deviations, dtype=np.float64)
    eligible = np.flatnonzero(dev > min_parallax)
    if eligible.size == 0:
        return []
    targets = K_p * np.arange(1, K_a + 1) / K_a
    pairs = sorted(
        (abs(dev[f] - targets[t]), t, int(f)) for t in range(K_a) for f in eligible
    )
    used_t, used_f, picked = set(), set(), {}
    n_pick = min(K_a, eligible.size)
    for _, t, f in pairs:
        if t in used_t or f in used_f:
            continue
        used_t.add(t)
        used_f.add(f)
        picked[t] = f
        if len(picked) == n_pick:
            break
    return [picked[t] for t in sorted(picked)]


def select_aggregation_frames(history, ref, K_a=5, K_p=100.0, probe_depth=2.0):
    """Past frames whose parallax deviations best cover ``(0, K_p]``."""
    if K_a < 1:
        raise ValueError("K_a must be at least 1")
    if not history:
        return []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ParallaxWarning)
        devs = [parallax_deviation(ref, f, probe_depth) for f in history]
    idx = assign_to_targets(devs, K_a, K_p)
    logger.debug("parallax %s -> picked %s", np.round(devs, 2).tolist(), idx)
    return [history[i] for i in idx]
