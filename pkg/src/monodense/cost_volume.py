"""Temporal cost aggregation, 4-path semi-global regularisation, depth extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._accel import run_chunked
from .geometry import relative_warp
from .kernels.cost import aggregate_rows
from .kernels.sgm import scan_rows

VALID = 0
FLAT_OUTLIER = 1
NO_DATA = 2

STATUS_NAMES = {VALID: "valid", FLAT_OUTLIER: "flat_outlier", NO_DATA: "no_data"}


@dataclass
class CostVolume:
    """Per-pixel, per-sample mean SAD.

    ``counts[y, x, k]`` is the number of frames that saw sample ``k`` in
    bounds; ``valid_count`` is its maximum over samples. Samples no frame
    could see are filled with the pixel's largest observed cost, and
    no-data pixels hold zeros.
    """

    raw_cost: np.ndarray
    counts: np.ndarray
    valid_count: np.ndarray

    @property
    def height(self):
        return self.raw_cost.shape[0]

    @property
    def width(self):
        return self.raw_cost.shape[1]

    @property
    def L(self):
        return self.raw_cost.shape[2]

    @property
    def no_data(self):
        return self.valid_count == 0


@dataclass
class RegularizedVolume:
    S: np.ndarray
    no_data: np.ndarray


@dataclass
class DepthObservation:
    status: np.ndarray  # int8, VALID / FLAT_OUTLIER / NO_DATA
    depth: np.ndarray  # NaN unless valid
    disparity_index: np.ndarray  # refined sample index, NaN for no-data
    frame_id: int = 0

    @property
    def valid(self):
        return self.status == VALID

    def depth_image(self):
        return np.where(self.valid, self.depth, np.nan)


def patch_sad(img_a, u_a, img_b, u_b):
    """3x3 SAD between an integer patch in ``img_a`` and a bilinear one in ``img_b``.

    Returns None when either patch leaves its image.
    """
    img_a = np.asarray(img_a, dtype=np.float64)
    img_b = np.asarray(img_b, dtype=np.float64)
    xa, ya = int(u_a[0]), int(u_a[1])
    ha, wa = img_a.shape
    hb, wb = img_b.shape
    xb, yb = float(u_b[0]), float(u_b[1])
    if not (1 <= xa <= wa - 2 and 1 <= ya <= ha - 2):
        return None
    if not (1.0 <= xb <= wb - 2.0 and 1.0 <= yb <= hb - 2.0):
        return None
    total = 0.0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            x, y = xb + dx, yb + dy
            x0 = min(int(math.floor(x)), wb - 2)
            y0 = min(int(math.floor(y)), hb - 2)
            fx, fy = x - x0, y - y0
            top = (1.0 - fx) * img_b[y0, x0] + fx * img_b[y0, x0 + 1]
            bot = (1.0 - fx) * img_b[y0 + 1, x0] + fx * img_b[y0 + 1, x0 + 1]
            total += abs(img_a[ya + dy, xa + dx] - ((1.0 - fy) * top + fy * bot))
    return total


def aggregate_temporal(ref, frames, samples, workers=1):
    """Mean SAD over the aggregation frames that keep the warped patch in bounds."""
    H, W = ref.intrinsics.shape
    L = samples.L
    cost = np.zeros((H, W, L))
    count = np.zeros((H, W, L), dtype=np.int32)
    if frames:
        warps = [relative_warp(ref, f) for f in frames]
        A = np.ascontiguousarray(np.stack([w[0] for w in warps]))
        c = np.ascontiguousarray(np.stack([w[1] for w in warps]))
        srcs = np.ascontiguousarray(np.stack([f.image for f in frames]))
        ref_img = np.ascontiguousarray(ref.image)
        rho = np.ascontiguousarray(samples.inverse_depths)
        run_chunked(
            lambda a, b: aggregate_rows(ref_img, srcs, A, c, rho, a, b, cost, count), H, workers
        )
    seen = count > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        cost = np.where(seen, cost / np.maximum(count, 1), 0.0)
    valid_count = count.max(axis=2)
    has_data = valid_count > 0
    fill = np.where(seen, cost, -np.inf).max(axis=2)
    unseen = (~seen) & has_data[..., None]
    cost = np.where(unseen, np.broadcast_to(fill[..., None], cost.shape), cost)
    return CostVolume(raw_cost=cost, counts=count, valid_count=valid_count)


_DIRECTIONS = ("left", "right", "up", "down")


def _oriented(e, direction):
    if direction == "left":
        return e
    if direction == "right":
        return e[:, ::-1]
    if direction == "up":
        return e.transpose(1, 0, 2)
    return e.transpose(1, 0, 2)[:, ::-1]


def _restore(t, direction):
    if direction == "left":
        return t
    if direction == "right":
        return t[:, ::-1]
    if direction == "up":
        return t.transpose(1, 0, 2)
    return t[:, ::-1].transpose(1, 0, 2)


def sgm_path_tables(cv, P1=10.0, P2=100.0, workers=1):
    """Per-direction path cost tables keyed ``left`` (scan from the left edge),
    ``right``, ``up`` (scan from the top) and ``down``."""
    if not (P2 >= P1 >= 0):
        raise ValueError("penalties must satisfy P2 >= P1 >= 0")
    e = cv.raw_cost if isinstance(cv, CostVolume) else np.asarray(cv, dtype=np.float64)
    if isinstance(cv, CostVolume):
        e = np.where(cv.no_data[..., None], 0.0, e)
    tables = {}
    for direction in _DIRECTIONS:
        src = np.ascontiguousarray(_oriented(e, direction))
        out = np.empty_like(src)
        run_chunked(lambda a, b: scan_rows(src, P1, P2, a, b, out=out), src.shape[0], workers)
        tables[direction] = np.ascontiguousarray(_restore(out, direction))
    return tables


def sgm_regularize(cv, P1=10.0, P2=100.0, workers=1):
    """Sum of the four axis-aligned path costs, accumulated pairwise."""
    t = sgm_path_tables(cv, P1, P2, workers)
    S = (t["left"] + t["right"]) + (t["up"] + t["down"])
    no_data = cv.no_data if isinstance(cv, CostVolume) else np.zeros(S.shape[:2], dtype=bool)
    return RegularizedVolume(S=S, no_data=no_data)


def _argmin_far(S):
    """Argmin over the last axis; ties go to the larger index (smaller disparity)."""
    L = S.shape[-1]
    return (L - 1) - np.argmin(S[..., ::-1], axis=-1)


def winner_take_all(volume, samples, frame_id=0):
    """Depth of the best sample, without refinement or flatness test.

    Accepts a :class:`CostVolume` or a :class:`RegularizedVolume`. Pixels whose
    best sample is the far sentinel carry no usable depth and are flagged as
    outliers.
    """
    if isinstance(volume, CostVolume):
        S, no_data = volume.raw_cost, volume.no_data
    else:
        S, no_data = volume.S, volume.no_data
    L = samples.L
    k = _argmin_far(S)
    status = np.where(k == L - 1, FLAT_OUTLIER, VALID).astype(np.int8)
    status[no_data] = NO_DATA
    idx = k.astype(np.float64)
    depth = np.where(status == VALID, samples.depth_at(np.minimum(idx, L - 2)), np.nan)
    idx[no_data] = np.nan
    return DepthObservation(status=status, depth=depth, disparity_index=idx, frame_id=frame_id)


def extract_depth(reg, samples, eps_d=0.05, frame_id=0):
    """Argmin with flat-region rejection and parabolic refinement in index space."""
    if eps_d < 0:
        raise ValueError("eps_d must be non-negative")
    S, no_data = reg.S, reg.no_data
    H, W, L = S.shape
    k = _argmin_far(S)
    interior = (k > 0) & (k < L - 1)
    kc = np.clip(k, 1, L - 2)
    s_star = np.take_along_axis(S, k[..., None], -1)[..., 0]
    s_m = np.take_along_axis(S, (kc - 1)[..., None], -1)[..., 0]
    s_p = np.take_along_axis(S, (kc + 1)[..., None], -1)[..., 0]
    denom = s_p + s_m - 2.0 * s_star
    flat = 2.0 * (1.0 + eps_d) * s_star > s_m + s_p
    ok = interior & ~flat & (denom > 0) & ~no_data
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where(ok, -0.5 * (s_p - s_m) / np.where(ok, denom, 1.0), 0.0)
    k_ref = k + offset
    status = np.full((H, W), FLAT_OUTLIER, dtype=np.int8)
    status[ok] = VALID
    status[no_data] = NO_DATA
    depth = np.where(ok, 1.0 / (((L - 1) - np.where(ok, k_ref, 0.0)) * samples.c_d), np.nan)
    k_ref = np.where(no_data, np.nan, k_ref)
    return DepthObservation(status=status, depth=depth, disparity_index=k_ref, frame_id=frame_id)


def dump_cost_slices(volume, out_dir, indices=None, prefix="cost"):
    """Write cost slices as 8-bit binary PGM images (debug aid)."""
    S = volume.raw_cost if isinstance(volume, CostVolume) else volume.S
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if indices is None:
        indices = range(S.shape[2])
    paths = []
    for k in indices:
        sl = S[:, :, k]
        hi = float(sl.max()) if sl.size else 0.0
        img = np.zeros(sl.shape, np.uint8) if hi <= 0 else np.round(255.0 * sl / hi).astype(np.uint8)
        path = out_dir / f"{prefix}_{k:03d}.pgm"
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
            fh.write(img.tobytes())
        paths.append(path)
    return paths
