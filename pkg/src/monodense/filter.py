"""Recursive per-pixel Gaussian x Beta depth filtering.

Each pixel carries ``(mu, sigma2, a, b)``: a Gaussian over the true depth and a
Beta over the inlier probability. Observations are either depth measurements
(Gaussian + uniform mixture likelihood) or flat-region outliers, which only
bump the outlier pseudo-count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cost_volume import FLAT_OUTLIER, VALID

INIT_COUNT = 10.0
PROPAGATE_GATE = 0.4
COLLISION_GATE = 0.5
OUTPUT_GATE = 0.6
SIGMA_TZ2 = 0.05**2


@dataclass(frozen=True)
class Hypothesis:
    mu: float
    sigma2: float
    a: float
    b: float

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.a > 0 and self.b > 0):
            raise ValueError(f"invalid hypothesis {self}")

    @property
    def inlier_prob(self):
        return self.a / (self.a + self.b)


@dataclass(frozen=True)
class MeasurementModel:
    """Uniform outlier support ``[z_l, z_r]`` and disparity-noise inlier variance."""

    z_l: float
    z_r: float
    c_d: float
    sigma_disp2: float = 1.0

    def __post_init__(self):
        if not self.z_l < self.z_r:
            raise ValueError("z_l must be below z_r")

    @classmethod
    def from_samples(cls, samples, sigma_disp2=1.0):
        return cls(samples.z_near, samples.z_far, samples.c_d, sigma_disp2)

    def r2_of(self, d):
        d = np.asarray(d, dtype=np.float64)
        return d**4 * self.c_d**2 * self.sigma_disp2

    @property
    def uniform_density(self):
        return 1.0 / (self.z_r - self.z_l)


def init_variance(d, c_d, sigma_disp2=1.0):
    """Depth variance induced by ``sigma_disp2`` of disparity noise: ``d^4 c_d^2``."""
    d = np.asarray(d, dtype=np.float64)
    return d**4 * c_d**2 * sigma_disp2


def init_hypothesis(d, samples, sigma_disp2=1.0):
    if not (math.isfinite(d) and d > 0):
        raise ValueError(f"cannot initialise from depth {d!r}")
    return Hypothesis(float(d), float(init_variance(d, samples.c_d, sigma_disp2)), INIT_COUNT, INIT_COUNT)


def inlier_update(mu, sigma2, a, b, d, r2, u_density):
    """Moment-matched mixture update, vectorised over equally shaped arrays.

    Returns ``(mu', sigma2', a', b', ok)``; ``ok`` is False where the
    responsibilities degenerate, in which case the caller should fall back to
    the outlier update.
    """
    mu, sigma2, a, b, d, r2 = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (mu, sigma2, a, b, d, r2))
    )
    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        s2 = 1.0 / (1.0 / sigma2 + 1.0 / r2)
        m = s2 * (mu / sigma2 + d / r2)
        var = sigma2 + r2
        log_c1 = np.log(a / (a + b)) - 0.5 * np.log(2.0 * np.pi * var) - 0.5 * (d - mu) ** 2 / var
        log_c2 = np.log(b / (a + b)) + np.log(u_density)
        top = np.maximum(log_c1, log_c2)
        w1 = np.exp(log_c1 - top)
        w2 = np.exp(log_c2 - top)
        norm = w1 + w2
        c1 = w1 / norm
        c2 = w2 / norm

        n1 = a + b + 1.0
        n2 = a + b + 2.0
        f = c1 * (a + 1.0) / n1 + c2 * a / n1
        e = c1 * (a + 1.0) * (a + 2.0) / (n1 * n2) + c2 * a * (a + 1.0) / (n1 * n2)

        mu_new = c1 * m + c2 * mu
        sigma2_new = c1 * s2 + c2 * sigma2 + c1 * c2 * (m - mu) ** 2
        a_new = (e - f) / (f - e / f)
        b_new = a_new * (1.0 - f) / f

    ok = (
        np.isfinite(norm)
        & (norm > 0)
        & np.isfinite(mu_new)
        & (sigma2_new > 0)
        & (a_new > 0)
        & (b_new > 0)
        & np.isfinite(a_new)
        & np.isfinite(b_new)
    )
    return mu_new, sigma2_new, a_new, b_new, ok


def update_inlier_case(h, d, model):
    mu, s2, a, b, ok = inlier_update(
        h.mu, h.sigma2, h.a, h.b, d, model.r2_of(d), model.uniform_density
    )
    if not bool(ok):
        return update_outlier_case(h)
    return Hypothesis(float(mu), float(s2), float(a), float(b))


def update_outlier_case(h):
    return Hypothesis(h.mu, h.sigma2, h.a, h.b + 1.0)


@dataclass
class HypothesisMap:
    """At most one hypothesis per pixel; empty cells have ``present`` False."""

    mu: np.ndarray
    sigma2: np.ndarray
    a: np.ndarray
    b: np.ndarray
    present: np.ndarray
    frame_id: int = 0

    @classmethod
    def empty(cls, height, width, frame_id=0):
        nan = np.full((height, width), np.nan)
        return cls(nan.copy(), nan.copy(), nan.copy(), nan.copy(), np.zeros((height, width), bool), frame_id)

    @property
    def shape(self):
        return self.present.shape

    @property
    def inlier_prob(self):
        with np.errstate(invalid="ignore"):
            return np.where(self.present, self.a / (self.a + self.b), np.nan)

    def copy(self):
        return HypothesisMap(
            self.mu.copy(), self.sigma2.copy(), self.a.copy(), self.b.copy(), self.present.copy(), self.frame_id
        )

    def get(self, y, x):
        if not self.present[y, x]:
            return None
        return Hypothesis(self.mu[y, x], self.sigma2[y, x], self.a[y, x], self.b[y, x])

    def set(self, y, x, h):
        if h is None:
            self.present[y, x] = False
            self.mu[y, x] = self.sigma2[y, x] = self.a[y, x] = self.b[y, x] = np.nan
            return
        self.mu[y, x], self.sigma2[y, x], self.a[y, x], self.b[y, x] = h.mu, h.sigma2, h.a, h.b
        self.present[y, x] = True


def resolve_collision(candidates, gate=COLLISION_GATE):
    """Pick the surviving hypothesis for one target pixel.

    A lone candidate survives as is. With several, only those whose inlier
    expectation exceeds ``gate`` compete and the nearest (smallest mean) wins;
    earlier candidates win exact ties.
    """
    if not candidates:
        raise ValueError("need at least one candidate")
    if len(candidates) == 1:
        return candidates[0]
    strong = [h for h in candidates if h.inlier_prob > gate]
    if not strong:
        return None
    return min(strong, key=lambda h: h.mu)


def propagate(
    prev,
    pose_prev,
    pose_new,
    intr,
    sigma_tz2=SIGMA_TZ2,
    gate=PROPAGATE_GATE,
    collision_gate=COLLISION_GATE,
    frame_id=None,
):
    """Carry hypotheses into a new keyframe.

    Points at the hypothesis mean are reprojected to the nearest pixel of the
    new camera; the mean shifts by the forward translation and the variance
    grows by ``sigma_tz2``. Scatter targets are grouped and resolved with
    :func:`resolve_collision` semantics, independent of traversal order.
    """
    H, W = prev.shape
    out = HypothesisMap.empty(H, W, prev.frame_id if frame_id is None else frame_id)
    E = prev.inlier_prob
    src = np.flatnonzero((prev.present & (E >= gate)).ravel())
    if src.size == 0:
        return out
    ys, xs = np.divmod(src, W)
    mu = prev.mu.ravel()[src]
    pts = intr.backproject(np.stack([xs, ys], axis=-1).astype(np.float64), mu)
    rel = pose_prev.relative_to(pose_new)
    pts_new = rel.transform(pts)
    t_z = -rel.translation[2]
    mu_new = mu - t_z
    uv, z = intr.project(pts_new)
    with np.errstate(invalid="ignore"):
        tx = np.floor(uv[:, 0] + 0.5)
        ty = np.floor(uv[:, 1] + 0.5)
    keep = (z > 0) & (mu_new > 0) & np.isfinite(tx) & np.isfinite(ty)
    keep &= (tx >= 0) & (tx <= W - 1) & (ty >= 0) & (ty <= H - 1)
    if not keep.any():
        return out
    src, mu_new = src[keep], mu_new[keep]
    target = ty[keep].astype(np.int64) * W + tx[keep].astype(np.int64)
    e_src = E.ravel()[src]

    counts = np.bincount(target, minlength=H * W)
    multi = counts[target] > 1
    eligible = ~multi | (e_src > collision_gate)
    src, mu_new, target = src[eligible], mu_new[eligible], target[eligible]
    order = np.lexsort((src, mu_new, target))
    target_sorted = target[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = target_sorted[1:] != target_sorted[:-1]
    win = order[first]
    tgt, s = target[win], src[win]

    out.mu.ravel()[tgt] = mu_new[win]
    out.sigma2.ravel()[tgt] = prev.sigma2.ravel()[s] + sigma_tz2
    out.a.ravel()[tgt] = prev.a.ravel()[s]
    out.b.ravel()[tgt] = prev.b.ravel()[s]
    out.present.ravel()[tgt] = True
    return out


def _hole_offsets(tau_d):
    r = int(math.ceil(tau_d))
    offs = [
        (dy * dy + dx * dx, dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if 0 < dy * dy + dx * dx <= tau_d * tau_d
    ]
    return [(dy, dx) for _, dy, dx in sorted(offs)]


def fill_holes(hmap, tau_d=2.0):
    """Copy the nearest hypothesis (ties: row-major first) into empty cells within ``tau_d``."""
    if tau_d < 0:
        raise ValueError("tau_d must be non-negative")
    out = hmap.copy()
    H, W = hmap.shape
    donors = hmap.present
    todo = ~donors
    fields = ("mu", "sigma2", "a", "b")
    for dy, dx in _hole_offsets(tau_d):
        if not todo.any():
            break
        # cell (y, x) takes from (y + dy, x + dx)
        ty0, ty1 = max(0, -dy), min(H, H - dy)
        tx0, tx1 = max(0, -dx), min(W, W - dx)
        if ty1 <= ty0 or tx1 <= tx0:
            continue
        tgt = (slice(ty0, ty1), slice(tx0, tx1))
        srcs = (slice(ty0 + dy, ty1 + dy), slice(tx0 + dx, tx1 + dx))
        take = todo[tgt] & donors[srcs]
        if not take.any():
            continue
        for name in fields:
            getattr(out, name)[tgt][take] = getattr(hmap, name)[srcs][take]
        out.present[tgt][take] = True
        todo[tgt][take] = False
    return out


def fuse_observations(hmap, obs, samples, model, sigma_disp2=1.0):
    """Apply one keyframe's depth observation to the hypothesis map."""
    if hmap.shape != obs.status.shape:
        raise ValueError("observation and map shapes differ")
    out = hmap.copy()
    out.frame_id = obs.frame_id
    valid = obs.status == VALID
    flat = obs.status == FLAT_OUTLIER
    present = hmap.present

    new = valid & ~present
    if new.any():
        d = obs.depth[new]
        out.mu[new] = d
        out.sigma2[new] = init_variance(d, samples.c_d, sigma_disp2)
        out.a[new] = INIT_COUNT
        out.b[new] = INIT_COUNT
        out.present[new] = True

    upd = valid & present
    if upd.any():
        d = obs.depth[upd]
        mu, s2, a, b, ok = inlier_update(
            hmap.mu[upd], hmap.sigma2[upd], hmap.a[upd], hmap.b[upd], d, model.r2_of(d), model.uniform_density
        )
        b = np.where(ok, b, hmap.b[upd] + 1.0)
        out.mu[upd] = np.where(ok, mu, hmap.mu[upd])
        out.sigma2[upd] = np.where(ok, s2, hmap.sigma2[upd])
        out.a[upd] = np.where(ok, a, hmap.a[upd])
        out.b[upd] = b

    bump = flat & present
    out.b[bump] = hmap.b[bump] + 1.0
    return out


@dataclass
class FilterOutput:
    """Emitted per-pixel mean, variance and inlier expectation (NaN when absent)."""

    mu: np.ndarray
    sigma2: np.ndarray
    inlier_prob: np.ndarray
    frame_id: int = 0

    @property
    def present(self):
        return np.isfinite(self.mu)

    @property
    def shape(self):
        return self.mu.shape


def emit_output(hmap, gate=OUTPUT_GATE):
    E = hmap.inlier_prob
    with np.errstate(invalid="ignore"):
        show = hmap.present & (E > gate)
    nan = np.nan
    return FilterOutput(
        mu=np.where(show, hmap.mu, nan),
        sigma2=np.where(show, hmap.sigma2, nan),
        inlier_prob=np.where(show, E, nan),
        frame_id=hmap.frame_id,
    )


class DepthFilter:
    """Stateful driver running propagate -> fill -> fuse -> emit per keyframe."""

    def __init__(self, samples, model=None, tau_d=2.0, sigma_tz2=SIGMA_TZ2,
                 propagate_gate=PROPAGATE_GATE, collision_gate=COLLISION_GATE, output_gate=OUTPUT_GATE):
        self.samples = samples
        self.model = model or MeasurementModel.from_samples(samples)
        self.tau_d = tau_d
        self.sigma_tz2 = sigma_tz2
        self.propagate_gate = propagate_gate
        self.collision_gate = collision_gate
        self.output_gate = output_gate
        self.map = None
        self.pose = None

    def step(self, obs, pose, intr):
        if self.map is None:
            hmap = HypothesisMap.empty(*obs.status.shape, frame_id=obs.frame_id)
        else:
            hmap = propagate(self.map, self.pose, pose, intr, self.sigma_tz2,
                             self.propagate_gate, self.collision_gate, frame_id=obs.frame_id)
            hmap = fill_holes(hmap, self.tau_d)
        hmap = fuse_observations(hmap, obs, self.samples, self.model)
        self.map, self.pose = hmap, pose
        return emit_output(hmap, self.output_gate)
