"""Mapping density and per-threshold depth error percentages."""

from __future__ import annotations

import math

import numpy as np

UNDEFINED = math.nan  # marker for metrics without a denominator


def default_thresholds():
    """0.01 m to 0.50 m in 0.01 m steps."""
    return np.round(np.arange(1, 51) * 0.01, 2)


def _valid(depth):
    d = np.asarray(depth, dtype=np.float64)
    return np.isfinite(d) & (d > 0)


def mapping_density(est, gt_valid):
    """Percent of ground-truth-valid pixels that also carry an estimate."""
    est_ok = _valid(est)
    gt_valid = np.asarray(gt_valid, dtype=bool)
    if est_ok.shape != gt_valid.shape:
        raise ValueError(f"shape mismatch {est_ok.shape} vs {gt_valid.shape}")
    n = int(gt_valid.sum())
    if n == 0:
        return UNDEFINED
    return 100.0 * int((est_ok & gt_valid).sum()) / n


def error_curve(est, gt, thresholds=None):
    """Percent of jointly valid pixels with ``|est - gt| <= e`` for each threshold ``e``.

    Returns a list of ``(threshold, percent)``; percents are ``UNDEFINED``
    when no pixel is valid in both images.
    """
    th = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(th) < 0):
        raise ValueError("thresholds must be sorted ascending")
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {gt.shape}")
    both = _valid(est) & _valid(gt)
    n = int(both.sum())
    if n == 0:
        return [(float(t), UNDEFINED) for t in th]
    err = np.sort(np.abs(est[both] - gt[both]))
    counts = np.searchsorted(err, th, side="right")
    return [(float(t), 100.0 * int(c) / n) for t, c in zip(th, counts)]


def fraction_within(est, gt, tol):
    """Percent of jointly valid pixels within a per-pixel tolerance image or scalar."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    both = _valid(est) & _valid(gt)
    n = int(both.sum())
    if n == 0:
        return UNDEFINED
    tol = np.broadcast_to(np.asarray(tol, dtype=np.float64), est.shape)
    return 100.0 * int((np.abs(est - gt)[both] <= tol[both]).sum()) / n


def average(values):
    vals = [v for v in values if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else UNDEFINED
