import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from monodense.metrics import UNDEFINED, average, default_thresholds, error_curve, fraction_within, mapping_density
from monodense.outputs import read_filter_output, write_filter_output
from monodense.filter import FilterOutput


def test_threshold_grid():
    th = default_thresholds()
    assert th[0] == 0.01 and th[-1] == 0.5 and len(th) == 50
    assert np.all(np.diff(th) > 0)


def test_density_examples():
    gt_valid = np.ones((4, 4), bool)
    est = np.full((4, 4), 2.0)
    assert mapping_density(est, gt_valid) == 100.0
    est[:2] = np.nan
    assert mapping_density(est, gt_valid) == 50.0
    assert math.isnan(mapping_density(est, np.zeros((4, 4), bool)))
    with pytest.raises(ValueError):
        mapping_density(est, np.ones((3, 3), bool))


def test_density_ignores_estimates_without_ground_truth():
    gt_valid = np.zeros((2, 2), bool)
    gt_valid[0, 0] = True
    assert mapping_density(np.full((2, 2), 1.0), gt_valid) == 100.0


def test_error_curve_exact():
    gt = np.linspace(1, 3, 20).reshape(4, 5)
    assert all(p == 100.0 for _, p in error_curve(gt.copy(), gt))


def test_error_curve_step():
    gt = np.full((5, 5), 2.0)
    assert np.all(np.abs((gt + 0.05) - gt) <= 0.05)  # the offset survives rounding at 2 m
    curve = error_curve(gt + 0.05, gt, [0.01, 0.04, 0.049, 0.05, 0.06, 0.5])
    assert [p for _, p in curve] == [0.0, 0.0, 0.0, 100.0, 100.0, 100.0]


def test_error_curve_undefined_and_errors():
    nan = np.full((2, 2), np.nan)
    assert all(p is UNDEFINED or math.isnan(p) for _, p in error_curve(nan, np.ones((2, 2))))
    with pytest.raises(ValueError):
        error_curve(np.ones((2, 2)), np.ones((2, 2)), [0.2, 0.1])


@settings(max_examples=60, deadline=None)
@given(est=arrays(np.float64, (6, 6), elements=st.floats(0.5, 5.0) | st.just(np.nan)),
       gt=arrays(np.float64, (6, 6), elements=st.floats(0.5, 5.0) | st.just(np.nan)))
def test_error_curve_monotone_and_bounded(est, gt):
    curve = [p for _, p in error_curve(est, gt)]
    if any(math.isnan(p) for p in curve):
        assert all(math.isnan(p) for p in curve)
        return
    assert all(0 <= p <= 100 for p in curve)
    assert all(b >= a for a, b in zip(curve, curve[1:]))


@settings(max_examples=60, deadline=None)
@given(est=arrays(np.float64, (5, 7), elements=st.floats(0.1, 10.0) | st.just(np.nan)),
       mask=arrays(bool, (5, 7)))
def test_density_bounded(est, mask):
    d = mapping_density(est, mask)
    if mask.any():
        assert 0 <= d <= 100
    else:
        assert math.isnan(d)


def test_fraction_within_per_pixel_tolerance():
    gt = np.array([1.0, 2.0, 4.0])
    est = np.array([1.05, 2.05, np.nan])
    assert fraction_within(est, gt, np.array([0.1, 0.01, 1.0])) == 50.0
    assert math.isnan(fraction_within(np.full(3, np.nan), gt, 1.0))


def test_average_skips_undefined():
    assert average([10.0, UNDEFINED, 20.0]) == 15.0
    assert math.isnan(average([UNDEFINED]))


def test_filter_output_file_round_trip(tmp_path):
    mu = np.array([[2.0, np.nan], [3.5, 1.25]])
    out = FilterOutput(mu, np.where(np.isfinite(mu), 0.01, np.nan), np.where(np.isfinite(mu), 0.7, np.nan), frame_id=42)
    p = tmp_path / "f.mdf"
    write_filter_output(out, p)
    raw = p.read_bytes()
    assert raw[:8] == b"MDFILT\0\0"
    assert len(raw) == 8 + 16 + 3 * 4 * 4
    back = read_filter_output(p)
    assert back.frame_id == 42 and back.shape == (2, 2)
    assert np.array_equal(back.mu, mu.astype(np.float32), equal_nan=True)
    assert np.allclose(back.inlier_prob[np.isfinite(mu)], 0.7, rtol=1e-7)
    p.write_bytes(b"junk" * 8)
    with pytest.raises(ValueError):
        read_filter_output(p)
