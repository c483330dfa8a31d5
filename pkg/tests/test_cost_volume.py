import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from monodense.cost_volume import (
    FLAT_OUTLIER,
    NO_DATA,
    VALID,
    CostVolume,
    RegularizedVolume,
    aggregate_temporal,
    dump_cost_slices,
    extract_depth,
    patch_sad,
    sgm_path_tables,
    sgm_regularize,
    winner_take_all,
)
from monodense.dataset import plane_scene, render_synthetic
from monodense.geometry import Intrinsics, build_sample_set, warp_pixel

from helpers import make_frame
from sgm_oracle import brute_force_path, brute_force_tables


def test_patch_sad_examples():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, (12, 12)).astype(float)
    assert patch_sad(img, (5, 5), img, (5.0, 5.0)) == 0.0
    assert patch_sad(img, (5, 5), img + 10.0, (5.0, 5.0)) == pytest.approx(90.0)
    assert patch_sad(img, (5, 5), img, (50.0, 5.0)) is None
    assert patch_sad(img, (0, 5), img, (5.0, 5.0)) is None
    assert patch_sad(img, (5, 5), img, (10.5, 5.0)) is None


def test_patch_sad_bilinear_and_symmetric():
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 255, (10, 10))
    b = rng.uniform(0, 255, (10, 10))
    assert patch_sad(a, (4, 4), b, (6, 3)) == patch_sad(b, (6, 3), a, (4, 4))
    # a linear ramp is reproduced exactly by bilinear sampling
    ramp = np.add.outer(np.arange(10.0), 2 * np.arange(10.0))
    shifted = ramp + 2 * 0.25
    assert patch_sad(shifted, (4, 4), ramp, (4.25, 4.0)) == pytest.approx(0.0, abs=1e-12)


def test_aggregate_identical_frame_is_zero():
    intr = Intrinsics(100.0, 100.0, 20.0, 15.0, 40, 30)
    img = np.random.default_rng(0).uniform(0, 255, (30, 40))
    f = make_frame(intr, image=img)
    s = build_sample_set(0.05, 100.0, 8)
    cv = aggregate_temporal(f, [f], s)
    inner = cv.raw_cost[1:-1, 1:-1]
    assert np.all(inner == 0.0)
    assert np.all(cv.valid_count[1:-1, 1:-1] == 1)
    assert cv.no_data[0].all() and cv.no_data[:, -1].all()
    assert np.all(cv.raw_cost >= 0)


def test_aggregate_out_of_view_is_no_data():
    intr = Intrinsics(100.0, 100.0, 20.0, 15.0, 40, 30)
    img = np.random.default_rng(0).uniform(0, 255, (30, 40))
    ref = make_frame(intr, image=img)
    # far to the side: nothing projects inside at any sample
    rot180 = np.diag([-1.0, 1.0, -1.0])
    other = make_frame(intr, t=(0, 0, 0), R=rot180, image=img)
    s = build_sample_set(0.05, 100.0, 8)
    cv = aggregate_temporal(ref, [other], s)
    assert cv.no_data.all()
    assert np.all(cv.valid_count == 0)


def _on_bound(uv, w, h, tol=1e-9):
    return any(abs(a - b) < tol for a, b in ((uv[0], 1.0), (uv[0], w - 2.0), (uv[1], 1.0), (uv[1], h - 2.0)))


def test_aggregate_matches_exhaustive_oracle():
    scene = plane_scene(depth=2.0, width=64, height=48, focal=60.0, frames=4, baseline=0.05, noise_sigma=0.0,
                        scale=0.08)
    frames = [render_synthetic(scene, i)[0] for i in range(4)]
    ref, srcs = frames[3], frames[:3]
    s = build_sample_set(0.04, 60.0, 16)
    cv = aggregate_temporal(ref, srcs, s)
    rng = np.random.default_rng(1)
    pix = [(int(x), int(y)) for x, y in zip(rng.integers(1, 63, 40), rng.integers(1, 47, 40))]
    checked = 0
    for x, y in pix:
        for k in range(s.L):
            warped = [warp_pixel((x, y), s.samples[k], ref, f) for f in srcs]
            # a warp landing exactly on the in-bounds limit can round either way
            if any(_on_bound(uv, 64, 48) for uv in warped):
                continue
            vals = [c for c in (patch_sad(ref.image, (x, y), f.image, uv) for f, uv in zip(srcs, warped))
                    if c is not None]
            assert cv.counts[y, x, k] == len(vals)
            if vals:
                assert cv.raw_cost[y, x, k] == pytest.approx(np.mean(vals), rel=1e-9, abs=1e-9)
            checked += 1
    assert checked > 0.9 * len(pix) * s.L


def test_aggregate_argmin_nearest_sample():
    scene = plane_scene(depth=2.0, width=120, height=90, focal=120.0, frames=6, baseline=0.05, noise_sigma=0.0,
                        scale=0.05)
    frames = [render_synthetic(scene, i)[0] for i in range(6)]
    # one sample step is at most one pixel of shift in every aggregation frame
    s = build_sample_set(0.25, 120.0, 64)
    cv = aggregate_temporal(frames[5], frames[:5], s)
    k = winner_take_all(cv, s)
    # interior pixels seen in every frame at the true depth
    inner = np.zeros((90, 120), bool)
    inner[2:-2, 2:84] = True
    target = int(np.rint(s.index_of(2.0)))
    assert np.all(k.disparity_index[inner] == target)


def test_sgm_hand_example():
    e = np.array([[[0.0, 10.0], [10.0, 0.0]]])
    t = sgm_path_tables(e, P1=2.0, P2=2.0)
    assert t["left"][0, 1].tolist() == [10.0, 2.0]
    assert t["left"][0, 0].tolist() == [0.0, 10.0]


def test_sgm_zero_penalties_quadruple():
    e = np.random.default_rng(2).uniform(0, 100, (7, 9, 5))
    S = sgm_regularize(e, 0.0, 0.0).S
    assert np.array_equal(S, 4.0 * e)


def test_sgm_uniform_ties_to_far_sample():
    e = np.full((4, 5, 6), 7.0)
    s = build_sample_set(0.1, 100.0, 6)
    reg = sgm_regularize(e, 10, 100)
    obs = winner_take_all(reg, s)
    assert np.all(obs.disparity_index == 5)


def test_sgm_rejects_bad_penalties():
    with pytest.raises(ValueError):
        sgm_regularize(np.zeros((2, 2, 2)), 5.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(
    e=arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12), st.integers(1, 8)),
             elements=st.integers(0, 400).map(float)),
    P1=st.integers(0, 30).map(float),
    extra=st.integers(0, 200).map(float),
)
def test_sgm_tables_match_brute_force(e, P1, extra):
    P2 = P1 + extra
    ref = brute_force_tables(e, P1, P2)
    got = sgm_path_tables(e, P1, P2)
    for k in ref:
        assert np.array_equal(got[k], ref[k]), k


def test_sgm_float_tables_match_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(5):
        e = rng.uniform(0, 300, (rng.integers(2, 33), rng.integers(2, 33), rng.integers(2, 9)))
        ref = brute_force_tables(e, 7.5, 61.25)
        got = sgm_path_tables(e, 7.5, 61.25)
        for k in ref:
            assert np.array_equal(got[k], ref[k])
        S = sgm_regularize(e, 7.5, 61.25).S
        assert np.array_equal(S, (ref["left"] + ref["right"]) + (ref["up"] + ref["down"]))


def test_sgm_no_data_pixels_contribute_zero():
    raw = np.random.default_rng(6).uniform(0, 50, (3, 4, 3))
    count = np.ones((3, 4, 3), np.int32)
    count[1, 2] = 0
    cv = CostVolume(raw_cost=raw, counts=count, valid_count=count.max(axis=2))
    masked = raw.copy()
    masked[1, 2] = 0.0
    t = sgm_path_tables(cv, 3.0, 30.0)
    assert np.array_equal(t["left"], brute_force_path(masked, 3.0, 30.0))


def _reg(curve):
    S = np.asarray(curve, dtype=np.float64)[None, None, :]
    return RegularizedVolume(S=S, no_data=np.zeros((1, 1), bool))


def test_extract_hand_offset():
    s = build_sample_set(0.1, 100.0, 8)
    obs = extract_depth(_reg([50, 50, 10, 4, 8, 50, 50, 50]), s)
    assert obs.status[0, 0] == VALID
    assert obs.disparity_index[0, 0] == pytest.approx(3.1, abs=1e-12)
    assert obs.depth[0, 0] == pytest.approx(1.0 / ((7 - 3.1) * s.c_d), rel=1e-12)


def test_extract_flat_example():
    s = build_sample_set(0.1, 100.0, 8)
    obs = extract_depth(_reg([50, 50, 10, 9.8, 10, 50, 50, 50]), s, eps_d=0.05)
    assert obs.status[0, 0] == FLAT_OUTLIER
    assert np.isnan(obs.depth[0, 0])


def test_extract_boundary_and_no_data():
    s = build_sample_set(0.1, 100.0, 8)
    assert extract_depth(_reg([1, 5, 9, 9, 9, 9, 9, 9]), s).status[0, 0] == FLAT_OUTLIER
    assert extract_depth(_reg([9, 9, 9, 9, 9, 9, 5, 1]), s).status[0, 0] == FLAT_OUTLIER
    reg = RegularizedVolume(S=np.zeros((1, 1, 8)), no_data=np.ones((1, 1), bool))
    obs = extract_depth(reg, s)
    assert obs.status[0, 0] == NO_DATA


@given(k0=st.floats(1.0, 6.0), scale=st.floats(0.5, 100.0), base=st.floats(0.0, 50.0))
def test_extract_exact_on_parabolas(k0, scale, base):
    s = build_sample_set(0.1, 100.0, 8)
    k = np.arange(8.0)
    curve = scale * (k - k0) ** 2 + base
    obs = extract_depth(_reg(curve), s, eps_d=0.0)
    if obs.status[0, 0] == VALID:
        assert obs.disparity_index[0, 0] == pytest.approx(k0, abs=1e-9)


@settings(max_examples=200)
@given(curve=st.lists(st.floats(0, 1000), min_size=3, max_size=12),
       e1=st.floats(0, 1), e2=st.floats(0, 1))
def test_extract_locality_and_monotone_flat_test(curve, e1, e2):
    lo, hi = sorted((e1, e2))
    s = build_sample_set(0.1, 100.0, len(curve))
    a = extract_depth(_reg(curve), s, eps_d=lo)
    b = extract_depth(_reg(curve), s, eps_d=hi)
    if a.status[0, 0] == VALID:
        k = np.argmin(np.asarray(curve)[::-1])
        k = len(curve) - 1 - k
        assert abs(a.disparity_index[0, 0] - k) <= 0.5
        lo_d, hi_d = s.samples[0] * (1 - 1e-12), s.samples[s.L - 2]
        spacing = s.spacing_at(a.depth[0, 0])
        assert lo_d - spacing <= a.depth[0, 0] <= hi_d + spacing
    if a.status[0, 0] == FLAT_OUTLIER:
        assert b.status[0, 0] == FLAT_OUTLIER


def test_extract_rejects_negative_eps():
    with pytest.raises(ValueError):
        extract_depth(_reg([3, 1, 3]), build_sample_set(0.1, 100.0, 3), eps_d=-0.1)


def test_dump_cost_slices(tmp_path):
    e = np.random.default_rng(0).uniform(0, 10, (5, 6, 3))
    paths = dump_cost_slices(RegularizedVolume(e, np.zeros((5, 6), bool)), tmp_path, indices=[0, 2])
    assert [p.name for p in paths] == ["cost_000.pgm", "cost_002.pgm"]
    data = paths[0].read_bytes()
    assert data.startswith(b"P5\n6 5\n255\n")
    assert len(data) == len(b"P5\n6 5\n255\n") + 30
