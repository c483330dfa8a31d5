"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--size 320x240]

Each kernel runs once per backend before timing so JIT compilation is not
counted. Both backends must produce the same result; the script exits
non-zero if they do not.
"""

import argparse
import os
import statistics
import sys
import time

import numpy as np

from monodense._accel import ENV_FLAG, HAVE_NUMBA
from monodense.cost_volume import aggregate_temporal, sgm_path_tables
from monodense.dataset import plane_scene, render_synthetic
from monodense.filter import FilterOutput
from monodense.geometry import build_sample_set
from monodense.kernels.voxel_hash import EMPTY, find_slots, insert_keys, pack_keys
from monodense.tsdf import TsdfVolume


def _setup(width, height, L):
    scene = plane_scene(width=width, height=height, focal=300.0 * width / 320, frames=6, noise_sigma=4.0)
    rendered = [render_synthetic(scene, i) for i in range(6)]
    frames = [f for f, _ in rendered]
    samples = build_sample_set(0.04, frames[0].intrinsics.fx, L)
    cv = aggregate_temporal(frames[-1], frames[:-1], samples)
    gt = rendered[-1][1]
    out = FilterOutput(gt, np.full(gt.shape, 0.01), np.full(gt.shape, 0.9))
    keys = np.unique(pack_keys(np.random.default_rng(0).integers(-500, 500, (200_000, 3))))
    return frames, samples, cv, out, keys


def _cases(frames, samples, cv, out, keys):
    def cost():
        return aggregate_temporal(frames[-1], frames[:-1], samples).raw_cost

    def sgm():
        return np.stack(list(sgm_path_tables(cv, 10.0, 100.0).values()))

    def raymarch():
        vol = TsdfVolume(voxel_size=0.05)
        vol.integrate(out, frames[-1])
        vol.integrate(out, frames[0])
        return np.concatenate([np.asarray(x, dtype=np.float64) for x in vol.table.items()])

    def voxel_hash():
        use = os.environ.get(ENV_FLAG) != "1"
        table = np.full(1 << 19, EMPTY, dtype=np.int64)
        insert_keys(table, keys, use_numba=use)
        return np.sort(find_slots(table, keys, use_numba=use))

    return {"cost aggregation": cost, "sgm path tables": sgm, "tsdf ray march": raymarch,
            "voxel hash insert+find": voxel_hash}


def _time(fn, repeats):
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--size", default="320x240", help="image size WxH")
    ap.add_argument("--samples", type=int, default=64, help="depth samples L")
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not importable; nothing to compare", file=sys.stderr)
        return 1
    width, height = (int(v) for v in args.size.lower().split("x"))
    cases = _cases(*_setup(width, height, args.samples))

    saved = os.environ.get(ENV_FLAG)
    mismatch = False
    print(f"{'kernel':<26}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    try:
        for name, fn in cases.items():
            times, results = {}, {}
            for backend, flag in (("numba", "0"), ("numpy", "1")):
                os.environ[ENV_FLAG] = flag
                results[backend] = fn()
                times[backend] = _time(fn, args.repeats)
            same = np.allclose(results["numba"], results["numpy"], rtol=1e-12, atol=1e-9, equal_nan=True)
            mismatch |= not same
            note = "" if same else "  RESULTS DIFFER"
            print(f"{name:<26}{1e3 * times['numba']:>12.2f}{1e3 * times['numpy']:>12.2f}"
                  f"{times['numpy'] / times['numba']:>9.1f}x{note}")
    finally:
        if saved is None:
            os.environ.pop(ENV_FLAG, None)
        else:
            os.environ[ENV_FLAG] = saved
    return 1 if mismatch else 0


if __name__ == "__main__":
    sys.exit(main())
