"""End-to-end orchestration with ablation switches, artifact dumps and metrics."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
import traceback
from collections import deque
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dataset as ds
from .cost_volume import RegularizedVolume, aggregate_temporal, dump_cost_slices, extract_depth, sgm_regularize, winner_take_all
from .filter import DepthFilter, FilterOutput, MeasurementModel, init_variance
from .geometry import build_sample_set, select_aggregation_frames
from .metrics import UNDEFINED, default_thresholds, error_curve, fraction_within, mapping_density
from .outputs import write_filter_output
from .tsdf import TsdfVolume, export_ply

logger = logging.getLogger(__name__)

STAGE_ORDER = ("T", "S", "D", "H")

# public calibrations of the three TUM RGB-D sensors, used when a sequence ships no camera file
TUM_CAMERAS = {
    "freiburg1": dict(fx=517.3, fy=516.5, cx=318.6, cy=255.3, width=640, height=480),
    "freiburg2": dict(fx=520.9, fy=521.0, cx=325.1, cy=249.7, width=640, height=480),
    "freiburg3": dict(fx=535.4, fy=539.2, cx=320.1, cy=247.6, width=640, height=480),
}


class InputError(ValueError):
    pass


def parse_stages(text):
    if isinstance(text, str):
        items = [s.strip().upper() for s in text.replace("+", ",").split(",") if s.strip()]
    else:
        items = [str(s).upper() for s in text]
    bad = [s for s in items if s not in STAGE_ORDER]
    if bad:
        raise ValueError(f"unknown stage(s) {bad}; choose from {','.join(STAGE_ORDER)}")
    return tuple(s for s in STAGE_ORDER if s in items)


@dataclass(frozen=True)
class AblationConfig:
    stages: tuple = STAGE_ORDER
    fuse: bool = False
    # sampling and frame selection
    L: int = 64
    depth_prior: float = 2.0
    baseline: float = 0.0  # 0 -> depth_prior / 50
    K_a: int = 5
    K_p: float = 100.0
    keyframe_every: int = 5
    history: int = 60
    max_diff: float = ds.DEFAULT_MAX_DIFF
    # cost volume
    P1: float = 10.0
    P2: float = 100.0
    eps_d: float = 0.05
    # filter
    tau_d: float = 2.0
    sigma_tz2: float = 0.0025
    sigma_disp2: float = 1.0
    propagate_gate: float = 0.4
    collision_gate: float = 0.5
    output_gate: float = 0.6
    # fusion
    carve_gate: float = 0.8
    voxel_size: float = 0.1
    truncation: float = 0.0  # 0 -> 3 * voxel_size
    weight: str = "inverse-variance"
    color_by_height: bool = False
    # run control
    workers: int = 1
    seed: int = 0
    max_frames: int = 0  # 0 -> all
    depth_scale: float = ds.DEPTH_SCALE
    dump_cost: bool = False
    camera: str = ""

    def __post_init__(self):
        st = parse_stages(self.stages)
        object.__setattr__(self, "stages", st)
        if "T" not in st:
            raise ValueError("stage T is mandatory")
        for later, needs in (("S", "T"), ("D", "S"), ("H", "D")):
            if later in st and needs not in st:
                raise ValueError(f"stage {later} requires stage {needs}")
        if self.L < 2 or self.K_a < 1 or self.keyframe_every < 1 or self.history < 1:
            raise ValueError("L >= 2, K_a >= 1, keyframe_every >= 1 and history >= 1 are required")
        if not self.P2 >= self.P1 >= 0:
            raise ValueError("penalties must satisfy P2 >= P1 >= 0")
        if self.depth_prior <= 0 or self.voxel_size <= 0:
            raise ValueError("depth_prior and voxel_size must be positive")

    @property
    def label(self):
        return "+".join(self.stages)

    @property
    def effective_baseline(self):
        return self.baseline if self.baseline > 0 else self.depth_prior / 50.0

    @property
    def effective_truncation(self):
        return self.truncation if self.truncation > 0 else 3.0 * self.voxel_size

    @classmethod
    def from_mapping(cls, values, **overrides):
        kinds = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in {**values, **overrides}.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise KeyError(f"unknown config key {key!r}")
            default = getattr(cls, key, None) if key != "stages" else None
            if key == "stages":
                kwargs[key] = parse_stages(raw)
            elif isinstance(default, bool):
                kwargs[key] = raw if isinstance(raw, bool) else str(raw).strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, **overrides):
        return cls.from_mapping(ds.parse_key_values(path), **overrides)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "stages":
                v = ",".join(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


@dataclass
class FrameMetrics:
    frame: int
    timestamp: float
    stage: str
    density: float
    n_est: int
    n_gt: int
    within_2_spacings: float
    curve: list


@dataclass
class MetricsReport:
    config: AblationConfig
    rows: list = field(default_factory=list)  # FrameMetrics
    timings: list = field(default_factory=list)  # (frame, stage, ms)
    failures: list = field(default_factory=list)  # (frame, stage, message)
    skipped: list = field(default_factory=list)  # (frame, reason)
    keyframes: list = field(default_factory=list)
    mesh_path: Path | None = None
    estimates: dict = field(default_factory=dict)  # stage -> list of depth images
    ground_truth: list = field(default_factory=list)

    def stage_rows(self, stage):
        return [r for r in self.rows if r.stage == stage]

    def average_density(self, stage):
        vals = [r.density for r in self.stage_rows(stage) if not math.isnan(r.density)]
        return sum(vals) / len(vals) if vals else UNDEFINED

    def final(self, stage):
        rows = self.stage_rows(stage)
        return rows[-1] if rows else None

    def pooled_curve(self, stage, thresholds=None):
        """Error curve over the union of all keyframe pixels for ``stage``."""
        est = self.estimates.get(stage, [])
        if not est:
            return []
        return error_curve(np.concatenate([e.ravel() for e in est]),
                           np.concatenate([g.ravel() for g in self.ground_truth]), thresholds)

    def pooled_density(self, stage):
        est = self.estimates.get(stage, [])
        if not est:
            return UNDEFINED
        e = np.concatenate([x.ravel() for x in est])
        g = np.concatenate([x.ravel() for x in self.ground_truth])
        return mapping_density(e, np.isfinite(g) & (g > 0))

    def average_timings(self):
        acc = {}
        for _, stage, ms in self.timings:
            acc.setdefault(stage, []).append(ms)
        return {k: sum(v) / len(v) for k, v in acc.items()}


# ---------------------------------------------------------------------------
# inputs


@dataclass
class _Source:
    intrinsics: object
    frames: object  # iterator of (CameraFrame, gt depth or None)
    count: int


def _camera_for_sequence(root, config):
    if config.camera:
        return ds.load_camera_config(config.camera)
    for name in ("camera.txt", "camera.cfg"):
        if (root / name).is_file():
            return ds.load_camera_config(root / name)
    for key, vals in TUM_CAMERAS.items():
        if key in root.name:
            logger.info("using the published %s calibration", key)
            return ds.Intrinsics(**vals)
    raise InputError(f"{root}: no camera.txt and no known sensor in the directory name; pass camera=")


def _open_source(path, config):
    p = Path(path)
    if not p.exists():
        raise InputError(f"input {p} does not exist")
    if p.is_dir():
        manifest = ds.parse_tum_sequence(p)
        assoc = ds.associate(manifest, config.max_diff)
        if config.max_frames:
            assoc = assoc[: config.max_frames]
        intr = _camera_for_sequence(p, config)

        def gen():
            for i, af in enumerate(assoc):
                img = ds.read_gray(af.rgb_path)
                gt = ds.read_depth_png(af.depth_path, config.depth_scale) if af.depth_path else None
                yield ds.CameraFrame(img, intr, af.pose, af.timestamp, frame_id=i), gt

        return _Source(intr, gen(), len(assoc))
    scene = ds.parse_scene(p)
    n = len(scene.trajectory) if not config.max_frames else min(config.max_frames, len(scene.trajectory))

    def gen_synth():
        for i in range(n):
            yield ds.render_synthetic(scene, i)

    return _Source(scene.intrinsics, gen_synth(), n)


# ---------------------------------------------------------------------------
# running


def _observation_output(obs, samples, sigma_disp2):
    """Filter-output stand-in for runs without H: every valid pixel, E = 0.5."""
    valid = obs.valid
    nan = np.nan
    d = np.where(valid, obs.depth, nan)
    s2 = np.where(valid, init_variance(np.where(valid, obs.depth, 1.0), samples.c_d, sigma_disp2), nan)
    return FilterOutput(mu=d, sigma2=s2, inlier_prob=np.where(valid, 0.5, nan), frame_id=obs.frame_id)


def _timed(report, frame, stage, fn):
    t0 = time.perf_counter()
    out = fn()
    report.timings.append((frame, stage, 1000.0 * (time.perf_counter() - t0)))
    return out


def run_frames(config, source, out_dir=None, write=True):
    """Core loop over an in-memory source; returns a :class:`MetricsReport`."""
    report = MetricsReport(config=config)
    intr = source.intrinsics
    samples = build_sample_set(config.effective_baseline, intr.fx, config.L)
    model = MeasurementModel.from_samples(samples, config.sigma_disp2)
    filt = DepthFilter(samples, model, config.tau_d, config.sigma_tz2, config.propagate_gate,
                       config.collision_gate, config.output_gate) if "H" in config.stages else None
    vol = TsdfVolume(config.voxel_size, config.effective_truncation, config.weight, config.carve_gate) if config.fuse else None
    history = deque(maxlen=config.history)
    probe = config.depth_prior
    thresholds = default_thresholds()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None and write:
        for st in config.stages:
            (out / "depth" / st).mkdir(parents=True, exist_ok=True)
        if filt is not None:
            (out / "filter").mkdir(parents=True, exist_ok=True)
        (out / "gt").mkdir(parents=True, exist_ok=True)
    for stage in config.stages:
        report.estimates[stage] = []

    for i, (frame, gt) in enumerate(source.frames):
        is_key = i % config.keyframe_every == 0
        if not is_key:
            history.append(frame)
            continue
        if not history:
            report.skipped.append((i, "no aggregation frames"))
            history.append(frame)
            continue
        stage = "select"
        try:
            agg = _timed(report, i, "select", lambda: select_aggregation_frames(
                list(history), frame, config.K_a, config.K_p, probe))
            if not agg:
                report.skipped.append((i, "no frame with parallax"))
                history.append(frame)
                continue
            stage = "T"
            cv = _timed(report, i, "T", lambda: aggregate_temporal(frame, agg, samples, config.workers))
            est = {"T": winner_take_all(cv, samples, i)}
            reg = RegularizedVolume(S=cv.raw_cost, no_data=cv.no_data)
            if "S" in config.stages:
                stage = "S"
                reg = _timed(report, i, "S", lambda: sgm_regularize(cv, config.P1, config.P2, config.workers))
                est["S"] = winner_take_all(reg, samples, i)
            last = est["S"] if "S" in est else est["T"]
            if "D" in config.stages:
                stage = "D"
                est["D"] = _timed(report, i, "D", lambda: extract_depth(reg, samples, config.eps_d, i))
                last = est["D"]
            output = None
            if filt is not None:
                stage = "H"
                output = _timed(report, i, "H", lambda: filt.step(est["D"], frame.pose, intr))
            if config.dump_cost and out is not None and write:
                dump_cost_slices(cv, out / "cost" / f"{i:06d}", prefix="raw")
            stage = "fuse"
            if vol is not None:
                fo = output if output is not None else _observation_output(last, samples, config.sigma_disp2)
                _timed(report, i, "fuse", lambda: vol.integrate(fo, frame, workers=config.workers))
        except Exception as exc:  # noqa: BLE001 - recorded, run ends with a partial report
            report.failures.append((i, stage, f"{type(exc).__name__}: {exc}"))
            logger.error("frame %d stage %s failed\n%s", i, stage, traceback.format_exc())
            break

        report.keyframes.append(i)
        images = {st: est[st].depth_image() for st in est}
        if output is not None:
            images["H"] = np.where(output.present, output.mu, np.nan)
        # the probe comes from T, which every ladder shares, so enabling later
        # stages cannot change frame selection and hence earlier-stage outputs
        base = images["T"]
        if np.isfinite(base).any():
            probe = float(np.median(base[np.isfinite(base)]))
        if gt is not None:
            report.ground_truth.append(gt)
            gt_valid = np.isfinite(gt) & (gt > 0)
            tol = 2.0 * samples.spacing_at(np.where(gt_valid, gt, 1.0))
            for st in config.stages:
                d = images[st]
                report.estimates[st].append(d)
                report.rows.append(FrameMetrics(
                    frame=i, timestamp=frame.timestamp, stage=st,
                    density=mapping_density(d, gt_valid),
                    n_est=int(np.isfinite(d).sum()), n_gt=int(gt_valid.sum()),
                    within_2_spacings=fraction_within(d, gt, tol),
                    curve=error_curve(d, gt, thresholds),
                ))
        if out is not None and write:
            for st in config.stages:
                ds.write_depth_png(images[st], out / "depth" / st / f"{i:06d}.png", config.depth_scale)
            if output is not None:
                write_filter_output(output, out / "filter" / f"{i:06d}.mdf")
            if gt is not None:
                ds.write_depth_png(gt, out / "gt" / f"{i:06d}.png", config.depth_scale)
        history.append(frame)

    if vol is not None and not report.failures and out is not None and write:
        mesh = vol.extract_mesh(color_by_height=config.color_by_height)
        report.mesh_path = out / "mesh.ply"
        export_ply(mesh, report.mesh_path)
    if out is not None and write:
        write_report(report, out)
    return report


def run_pipeline(config, input_path, out_dir):
    """Run on a TUM-format directory or a synthetic scene file and write artifacts."""
    source = _open_source(input_path, config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    return run_frames(config, source, out)


# ---------------------------------------------------------------------------
# report files


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def metrics_header(thresholds=None):
    th = default_thresholds() if thresholds is None else thresholds
    return ["frame", "timestamp", "stages", "stage", "density_pct", "n_est", "n_gt", "within_2_spacings_pct"] + [
        f"err_le_{t:.2f}" for t in th
    ]


def metrics_csv_text(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_header())
    for r in report.rows:
        w.writerow([r.frame, f"{r.timestamp:.6f}", report.config.label, r.stage, _fmt(r.density), r.n_est, r.n_gt,
                    _fmt(r.within_2_spacings)] + [_fmt(p) for _, p in r.curve])
    return buf.getvalue()


def write_report(report, out):
    out = Path(out)
    (out / "metrics.csv").write_text(metrics_csv_text(report))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stages", "stage", "keyframes", "avg_density_pct", "pooled_density_pct"])
    for st in report.config.stages:
        w.writerow([report.config.label, st, len(report.stage_rows(st)), _fmt(report.average_density(st)),
                    _fmt(report.pooled_density(st))])
    (out / "summary.csv").write_text(buf.getvalue())
    # wall times are not reproducible, so they live apart from the metric tables
    with open(out / "timing.csv", "w") as fh:
        fh.write("frame,stage,ms\n")
        fh.writelines(f"{f},{s},{ms:.3f}\n" for f, s, ms in report.timings)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "stage", "message"])
    w.writerows(report.failures)
    w.writerows((f, "skipped", m) for f, m in report.skipped)
    (out / "failures.csv").write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# eval over written depth images


def evaluate_directories(est_dir, gt_dir, out_csv, depth_scale=ds.DEPTH_SCALE, thresholds=None):
    """Compare same-named 16-bit depth PNGs; one CSV row per pair."""
    est_dir, gt_dir = Path(est_dir), Path(gt_dir)
    if not est_dir.is_dir() or not gt_dir.is_dir():
        raise InputError("both --est and --gt must be directories")
    names = sorted(p.name for p in est_dir.glob("*.png") if (gt_dir / p.name).is_file())
    if not names:
        raise InputError(f"no matching PNG names between {est_dir} and {gt_dir}")
    th = default_thresholds() if thresholds is None else np.asarray(thresholds)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "density_pct", "n_est", "n_gt"] + [f"err_le_{t:.2f}" for t in th])
    rows = []
    for name in names:
        est = ds.read_depth_png(est_dir / name, depth_scale)
        gt = ds.read_depth_png(gt_dir / name, depth_scale)
        gv = np.isfinite(gt)
        row = (name, mapping_density(est, gv), int(np.isfinite(est).sum()), int(gv.sum()), error_curve(est, gt, th))
        rows.append(row)
        w.writerow([name, _fmt(row[1]), row[2], row[3]] + [_fmt(p) for _, p in row[4]])
    Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
    Path(out_csv).write_text(buf.getvalue())
    return rows


def write_synthetic_sequence(scene_path, frames, out_dir):
    """Render a scene file to a TUM-format directory with camera.txt."""
    scene = ds.parse_scene(scene_path)
    if frames:
        scene = scene.with_frames(frames)
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    manifest = ds.SequenceManifest(root=out)
    for i in range(len(scene.trajectory)):
        frame, depth = ds.render_synthetic(scene, i)
        t = round(frame.timestamp, 6)
        name = f"{t:.6f}.png"
        ds.write_gray(frame.image, out / "rgb" / name)
        ds.write_depth_png(depth, out / "depth" / name)
        manifest.rgb_entries.append((t, f"rgb/{name}"))
        manifest.depth_entries.append((t, f"depth/{name}"))
        tr = frame.pose.translation
        manifest.gt_poses.append((t, tuple(float(v) for v in tr), tuple(float(v) for v in frame.pose.to_quaternion())))
    ds.write_tum_sequence(manifest, out)
    ds.write_camera_config(scene.intrinsics, out / "camera.txt")
    return manifest
