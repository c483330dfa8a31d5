"""Dense monocular reconstruction: plane-sweep depth, Gaussian-beta filtering, TSDF fusion."""

from ._accel import backend_name, numba_enabled
from .cost_volume import (
    CostVolume,
    DepthObservation,
    RegularizedVolume,
    aggregate_temporal,
    extract_depth,
    patch_sad,
    sgm_regularize,
)
from .dataset import parse_tum_sequence, associate, load_camera_config, render_synthetic, plane_scene
from .filter import (
    DepthFilter,
    FilterOutput,
    Hypothesis,
    HypothesisMap,
    MeasurementModel,
    emit_output,
    fill_holes,
    fuse_observations,
    init_hypothesis,
    propagate,
    resolve_collision,
    update_inlier_case,
    update_outlier_case,
)
from .geometry import (
    CameraFrame,
    DepthSampleSet,
    Intrinsics,
    Pose,
    build_sample_set,
    parallax_deviation,
    select_aggregation_frames,
    warp_coeffs,
)
from .marching_cubes import Mesh
from .tsdf import TsdfVolume, export_ply, read_ply

__version__ = "0.1.0"
