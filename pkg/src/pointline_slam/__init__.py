"""Stereo visual SLAM core: point + line features, dynamic-scene rejection,
gray-histogram place recognition, bundle adjustment, pose-graph optimization."""

from .association import (
    LineMatch,
    LocalLineGroup,
    PointMatch,
    build_llgs,
    filter_line_matches,
    filter_point_matches,
    grid_cross_value,
    match_stereo,
)
from .config import RunConfig
from .dynamics import (
    DynamicGridMap,
    DynamicLLGSet,
    MotionModel,
    detect_dynamic_grids,
    detect_dynamic_llgs,
    line_dynamic_error,
    predict_point,
)
from .estimation import (
    LMParams,
    NormalizedLine,
    PoseEstimate,
    ResidualBlock,
    TrackingLost,
    estimate_pose,
    line_horizontal_residual,
    line_vertical_residual,
    point_residual,
)
from .evaluation import TrajectoryMetrics, evaluate_trajectory
from .geometry import (
    Frame,
    Landmark3D,
    LineFeature2D,
    PointFeature2D,
    PoseSE3,
    StereoCamera,
    se3_exp,
    se3_log,
    triangulate_line,
    triangulate_point,
)
from .ggs import (
    GGSDescriptor,
    compute_ggs,
    ggs_dissimilarity,
    is_new_keyframe,
    keyframe_threshold,
)
from .loopclosure import (
    LoopCandidate,
    LoopConfig,
    PoseGraph,
    correct_loop,
    find_loop_candidates,
    global_bundle_adjust,
    optimize_pose_graph,
    verify_candidate,
)
from .mapping import CovisibilityGraph, KeyFrame, LocalMap
from .pipeline import SlamSystem, run_sequence
from .sequence_io import SequenceSource, load_sequence
from .synthetic import BodySpec, SceneSpec, SyntheticScene, generate_scene, write_sequence

__version__ = "0.1.0"
