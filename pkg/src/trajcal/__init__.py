"""Spatio-temporal calibration of fixed roadside sensors by matching the
trajectories of objects both observe: no initial guess, no shared clock."""

from .errors import (
    BothZeroScore,
    CalibrationError,
    DegenerateGeometry,
    DegenerateSegment,
    DegenerateTimestep,
    EmptyTrajectory,
    InsufficientOverlap,
    InvalidFeature,
    NoCandidateMatches,
    TooFewPairs,
)
from .estimator import (
    CorrespondenceSet,
    SpatialSolution,
    estimate_time_offset_coarse,
    refine_time_offset,
    solve,
    solve_spatial,
)
from .evaluation import (
    MetricReport,
    SweepRow,
    SweepSummary,
    make_report,
    rre,
    rte,
    run_sweep,
    success,
    summarize,
    toe,
)
from .features import (
    FeatureDatabase,
    MotionFeature,
    curvature,
    extract_features,
    segment_velocities,
    velocity_stats,
)
from .matching import (
    MatchWeights,
    PositionMatch,
    apply_semantic_filters,
    feature_distance,
    filter_bbox,
    filter_mutual_nn,
    filter_neighbor_count,
    filter_neighborhood_distribution,
    motion_match,
)
from .model import (
    CLASS_LABELS,
    Position,
    Trajectory,
    TrajectoryDatabase,
    Transform4D,
    apply,
    blend_transforms,
    compose,
    invert,
    transform_database,
    transform_trajectory,
)
from .pipeline import (
    CalibrationSession,
    PipelineConfig,
    SessionStore,
    calibrate,
    derive_position_pairs,
    fuse_sessions,
    score_session,
    update_continuous,
)
from .simulator import (
    LAYOUTS,
    ScenarioConfig,
    WorldTrack,
    default_scenario,
    generate_world_tracks,
    generate_world_trajectories,
    make_nonoverlapping_pair,
    make_pair,
    observe,
    sensor_pose,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
