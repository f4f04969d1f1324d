"""Semantic-feature SLAM for surround-view parking assistance, on a synthetic testbed."""

from .camera import FisheyeCamera, IpmIntrinsics, LabelImage
from .config import (
    IcpConfig,
    LocalizerConfig,
    MappingConfig,
    NoiseSpec,
    OdomNoise,
    RunConfig,
    SimConfig,
    load_run_config,
)
from .geometry import Pose6, compose, inverse, planar_pose, relative, transform_point
from .localization import LocState, Status, initialize, relocalize, track
from .mapping import (
    GlobalMap,
    LocalMap,
    Mapper,
    PoseGraph,
    assemble_global_map,
    detect_loop,
    optimize_pose_graph,
)
from .map_store import load as load_map
from .map_store import save as save_map
from .metrics import RunReport, Trajectory, ate, localization_error, nees, recall
from .parking import ParkingSpot, anchor_spots, cluster_corners, detect_spots
from .pipeline import run_localization, run_mapping, run_recall_study
from .registration import IcpResult, SpatialIndex, icp
from .semantics import (
    FEATURE_CLASSES,
    LOCALIZATION_CLASSES,
    GridSpec,
    PointCloud,
    SemanticClass,
    extract_features,
    rasterize_world,
    voxel_downsample,
)
from .sim import RouteSpec, generate_trajectory, observation_stream, simulate_odometry
from .world import WorldModel, generate_world, load_world, save_world

__version__ = "0.1.0"

__all__ = [
    "FisheyeCamera", "IpmIntrinsics", "LabelImage",
    "IcpConfig", "LocalizerConfig", "MappingConfig", "NoiseSpec", "OdomNoise",
    "RunConfig", "SimConfig", "load_run_config",
    "Pose6", "compose", "inverse", "planar_pose", "relative", "transform_point",
    "LocState", "Status", "initialize", "relocalize", "track",
    "GlobalMap", "LocalMap", "Mapper", "PoseGraph",
    "assemble_global_map", "detect_loop", "optimize_pose_graph",
    "load_map", "save_map",
    "RunReport", "Trajectory", "ate", "localization_error", "nees", "recall",
    "ParkingSpot", "anchor_spots", "cluster_corners", "detect_spots",
    "run_localization", "run_mapping", "run_recall_study",
    "IcpResult", "SpatialIndex", "icp",
    "FEATURE_CLASSES", "LOCALIZATION_CLASSES", "GridSpec", "PointCloud",
    "SemanticClass", "extract_features", "rasterize_world", "voxel_downsample",
    "RouteSpec", "generate_trajectory", "observation_stream", "simulate_odometry",
    "WorldModel", "generate_world", "load_world", "save_world",
]
