"""End-to-end runs: map a traversal, localize a later drive, sweep noise.

The mapping drive and the localization drive share the world and route
but are different drives: their odometry and segmentation noise draw
from shifted seeds (+1000) so the second traversal never sees the
first one's noise realization.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .geometry import Pose6, compose
from .localization import Status, initialize, track
from .mapping import GlobalMap, Mapper, PoseGraph, with_spots
from .metrics import Trajectory, ate, localization_error, nees, recall
from .parking import ParkingSpot, anchor_spots, cluster_corners, detect_spots
from .sim import RouteSpec, generate_trajectory, observation_stream, simulate_odometry
from .world import WorldModel

LOC_DRIVE_SEED_SHIFT = 1000


def _dead_reckon(start: Pose6, deltas) -> list[Pose6]:
    poses = [start]
    for d in deltas:
        poses.append(compose(poses[-1], d))
    return poses


@dataclass
class MappingResult:
    gmap: GlobalMap
    graph: PoseGraph
    est: Trajectory              # optimized, re-anchored per frame
    dead: Trajectory             # odometry dead reckoning
    gt: Trajectory
    ate_est: tuple[float, float]
    ate_dead: tuple[float, float]
    gap: float                   # start-to-end distance of the estimate, m
    loop_edges: int
    spots: list[ParkingSpot]
    frames: int
    sim_seconds: float


def run_mapping(world: WorldModel, route: RouteSpec, cfg: RunConfig,
                detect_parking: bool = True) -> MappingResult:
    """Drives the route once and builds the semantic map."""
    gt_pairs = generate_trajectory(world, route)
    deltas = simulate_odometry(gt_pairs, cfg.odom)
    odom = _dead_reckon(gt_pairs[0][1], deltas)

    mapper = Mapper(cfg.mapping, cfg.icp)
    stream = observation_stream(world, gt_pairs, cfg.noise, cfg.sim, cfg.ipm)
    for (stamp, _), pose_odom, feats in zip(gt_pairs, odom, stream):
        mapper.feed(stamp, pose_odom, feats)
    mapper.finalize()

    gmap = mapper.build_map()
    spots: list[ParkingSpot] = []
    if detect_parking:
        corners = cluster_corners(gmap.cloud)
        dets = detect_spots(corners, gmap.cloud)
        spots = anchor_spots(dets, Pose6.identity(), [])
        gmap = with_spots(gmap, spots)

    times = np.array([t for t, _ in gt_pairs])
    gt = Trajectory(times, [p for _, p in gt_pairs])
    est_times, est_poses = mapper.trajectory()
    est = Trajectory(est_times, est_poses)
    dead = Trajectory(times, odom)
    gap = float(np.linalg.norm(est_poses[-1].t - est_poses[0].t))
    return MappingResult(
        gmap=gmap, graph=mapper.graph, est=est, dead=dead, gt=gt,
        ate_est=ate(est, gt), ate_dead=ate(dead, gt), gap=gap,
        loop_edges=mapper.loop_edges_found, spots=spots,
        frames=len(gt_pairs), sim_seconds=float(times[-1] - times[0]),
    )


@dataclass
class LocalizationResult:
    est: Trajectory
    gt: Trajectory
    statuses: list[Status]
    recall: float                    # percent of frames Tracking
    loc_err: tuple[float, float]     # (mean, max) cm over Tracking frames
    ate_est: tuple[float, float]
    nees: float
    frames: int
    sim_seconds: float


def _second_drive_config(cfg: RunConfig) -> RunConfig:
    return dataclasses.replace(
        cfg,
        noise=dataclasses.replace(cfg.noise, seed=cfg.noise.seed + LOC_DRIVE_SEED_SHIFT),
        odom=dataclasses.replace(cfg.odom, seed=cfg.odom.seed + LOC_DRIVE_SEED_SHIFT),
    )


def run_localization(world: WorldModel, route: RouteSpec, gmap: GlobalMap,
                     cfg: RunConfig) -> LocalizationResult:
    """Drives the route again and relocalizes against the stored map."""
    cfg = _second_drive_config(cfg)
    gt_pairs = generate_trajectory(world, route)
    deltas = simulate_odometry(gt_pairs, cfg.odom)

    stream = observation_stream(world, gt_pairs, cfg.noise, cfg.sim, cfg.ipm)
    next(stream)   # frame 0 is the initialization pose; tracking starts at frame 1
    state = initialize(gmap, None, cfg.localizer)
    states = list(track(gmap, state, zip(deltas, stream), cfg.localizer, cfg.icp))

    times = np.array([t for t, _ in gt_pairs])
    gt = Trajectory(times, [p for _, p in gt_pairs])
    est = Trajectory(times[1:], [s.mean for s in states])
    tracking = [s.status == Status.TRACKING for s in states]
    rec = recall(tracking)
    err = localization_error(est, gt, tracking) if any(tracking) else (float("nan"),) * 2
    rmse, mx = ate(est, gt)
    return LocalizationResult(
        est=est, gt=gt, statuses=[s.status for s in states], recall=rec,
        loc_err=err, ate_est=(rmse, mx), nees=nees(rmse, gt.length()),
        frames=len(states), sim_seconds=float(times[-1] - times[0]),
    )


def run_recall_study(world: WorldModel, route: RouteSpec, gmap: GlobalMap,
                     cfg: RunConfig, drops) -> list[dict]:
    """Re-runs localization across feature-dropout levels (parked-car analog)."""
    out = []
    for drop in drops:
        probe = dataclasses.replace(
            cfg, noise=dataclasses.replace(cfg.noise, p_drop=float(drop)))
        res = run_localization(world, route, gmap, probe)
        out.append({
            "p_drop": float(drop),
            "recall": res.recall,
            "loc_err_mean": res.loc_err[0],
            "loc_err_max": res.loc_err[1],
            "rmse": res.ate_est[0],
            "frames": res.frames,
        })
    return out
