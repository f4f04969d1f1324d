"""Trajectory generation, odometry corruption, and frame observation.

The simulator stands in for the vehicle: ground-truth poses follow a
waypoint route whose corners are rounded with fixed-radius arcs, wheel
odometry is the true per-frame delta corrupted by multiplicative
translation noise plus a yaw random walk and bias, and each frame's
"segmentation" comes from rasterizing the known world around the true
pose. Everything is a pure function of (world, route, config, seeds).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import IpmIntrinsics, LabelImage
from .config import NoiseSpec, OdomNoise, SimConfig
from .geometry import Pose6, planar_pose, relative
from .semantics import (GridSpec, PointCloud, grid_to_cloud, oracle_segment,
                        rasterize_world)
from .world import WorldModel


class InfeasibleRouteError(ValueError):
    pass


@dataclass(frozen=True)
class RouteSpec:
    waypoints: np.ndarray        # (K, 2) world coordinates
    closed: bool = True
    speed: float = 2.0           # m/s
    rate_hz: float = 15.0
    turn_radius: float = 3.0

    def __post_init__(self) -> None:
        wp = np.asarray(self.waypoints, dtype=float).reshape(-1, 2)
        if wp.shape[0] < 2:
            raise InfeasibleRouteError(f"route needs >= 2 waypoints, got {wp.shape[0]}")
        wp.setflags(write=False)
        object.__setattr__(self, "waypoints", wp)
        if self.speed <= 0 or self.rate_hz <= 0 or self.turn_radius < 0:
            raise InfeasibleRouteError("speed/rate must be positive, radius nonnegative")


def rect_route(rect, cfg: SimConfig | None = None) -> RouteSpec:
    x0, y0, x1, y1 = (float(v) for v in rect)
    cfg = cfg or SimConfig()
    return RouteSpec(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]),
                     closed=True, speed=cfg.speed, rate_hz=cfg.rate_hz,
                     turn_radius=cfg.turn_radius)


def default_route(world: WorldModel, cfg: SimConfig | None = None) -> RouteSpec:
    """The loop the world generator laid its corridors around."""
    rect = world.layout.get("route_rect")
    if rect is None:
        raise InfeasibleRouteError("world carries no route_rect layout hint")
    cfg = cfg or SimConfig()
    radius = float(world.layout.get("turn_radius", cfg.turn_radius))
    route = rect_route(rect, cfg)
    return RouteSpec(route.waypoints, True, cfg.speed, cfg.rate_hz, radius)


def route_from_json(doc: dict | str | Path, cfg: SimConfig | None = None) -> RouteSpec:
    if isinstance(doc, (str, Path)):
        doc = json.loads(Path(doc).read_text())
    cfg = cfg or SimConfig()
    known = {"waypoints", "rect", "closed", "speed", "rate_hz", "turn_radius"}
    unknown = set(doc) - known
    if unknown:
        raise InfeasibleRouteError(f"unknown route keys: {sorted(unknown)}")
    if ("waypoints" in doc) == ("rect" in doc):
        raise InfeasibleRouteError("route needs exactly one of 'waypoints' or 'rect'")
    if "rect" in doc:
        wp = rect_route(doc["rect"]).waypoints
    else:
        wp = np.asarray(doc["waypoints"], dtype=float)
    return RouteSpec(wp,
                     closed=bool(doc.get("closed", True)),
                     speed=float(doc.get("speed", cfg.speed)),
                     rate_hz=float(doc.get("rate_hz", cfg.rate_hz)),
                     turn_radius=float(doc.get("turn_radius", cfg.turn_radius)))


class _Piece:
    __slots__ = ("kind", "length", "p0", "dir", "center", "radius", "a0", "sweep")

    def __init__(self, **kw):
        for k in self.__slots__:
            setattr(self, k, kw.get(k))


def _fillet(prev: np.ndarray, v: np.ndarray, nxt: np.ndarray, radius: float):
    d_in = v - prev
    d_out = nxt - v
    l_in = float(np.linalg.norm(d_in))
    l_out = float(np.linalg.norm(d_out))
    if l_in < 1e-12 or l_out < 1e-12:
        raise InfeasibleRouteError(f"degenerate route leg at waypoint {v}")
    d_in /= l_in
    d_out /= l_out
    cross = float(d_in[0] * d_out[1] - d_in[1] * d_out[0])
    dot = float(np.clip(d_in @ d_out, -1.0, 1.0))
    phi = float(np.arccos(dot))
    if radius == 0.0 or phi < 1e-12:
        return v, v, None
    if abs(np.pi - phi) < 1e-9:
        raise InfeasibleRouteError(f"route reverses direction at waypoint {v}")
    tan_len = radius * np.tan(phi / 2.0)
    if tan_len > l_in / 2.0 + 1e-9 or tan_len > l_out / 2.0 + 1e-9:
        raise InfeasibleRouteError(
            f"turn radius {radius} m does not fit legs of {l_in:.2f}/{l_out:.2f} m "
            f"at waypoint {v}")
    entry = v - d_in * tan_len
    exits = v + d_out * tan_len
    side = 1.0 if cross > 0 else -1.0
    normal_in = np.array([-d_in[1], d_in[0]]) * side
    center = entry + normal_in * radius
    a0 = float(np.arctan2(entry[1] - center[1], entry[0] - center[0]))
    sweep = side * phi
    arc = _Piece(kind="arc", length=radius * phi, center=center,
                 radius=radius, a0=a0, sweep=sweep)
    return entry, exits, arc


def _build_path(route: RouteSpec) -> list[_Piece]:
    wp = route.waypoints
    k = wp.shape[0]
    radius = route.turn_radius
    pieces: list[_Piece] = []
    if route.closed:
        entries = []
        exits = []
        arcs = []
        for i in range(k):
            prev, v, nxt = wp[i - 1], wp[i], wp[(i + 1) % k]
            e, x, arc = _fillet(prev, v, nxt, radius)
            entries.append(e)
            exits.append(x)
            arcs.append(arc)
        # path starts at vertex 0's exit and closes through vertex 0's arc
        for i in range(k):
            j = (i + 1) % k
            seg = entries[j] - exits[i]
            ln = float(np.linalg.norm(seg))
            if ln > 1e-12:
                pieces.append(_Piece(kind="line", length=ln, p0=exits[i], dir=seg / ln))
            if arcs[j] is not None:
                pieces.append(arcs[j])
    else:
        entries = [wp[0]] + [None] * (k - 2) + [wp[-1]]
        exits = [wp[0]] + [None] * (k - 2) + [wp[-1]]
        arcs = [None] * k
        for i in range(1, k - 1):
            e, x, arc = _fillet(wp[i - 1], wp[i], wp[i + 1], radius)
            entries[i], exits[i], arcs[i] = e, x, arc
        for i in range(k - 1):
            seg = entries[i + 1] - exits[i]
            ln = float(np.linalg.norm(seg))
            if ln > 1e-12:
                pieces.append(_Piece(kind="line", length=ln, p0=exits[i], dir=seg / ln))
            if i + 1 < k - 1 and arcs[i + 1] is not None:
                pieces.append(arcs[i + 1])
    if not pieces:
        raise InfeasibleRouteError("route collapsed to a point")
    return pieces


def _pose_on(piece: _Piece, s: float) -> Pose6:
    if piece.kind == "line":
        p = piece.p0 + piece.dir * s
        yaw = float(np.arctan2(piece.dir[1], piece.dir[0]))
    else:
        ang = piece.a0 + np.sign(piece.sweep) * s / piece.radius
        p = piece.center + piece.radius * np.array([np.cos(ang), np.sin(ang)])
        yaw = float(ang + np.sign(piece.sweep) * np.pi / 2.0)
    return planar_pose(float(p[0]), float(p[1]), yaw)


def route_length(route: RouteSpec) -> float:
    return float(sum(p.length for p in _build_path(route)))


def generate_trajectory(world: WorldModel, route: RouteSpec) -> list[tuple[float, Pose6]]:
    """Ground-truth poses along the route at the frame cadence.

    Returns (time, pose) pairs; heading is tangent to the path, z,
    roll, and pitch are zero. A closed route's final sample lands
    exactly back on the first one when the length divides the step.
    """
    w, h = world.extent
    wp = route.waypoints
    if (wp[:, 0].min() < 0 or wp[:, 0].max() > w
            or wp[:, 1].min() < 0 or wp[:, 1].max() > h):
        raise InfeasibleRouteError("route waypoints leave the world extent")
    pieces = _build_path(route)
    cum = np.concatenate([[0.0], np.cumsum([p.length for p in pieces])])
    total = float(cum[-1])
    ds = route.speed / route.rate_hz
    n = int(np.floor(total / ds + 1e-9))
    out = []
    for k in range(n + 1):
        s = min(k * ds, total)
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(pieces) - 1)
        out.append((k / route.rate_hz, _pose_on(pieces[i], s - cum[i])))
    return out


def simulate_odometry(gt: list[tuple[float, Pose6]],
                      noise: OdomNoise | None = None) -> list[Pose6]:
    """Per-frame odometry deltas, optionally corrupted.

    Translation picks up a multiplicative error per frame; yaw picks up
    a random walk scaled by distance travelled plus a constant-rate
    bias. Zero noise returns the exact ground-truth deltas.
    """
    noise = noise or OdomNoise(sigma_v=0.0, sigma_omega=0.0, bias_omega=0.0)
    rng = np.random.default_rng(int(noise.seed))
    out = []
    for (t0, p0), (t1, p1) in zip(gt[:-1], gt[1:]):
        true = relative(p0, p1)
        dist = float(np.linalg.norm(true.t))
        scale = 1.0 + rng.normal(0.0, noise.sigma_v)
        dyaw = rng.normal(0.0, noise.sigma_omega * dist) + noise.bias_omega * (t1 - t0)
        out.append(Pose6(true.r + np.array([0.0, 0.0, dyaw]), true.t * scale))
    return out


def observe(
    world: WorldModel,
    pose: Pose6,
    footprint: float = 10.0,
    noise: NoiseSpec | None = None,
    tier: str = "point",
    frame_index: int = 0,
    ipm: IpmIntrinsics | None = None,
    point_pitch: float = 0.1,
    jitter_scale: float = 50.0,
) -> PointCloud | LabelImage:
    """One frame of simulated segmentation around the true pose.

    The pixel tier returns the full bird's-eye label image; the point
    tier paints the same geometry onto a coarser vehicle-anchored grid
    and returns the localization-relevant cells as a cloud directly.
    jitter_scale keeps the metric magnitude of boundary jitter equal
    across tiers (pixels are defined at the bird's-eye resolution).
    """
    if tier == "pixel":
        return oracle_segment(world, pose, ipm or IpmIntrinsics(), noise, frame_index)
    if tier != "point":
        raise ValueError(f"unknown observation tier {tier!r}")
    grid = GridSpec.centered(footprint, point_pitch)
    labels = rasterize_world(world, pose, grid, noise, frame_index,
                             px_per_m=jitter_scale)
    return grid_to_cloud(labels, grid)


def observation_stream(world: WorldModel, gt: list[tuple[float, Pose6]],
                       noise: NoiseSpec | None, cfg: SimConfig | None = None,
                       ipm: IpmIntrinsics | None = None):
    """Generator of per-frame feature clouds for a whole trajectory."""
    from .semantics import extract_features
    cfg = cfg or SimConfig()
    scale = (ipm or IpmIntrinsics()).scale
    for k, (_, pose) in enumerate(gt):
        obs = observe(world, pose, cfg.footprint, noise, cfg.tier, k,
                      ipm=ipm, point_pitch=cfg.point_pitch, jitter_scale=scale)
        if cfg.tier == "pixel":
            yield extract_features(obs, ipm or IpmIntrinsics(), cfg.stride)
        else:
            yield obs
