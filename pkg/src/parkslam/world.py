"""Synthetic parking-lot world model and its generator.

A world is a flat (z = 0) arrangement of painted ground features: spot
rows (baseline plus separator lines with corner markings), lane lines,
guide signs, speed bumps, plus walls and pillar obstacles that only
carry their labels. Everything is deterministic in (spec, seed).

Generated layouts place a rectangular driving loop inside the extent
and flank each corridor with rows of parking spots; guide signs and
speed bumps are scattered along the corridors at seeded, slightly
irregular intervals so no two stretches of the lot look alike.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose6, planar_pose

CORNER_RADIUS = 0.15   # painted corner marks are discs of this radius, m


class WorldSpecError(ValueError):
    """Raised for inconsistent or out-of-extent world specs."""


@dataclass(frozen=True)
class LineFeature:
    """Painted stripe: segment from p0 to p1 with a total width."""

    p0: np.ndarray
    p1: np.ndarray
    width: float

    def __post_init__(self) -> None:
        for name in ("p0", "p1"):
            v = np.array(getattr(self, name), dtype=float).reshape(2)
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if self.width <= 0:
            raise WorldSpecError(f"line width must be positive, got {self.width}")


@dataclass(frozen=True)
class PolygonFeature:
    """Filled painted polygon (or wall/obstacle footprint)."""

    vertices: np.ndarray   # (K, 2)

    def __post_init__(self) -> None:
        v = np.array(self.vertices, dtype=float).reshape(-1, 2)
        if v.shape[0] < 3:
            raise WorldSpecError(f"polygon needs at least 3 vertices, got {v.shape[0]}")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)


@dataclass
class WorldModel:
    extent: tuple[float, float]
    entrance: Pose6
    parking_lines: list[LineFeature] = field(default_factory=list)
    lanes: list[LineFeature] = field(default_factory=list)
    speed_bumps: list[LineFeature] = field(default_factory=list)
    guide_signs: list[PolygonFeature] = field(default_factory=list)
    walls: list[PolygonFeature] = field(default_factory=list)
    obstacles: list[PolygonFeature] = field(default_factory=list)
    corners: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    spots: np.ndarray = field(default_factory=lambda: np.zeros((0, 4, 2)))
    layout: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.extent = (float(self.extent[0]), float(self.extent[1]))
        self.corners = np.asarray(self.corners, dtype=float).reshape(-1, 2)
        self.spots = np.asarray(self.spots, dtype=float).reshape(-1, 4, 2)


DEFAULT_SPEC = {
    "preset": "lot",
    "extent": [100.0, 60.0],
    "spot_width": 2.5,
    "spot_depth": 5.3,
    "line_width": 0.15,
    "lane_width": 0.12,
    "row_offset": 3.0,     # row baseline distance from the corridor centerline
    "row_inset": 9.0,      # corridor length kept clear of rows at each end
    "sign_spacing": 17.0,
    "bump_spacing": 23.0,
    "route_margin_x": 10.0,
    "route_margin_y": 15.0,
    "loop_length": 324.0,  # square preset only
    "turn_radius": 3.0,
    "n_pillars": 6,
}


def _corridors(rect: tuple[float, float, float, float]) -> list[tuple[np.ndarray, np.ndarray]]:
    x0, y0, x1, y1 = rect
    return [
        (np.array([x0, y0]), np.array([x1, y0])),
        (np.array([x1, y0]), np.array([x1, y1])),
        (np.array([x1, y1]), np.array([x0, y1])),
        (np.array([x0, y1]), np.array([x0, y0])),
    ]


def _inside(lo: float, hi: float, *values: float) -> bool:
    return all(lo <= v <= hi for v in values)


def generate_world(spec: dict | str | Path | None = None, seed: int | None = None) -> WorldModel:
    """Builds a deterministic lot from a spec dict/file and a seed."""
    if isinstance(spec, (str, Path)):
        spec = json.loads(Path(spec).read_text())
    spec = dict(spec or {})
    unknown = set(spec) - set(DEFAULT_SPEC) - {"seed"}
    if unknown:
        raise WorldSpecError(f"unknown world spec keys: {sorted(unknown)}")
    cfg = {**DEFAULT_SPEC, **spec}
    if seed is None:
        seed = int(cfg.get("seed", 0))
    rng = np.random.default_rng(seed)

    width, height = float(cfg["extent"][0]), float(cfg["extent"][1])
    if width <= 0 or height <= 0:
        raise WorldSpecError(f"bad extent {cfg['extent']}")
    turn_radius = float(cfg["turn_radius"])

    if cfg["preset"] == "square":
        # straight sections plus four quarter arcs add up to loop_length
        side = (float(cfg["loop_length"]) + turn_radius * (8.0 - 2.0 * np.pi)) / 4.0
        if side + 2.0 > min(width, height):
            raise WorldSpecError(
                f"loop of side {side:.1f} m does not fit extent {cfg['extent']}")
        mx = (width - side) / 2.0
        my = (height - side) / 2.0
        rect = (mx, my, width - mx, height - my)
    elif cfg["preset"] == "lot":
        mx, my = float(cfg["route_margin_x"]), float(cfg["route_margin_y"])
        rect = (mx, my, width - mx, height - my)
        if rect[2] - rect[0] < 20 or rect[3] - rect[1] < 10:
            raise WorldSpecError(f"extent {cfg['extent']} too small for the lot preset")
    else:
        raise WorldSpecError(f"unknown preset {cfg['preset']!r}")

    spot_w = float(cfg["spot_width"])
    spot_d = float(cfg["spot_depth"])
    line_w = float(cfg["line_width"])
    row_off = float(cfg["row_offset"])
    inset = float(cfg["row_inset"])

    world = WorldModel(
        extent=(width, height),
        entrance=planar_pose(rect[0], rect[1], 0.0),
        layout={"preset": cfg["preset"], "route_rect": list(rect), "turn_radius": turn_radius},
    )

    corners: list[np.ndarray] = []
    spots: list[np.ndarray] = []

    def add_row(anchor: np.ndarray, along: np.ndarray, normal: np.ndarray, span: float) -> None:
        """One row of spots: baseline, separators, corner marks."""
        n = int(np.floor(span / spot_w))
        if n < 1:
            return
        used = n * spot_w
        start = anchor + along * (span - used) / 2.0
        far = start + normal * spot_d
        lo_x = min(start[0], far[0], (start + along * used)[0], (far + along * used)[0])
        hi_x = max(start[0], far[0], (start + along * used)[0], (far + along * used)[0])
        lo_y = min(start[1], far[1], (start + along * used)[1], (far + along * used)[1])
        hi_y = max(start[1], far[1], (start + along * used)[1], (far + along * used)[1])
        if not (_inside(0.5, width - 0.5, lo_x, hi_x) and _inside(0.5, height - 0.5, lo_y, hi_y)):
            return
        world.parking_lines.append(LineFeature(start, start + along * used, line_w))
        for k in range(n + 1):
            c = start + along * (k * spot_w)
            world.parking_lines.append(LineFeature(c, c + normal * spot_d, line_w))
            corners.append(c)
        for k in range(n):
            c0 = start + along * (k * spot_w)
            c1 = start + along * ((k + 1) * spot_w)
            spots.append(np.stack([c0, c1, c1 + normal * spot_d, c0 + normal * spot_d]))

    for a, b in _corridors(rect):
        length = float(np.linalg.norm(b - a))
        along = (b - a) / length
        normal = np.array([-along[1], along[0]])   # left of travel
        for side in (1.0, -1.0):
            anchor = a + along * inset + normal * (side * row_off)
            add_row(anchor, along, normal * side, length - 2.0 * inset)

    for a, b in _corridors(rect):
        length = float(np.linalg.norm(b - a))
        along = (b - a) / length
        normal = np.array([-along[1], along[0]])
        # lane edge lines carry the Lane class but are not used to localize
        for side in (1.0, -1.0):
            p0 = a + along * 2.0 + normal * (side * (row_off - 0.3))
            p1 = b - along * 2.0 + normal * (side * (row_off - 0.3))
            world.lanes.append(LineFeature(p0, p1, float(cfg["lane_width"])))
        s = 6.0
        while s < length - 6.0:
            pos = a + along * (s + float(rng.uniform(-2.0, 2.0)))
            r = 0.55
            world.guide_signs.append(PolygonFeature(np.array([
                pos + [r, 0.0], pos + [0.0, r], pos - [r, 0.0], pos - [0.0, r]])))
            s += float(cfg["sign_spacing"])
        s = 12.0
        while s < length - 12.0:
            pos = a + along * (s + float(rng.uniform(-2.0, 2.0)))
            world.speed_bumps.append(LineFeature(pos - normal * 2.6, pos + normal * 2.6, 0.4))
            s += float(cfg["bump_spacing"])

    t = 0.3  # wall thickness
    world.walls = [
        PolygonFeature(np.array([[0, 0], [width, 0], [width, t], [0, t]])),
        PolygonFeature(np.array([[0, height - t], [width, height - t], [width, height], [0, height]])),
        PolygonFeature(np.array([[0, 0], [t, 0], [t, height], [0, height]])),
        PolygonFeature(np.array([[width - t, 0], [width, 0], [width, height], [width - t, height]])),
    ]

    cx0, cy0, cx1, cy1 = rect
    pad = row_off + spot_d + 1.0
    px0, px1 = cx0 + pad, cx1 - pad
    py0, py1 = cy0 + pad, cy1 - pad
    if px1 > px0 + 1.0 and py1 > py0 + 1.0:
        for _ in range(int(cfg["n_pillars"])):
            cx = float(rng.uniform(px0, px1))
            cy = float(rng.uniform(py0, py1))
            world.obstacles.append(PolygonFeature(np.array([
                [cx - 0.25, cy - 0.25], [cx + 0.25, cy - 0.25],
                [cx + 0.25, cy + 0.25], [cx - 0.25, cy + 0.25]])))

    world.corners = np.array(corners).reshape(-1, 2)
    world.spots = np.array(spots).reshape(-1, 4, 2)
    _check_extent(world)
    return world


def _check_extent(world: WorldModel) -> None:
    width, height = world.extent
    pts = [world.corners.reshape(-1, 2)]
    for line in world.parking_lines + world.lanes + world.speed_bumps:
        pts.append(np.stack([line.p0, line.p1]))
    for poly in world.guide_signs + world.walls + world.obstacles:
        pts.append(poly.vertices)
    if not pts:
        return
    allp = np.concatenate([p for p in pts if p.size], axis=0)
    if allp.size == 0:
        return
    if (allp[:, 0].min() < -1e-9 or allp[:, 0].max() > width + 1e-9
            or allp[:, 1].min() < -1e-9 or allp[:, 1].max() > height + 1e-9):
        raise WorldSpecError("generated geometry escapes the extent")


# -- JSON round trip ---------------------------------------------------------

def _line_doc(line: LineFeature) -> dict:
    return {"p0": line.p0.tolist(), "p1": line.p1.tolist(), "width": line.width}


def world_to_json(world: WorldModel) -> dict:
    return {
        "extent": list(world.extent),
        "entrance": {"rotvec": world.entrance.r.tolist(),
                     "translation": world.entrance.t.tolist()},
        "parking_lines": [_line_doc(l) for l in world.parking_lines],
        "lanes": [_line_doc(l) for l in world.lanes],
        "speed_bumps": [_line_doc(l) for l in world.speed_bumps],
        "guide_signs": [{"polygon": p.vertices.tolist()} for p in world.guide_signs],
        "walls": [{"polygon": p.vertices.tolist()} for p in world.walls],
        "obstacles": [{"polygon": p.vertices.tolist()} for p in world.obstacles],
        "corners": world.corners.tolist(),
        "spots": world.spots.tolist(),
        "layout": world.layout,
    }


def world_from_json(doc: dict) -> WorldModel:
    ent = doc["entrance"]
    return WorldModel(
        extent=tuple(doc["extent"]),
        entrance=Pose6(np.array(ent["rotvec"]), np.array(ent["translation"])),
        parking_lines=[LineFeature(np.array(l["p0"]), np.array(l["p1"]), l["width"])
                       for l in doc.get("parking_lines", [])],
        lanes=[LineFeature(np.array(l["p0"]), np.array(l["p1"]), l["width"])
               for l in doc.get("lanes", [])],
        speed_bumps=[LineFeature(np.array(l["p0"]), np.array(l["p1"]), l["width"])
                     for l in doc.get("speed_bumps", [])],
        guide_signs=[PolygonFeature(np.array(p["polygon"])) for p in doc.get("guide_signs", [])],
        walls=[PolygonFeature(np.array(p["polygon"])) for p in doc.get("walls", [])],
        obstacles=[PolygonFeature(np.array(p["polygon"])) for p in doc.get("obstacles", [])],
        corners=np.array(doc.get("corners", [])).reshape(-1, 2),
        spots=np.array(doc.get("spots", [])).reshape(-1, 4, 2),
        layout=dict(doc.get("layout", {})),
    )


def save_world(world: WorldModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(world_to_json(world), indent=1, sort_keys=True))


def load_world(path: str | Path) -> WorldModel:
    return world_from_json(json.loads(Path(path).read_text()))
