"""Semantic classes, labeled point clouds, and the simulated segmenter.

The segmenter here is an oracle: instead of running a network on camera
images it rasterizes the known world geometry into the bird's-eye view
at a given vehicle pose, then corrupts the result with a configurable
noise model (whole-feature dropout, per-frame boundary jitter, and
per-cell label flips). The same rasterizer also powers the point-tier
observer, so both tiers agree about what is painted where.

Grid convention: a GridSpec places cell (row j, col i) at vehicle-frame
coordinates (origin_x + i * pitch, origin_y + j * pitch), x along
columns. Bird's-eye images follow the IPM intrinsics; the point tier
uses a coarser grid anchored at the vehicle origin.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple, Protocol

import numpy as np
from scipy import ndimage

from .camera import IpmIntrinsics, LabelImage, ipm_to_vehicle
from .config import NoiseSpec
from .geometry import Pose6, rotvec_to_matrix, transform_point
from .world import CORNER_RADIUS, WorldModel


class SemanticClass(IntEnum):
    UNKNOWN = 0
    FREE_SPACE = 1
    LANE = 2
    PARKING_LINE = 3
    GUIDE_SIGN = 4
    SPEED_BUMP = 5
    OBSTACLE = 6
    WALL = 7
    PARKING_CORNER = 8


# classes stable enough to localize against; everything else only carries its label
LOCALIZATION_CLASSES = frozenset({
    SemanticClass.PARKING_LINE,
    SemanticClass.GUIDE_SIGN,
    SemanticClass.SPEED_BUMP,
})

FEATURE_CLASSES = frozenset(LOCALIZATION_CLASSES | {SemanticClass.PARKING_CORNER})

VEHICLE_FRAME = "vehicle"
LOCAL_FRAME = "local"
WORLD_FRAME = "world"


class LabeledPoint(NamedTuple):
    position: np.ndarray
    label: SemanticClass


@dataclass
class PointCloud:
    """Struct-of-arrays cloud of labeled points with a frame tag."""

    positions: np.ndarray   # (N, 3) float64
    labels: np.ndarray      # (N,) uint8 class codes
    frame: str = VEHICLE_FRAME

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.labels = np.asarray(self.labels).astype(np.uint8).reshape(-1)
        if self.positions.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.positions.shape[0]} positions but {self.labels.shape[0]} labels")
        if self.positions.size and not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite point coordinates")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def points(self):
        for pos, lab in zip(self.positions, self.labels):
            yield LabeledPoint(pos, SemanticClass(int(lab)))

    def select(self, mask: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions[mask], self.labels[mask], self.frame)

    def transformed(self, pose: Pose6, frame: str | None = None) -> "PointCloud":
        return PointCloud(transform_point(pose, self.positions), self.labels.copy(),
                          frame if frame is not None else self.frame)

    def count_of(self, classes) -> int:
        codes = np.array([int(c) for c in classes], dtype=np.uint8)
        return int(np.isin(self.labels, codes).sum())

    @staticmethod
    def empty(frame: str = VEHICLE_FRAME) -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.uint8), frame)

    @staticmethod
    def concat(clouds: list["PointCloud"], frame: str) -> "PointCloud":
        if not clouds:
            return PointCloud.empty(frame)
        return PointCloud(
            np.concatenate([c.positions for c in clouds], axis=0),
            np.concatenate([c.labels for c in clouds], axis=0),
            frame,
        )


class Segmenter(Protocol):
    """Anything that labels the bird's-eye view at a vehicle pose."""

    def segment(self, pose: Pose6, frame_index: int) -> LabelImage: ...


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float]   # vehicle-frame coords of cell (0, 0)
    pitch: float
    shape: tuple[int, int]        # (rows, cols)

    @staticmethod
    def from_ipm(ipm: IpmIntrinsics) -> "GridSpec":
        w, h = ipm.size
        ox, oy = ipm_to_vehicle(ipm, np.zeros(2))
        return GridSpec(origin=(float(ox), float(oy)), pitch=1.0 / ipm.scale, shape=(h, w))

    @staticmethod
    def centered(half_extent: float, pitch: float) -> "GridSpec":
        n = int(round(half_extent / pitch))
        return GridSpec(origin=(-n * pitch, -n * pitch), pitch=pitch,
                        shape=(2 * n + 1, 2 * n + 1))


def _index_range(origin: float, pitch: float, count: int, lo: float, hi: float):
    i0 = int(np.ceil((lo - origin) / pitch - 1e-9))
    i1 = int(np.floor((hi - origin) / pitch + 1e-9))
    return max(i0, 0), min(i1, count - 1)


def _subgrid(grid: GridSpec, lo: np.ndarray, hi: np.ndarray):
    ny, nx = grid.shape
    i0, i1 = _index_range(grid.origin[0], grid.pitch, nx, lo[0], hi[0])
    j0, j1 = _index_range(grid.origin[1], grid.pitch, ny, lo[1], hi[1])
    if i0 > i1 or j0 > j1:
        return None
    xs = grid.origin[0] + np.arange(i0, i1 + 1) * grid.pitch
    ys = grid.origin[1] + np.arange(j0, j1 + 1) * grid.pitch
    return i0, i1, j0, j1, xs[None, :], ys[:, None]


def _paint_stripe(labels, grid, p0, p1, half_width, code) -> None:
    lo = np.minimum(p0, p1) - half_width
    hi = np.maximum(p0, p1) + half_width
    sub = _subgrid(grid, lo, hi)
    if sub is None:
        return
    i0, i1, j0, j1, xs, ys = sub
    d = p1 - p0
    l2 = float(d @ d)
    if l2 < 1e-18:
        dist2 = (xs - p0[0]) ** 2 + (ys - p0[1]) ** 2
    else:
        tpar = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / l2, 0.0, 1.0)
        dist2 = (xs - (p0[0] + tpar * d[0])) ** 2 + (ys - (p0[1] + tpar * d[1])) ** 2
    mask = dist2 <= half_width * half_width
    labels[j0:j1 + 1, i0:i1 + 1][mask] = code


def _paint_disc(labels, grid, center, radius, code) -> None:
    sub = _subgrid(grid, center - radius, center + radius)
    if sub is None:
        return
    i0, i1, j0, j1, xs, ys = sub
    mask = (xs - center[0]) ** 2 + (ys - center[1]) ** 2 <= radius * radius
    labels[j0:j1 + 1, i0:i1 + 1][mask] = code


def _paint_polygon(labels, grid, verts, code) -> None:
    sub = _subgrid(grid, verts.min(axis=0), verts.max(axis=0))
    if sub is None:
        return
    i0, i1, j0, j1, xs, ys = sub
    inside = np.zeros((ys.shape[0], xs.shape[1]), dtype=bool)
    n = verts.shape[0]
    for k in range(n):           # even-odd crossing test
        ax, ay = verts[k]
        bx, by = verts[(k + 1) % n]
        if ay == by:
            continue
        cond = (ay > ys) != (by > ys)
        xcross = (bx - ax) * (ys - ay) / (by - ay) + ax
        inside ^= cond & (xs < xcross)
    labels[j0:j1 + 1, i0:i1 + 1][inside] = code


def _world_to_vehicle_2d(pose: Pose6, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    p3 = np.concatenate([pts, np.zeros((pts.shape[0], 1))], axis=1)
    rot = rotvec_to_matrix(pose.r)
    return ((p3 - pose.t) @ rot)[:, :2]


def rasterize_world(
    world: WorldModel,
    pose: Pose6,
    grid: GridSpec,
    noise: NoiseSpec | None = None,
    frame_index: int = 0,
    px_per_m: float = 50.0,
) -> np.ndarray:
    """Paints the world into a vehicle-frame label grid at a pose.

    With ``noise`` set, whole features drop out with p_drop, every
    feature shifts by up to jitter_px (converted via px_per_m) per
    frame, and cells flip to a random other class with p_flip. All
    draws come from (noise.seed, frame_index), so a frame's labels are
    a pure function of its inputs.
    """
    labels = np.full(grid.shape, int(SemanticClass.FREE_SPACE), dtype=np.uint8)
    rng = None
    jitter_m = 0.0
    if noise is not None:
        rng = np.random.default_rng([int(noise.seed) & 0x7FFFFFFF, int(frame_index)])
        jitter_m = noise.jitter_px / px_per_m

    # bounding disc of the grid in world coordinates; entities whose own
    # bounding disc stays clear of it cannot paint anything and are
    # skipped before any per-entity work (or noise draw) happens
    ny, nx = grid.shape
    half = np.array([(nx - 1) * grid.pitch, (ny - 1) * grid.pitch]) / 2.0
    center_v = np.array([grid.origin[0], grid.origin[1]]) + half
    rot = rotvec_to_matrix(pose.r)
    center_w = (rot[:2, :2] @ center_v) + pose.t[:2]
    reach = float(np.linalg.norm(half)) + jitter_m + 1e-9

    def near_polys(polys):
        if not polys:
            return []
        centers = np.array([p.vertices.mean(axis=0) for p in polys])
        radii = np.array([np.linalg.norm(p.vertices - c, axis=1).max()
                          for p, c in zip(polys, centers)])
        keep = np.linalg.norm(centers - center_w, axis=1) <= radii + reach
        return [p for p, k in zip(polys, keep) if k]

    def near_lines(lines):
        if not lines:
            return []
        p0 = np.array([l.p0 for l in lines])
        p1 = np.array([l.p1 for l in lines])
        centers = (p0 + p1) / 2.0
        radii = (np.linalg.norm(p1 - p0, axis=1)
                 + np.array([l.width for l in lines])) / 2.0
        keep = np.linalg.norm(centers - center_w, axis=1) <= radii + reach
        return [l for l, k in zip(lines, keep) if k]

    def offset() -> np.ndarray:
        if rng is None:
            return np.zeros(2)
        return rng.uniform(-jitter_m, jitter_m, 2)

    def dropped() -> bool:
        if rng is None:
            return False
        return bool(rng.random() < noise.p_drop)

    # ascending paint priority; later entries overwrite earlier ones
    for poly in near_polys(world.walls):
        skip, off = dropped(), offset()
        if skip:
            continue
        _paint_polygon(labels, grid, _world_to_vehicle_2d(pose, poly.vertices) + off,
                       SemanticClass.WALL)
    for poly in near_polys(world.obstacles):
        skip, off = dropped(), offset()
        if skip:
            continue
        _paint_polygon(labels, grid, _world_to_vehicle_2d(pose, poly.vertices) + off,
                       SemanticClass.OBSTACLE)
    for cls, lines in ((SemanticClass.LANE, world.lanes),
                       (SemanticClass.PARKING_LINE, world.parking_lines),
                       (SemanticClass.SPEED_BUMP, world.speed_bumps)):
        for line in near_lines(lines):
            skip, off = dropped(), offset()
            if skip:
                continue
            ends = _world_to_vehicle_2d(pose, np.stack([line.p0, line.p1])) + off
            _paint_stripe(labels, grid, ends[0], ends[1], line.width / 2.0, cls)
    for poly in near_polys(world.guide_signs):
        skip, off = dropped(), offset()
        if skip:
            continue
        _paint_polygon(labels, grid, _world_to_vehicle_2d(pose, poly.vertices) + off,
                       SemanticClass.GUIDE_SIGN)
    if world.corners.size:
        near = np.linalg.norm(world.corners - center_w, axis=1) <= CORNER_RADIUS + reach
        centers = _world_to_vehicle_2d(pose, world.corners[near])
        for c in centers:
            skip, off = dropped(), offset()
            if skip:
                continue
            _paint_disc(labels, grid, c + off, CORNER_RADIUS, SemanticClass.PARKING_CORNER)

    if rng is not None and noise.p_flip > 0.0:
        flip = rng.random(labels.shape) < noise.p_flip
        # uniform over the 7 real classes other than the current one
        base = rng.integers(1, len(SemanticClass) - 1, size=labels.shape, dtype=np.uint8)
        flipped = base + (base >= labels).astype(np.uint8)
        labels[flip] = flipped[flip]
    return labels


def oracle_segment(
    world: WorldModel,
    pose: Pose6,
    ipm: IpmIntrinsics,
    noise: NoiseSpec | None = None,
    frame_index: int = 0,
) -> LabelImage:
    """Ground-truth bird's-eye segmentation with simulated noise."""
    grid = GridSpec.from_ipm(ipm)
    return LabelImage(rasterize_world(world, pose, grid, noise, frame_index,
                                      px_per_m=ipm.scale))


_FEATURE_LUT = np.zeros(256, dtype=bool)
for _c in FEATURE_CLASSES:
    _FEATURE_LUT[int(_c)] = True


def extract_features(img: LabelImage, ipm: IpmIntrinsics, stride: int = 4) -> PointCloud:
    """Turns localization-class pixels into a vehicle-frame cloud.

    Samples the image on a stride-by-stride lattice anchored at pixel
    (0, 0); lattice pixels whose class localizes (or marks a spot
    corner) become points on the ground plane.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    lab = img.labels[::stride, ::stride]
    keep = _FEATURE_LUT[lab]
    js, is_ = np.nonzero(keep)
    uv = np.stack([is_ * stride, js * stride], axis=1).astype(float)
    xy = ipm_to_vehicle(ipm, uv)
    positions = np.concatenate([xy, np.zeros((xy.shape[0], 1))], axis=1)
    return PointCloud(positions, lab[js, is_], VEHICLE_FRAME)


def grid_to_cloud(labels: np.ndarray, grid: GridSpec, classes=FEATURE_CLASSES) -> PointCloud:
    """Feature cloud straight from a label grid (point-tier path)."""
    lut = np.zeros(256, dtype=bool)
    for c in classes:
        lut[int(c)] = True
    js, is_ = np.nonzero(lut[labels])
    xy = np.stack([grid.origin[0] + is_ * grid.pitch,
                   grid.origin[1] + js * grid.pitch], axis=1)
    positions = np.concatenate([xy, np.zeros((xy.shape[0], 1))], axis=1)
    return PointCloud(positions, labels[js, is_], VEHICLE_FRAME)


def detect_corners(img: LabelImage, ipm: IpmIntrinsics) -> np.ndarray:
    """Centroids of connected corner-mark blobs, in vehicle meters.

    Returns an (M, 2) array ordered by x, then y.
    """
    mask = img.labels == int(SemanticClass.PARKING_CORNER)
    if not mask.any():
        return np.zeros((0, 2))
    comp, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    centroids_vu = ndimage.center_of_mass(mask, comp, index=np.arange(1, n + 1))
    uv = np.array([(c[1], c[0]) for c in centroids_vu], dtype=float)
    xy = ipm_to_vehicle(ipm, uv)
    order = np.lexsort((xy[:, 1], xy[:, 0]))
    return xy[order]


def voxel_downsample(positions: np.ndarray, labels: np.ndarray, voxel: float):
    """One centroid per (class, voxel cell); order is (class, cell) sorted."""
    if voxel <= 0:
        raise ValueError(f"voxel must be positive, got {voxel}")
    if positions.shape[0] == 0:
        return positions.copy(), labels.copy()
    cells = np.floor(positions / voxel).astype(np.int64)
    order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0], labels))
    cs = cells[order]
    ls = labels[order]
    ps = positions[order]
    boundary = np.ones(len(ls), dtype=bool)
    boundary[1:] = (np.diff(ls.astype(np.int64)) != 0) | np.any(np.diff(cs, axis=0) != 0, axis=1)
    starts = np.flatnonzero(boundary)
    counts = np.diff(np.append(starts, len(ls)))
    sums = np.add.reduceat(ps, starts, axis=0)
    return sums / counts[:, None], ls[starts]
