"""Parking-spot detection from corner marks and painted-line evidence.

Corner pairs spaced roughly one spot width apart predict candidate
rectangles on both sides of the pair; a candidate survives only if
enough of its boundary runs along actually-observed parking-line
points. Rows are open at the back, so ~84% of a true spot's boundary
has line evidence (baseline plus two separators) while the phantom
rectangle extruded into the driving corridor scores ~16% and dies.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose6, transform_point
from .semantics import PointCloud, SemanticClass

OCC_UNKNOWN = 0
OCC_FREE = 1

DEFAULT_DIMS = (2.5, 5.3)     # spot width x depth, meters
COVERAGE_MIN = 0.6            # boundary fraction that must touch line evidence
EVIDENCE_TOL = 0.15           # line point counts as evidence within this, m
BOUNDARY_STEP = 0.1           # boundary sampling pitch, m
WIDTH_SLACK = 0.15            # corner pair distance tolerance, fraction of width
MERGE_RADIUS = 0.5            # anchor-time center merge distance, m


@dataclass
class ParkingSpot:
    id: int
    corners: np.ndarray                 # (4, 2) ordered around the quad
    occupied: int = OCC_UNKNOWN         # carried flag, never inferred here
    coverage: float = 0.0               # boundary evidence fraction at detection
    hits: int = 1                       # observations merged into this spot

    def __post_init__(self) -> None:
        self.corners = np.asarray(self.corners, dtype=float).reshape(4, 2)

    @property
    def center(self) -> np.ndarray:
        return self.corners.mean(axis=0)


def _line_positions(lines) -> np.ndarray:
    if isinstance(lines, PointCloud):
        sel = lines.labels == int(SemanticClass.PARKING_LINE)
        return lines.positions[sel][:, :2]
    return np.asarray(lines, dtype=float).reshape(-1, 2) if len(lines) else np.zeros((0, 2))


class _PlanarGrid:
    """Tiny 2D hash for is-there-a-point-within-tol queries."""

    def __init__(self, pts: np.ndarray, cell: float):
        self.cell = cell
        self.pts = pts
        keys = self._keys(pts)
        order = np.argsort(keys, kind="stable")
        self.keys = keys[order]
        self.sorted_pts = pts[order]

    def _keys(self, pts: np.ndarray) -> np.ndarray:
        c = np.floor(pts / self.cell).astype(np.int64) + (1 << 20)
        return (c[:, 0] << 21) | c[:, 1]

    def any_within(self, queries: np.ndarray, radius: float) -> np.ndarray:
        if self.pts.shape[0] == 0:
            return np.zeros(queries.shape[0], dtype=bool)
        rings = int(np.ceil(radius / self.cell))
        qc = np.floor(queries / self.cell).astype(np.int64) + (1 << 20)
        hit = np.zeros(queries.shape[0], dtype=bool)
        r2 = radius * radius
        for dx in range(-rings, rings + 1):
            for dy in range(-rings, rings + 1):
                k = ((qc[:, 0] + dx) << 21) | (qc[:, 1] + dy)
                lo = np.searchsorted(self.keys, k, side="left")
                hi = np.searchsorted(self.keys, k, side="right")
                todo = np.flatnonzero(~hit & (hi > lo))
                for q in todo:
                    d2 = np.sum((self.sorted_pts[lo[q]:hi[q]] - queries[q]) ** 2, axis=1)
                    if (d2 <= r2).any():
                        hit[q] = True
        return hit


def _boundary_samples(quad: np.ndarray, step: float) -> np.ndarray:
    chunks = []
    for k in range(4):
        a, b = quad[k], quad[(k + 1) % 4]
        n = max(int(np.ceil(np.linalg.norm(b - a) / step)), 1)
        t = np.arange(n) / n
        chunks.append(a + t[:, None] * (b - a))
    return np.concatenate(chunks, axis=0)


def detect_spots(
    corners,
    lines,
    dims: tuple[float, float] = DEFAULT_DIMS,
    coverage: float = COVERAGE_MIN,
    tol: float = EVIDENCE_TOL,
) -> list[ParkingSpot]:
    """Hypothesize-and-verify spots from corner points.

    corners: (M, 2) corner mark positions. lines: PointCloud (its
    ParkingLine points are used) or a raw (N, 2) array of line points.
    Every corner pair whose distance is within +-15% of dims[0] seeds
    two rectangles, one per side; rectangles keeping >= ``coverage`` of
    their sampled boundary within ``tol`` of line evidence survive, and
    overlapping survivors collapse to the best-covered one.
    """
    width, depth = float(dims[0]), float(dims[1])
    if width <= 0 or depth <= 0:
        raise ValueError(f"spot dims must be positive, got {dims}")
    pts = np.asarray(corners, dtype=float).reshape(-1, 2)
    evidence = _line_positions(lines)
    if pts.shape[0] < 2 or evidence.shape[0] == 0:
        return []
    grid = _PlanarGrid(evidence, cell=max(tol * 2.0, 0.2))

    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    ii, jj = np.nonzero(np.triu(np.abs(d - width) <= WIDTH_SLACK * width, k=1))

    accepted: list[tuple[float, np.ndarray]] = []
    for i, j in zip(ii, jj):
        c0, c1 = pts[i], pts[j]
        along = c1 - c0
        along = along / np.linalg.norm(along)
        normal = np.array([-along[1], along[0]])
        for side in (1.0, -1.0):
            quad = np.stack([c0, c1,
                             c1 + normal * (side * depth),
                             c0 + normal * (side * depth)])
            samples = _boundary_samples(quad, BOUNDARY_STEP)
            frac = float(grid.any_within(samples, tol).mean())
            if frac >= coverage:
                accepted.append((frac, quad))

    # overlapping hypotheses: keep the better-covered spot
    min_sep = 0.5 * min(width, depth)
    accepted.sort(key=lambda fq: (-fq[0], fq[1].mean(axis=0)[0], fq[1].mean(axis=0)[1]))
    kept: list[tuple[float, np.ndarray]] = []
    for frac, quad in accepted:
        center = quad.mean(axis=0)
        if all(np.linalg.norm(center - q.mean(axis=0)) >= min_sep for _, q in kept):
            kept.append((frac, quad))

    kept.sort(key=lambda fq: (fq[1].mean(axis=0)[0], fq[1].mean(axis=0)[1]))
    return [ParkingSpot(id=k, corners=quad, coverage=frac)
            for k, (frac, quad) in enumerate(kept)]


def cluster_corners(cloud: PointCloud | np.ndarray, radius: float = 0.45) -> np.ndarray:
    """Collapses corner-class points into one centroid per mark.

    Single-linkage components under the given radius; returns (M, 2)
    centroids sorted by x then y.
    """
    if isinstance(cloud, PointCloud):
        pts = cloud.positions[cloud.labels == int(SemanticClass.PARKING_CORNER)][:, :2]
    else:
        pts = np.asarray(cloud, dtype=float).reshape(-1, 2)
    n = pts.shape[0]
    if n == 0:
        return np.zeros((0, 2))
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    comp = np.full(n, -1, dtype=np.int64)
    r2 = radius * radius
    next_comp = 0
    for seed in range(n):
        if comp[seed] >= 0:
            continue
        stack = [seed]
        comp[seed] = next_comp
        while stack:
            k = stack.pop()
            d2 = np.sum((pts - pts[k]) ** 2, axis=1)
            hits = np.flatnonzero((d2 <= r2) & (comp < 0))
            comp[hits] = next_comp
            stack.extend(hits.tolist())
        next_comp += 1
    centroids = np.zeros((next_comp, 2))
    for c in range(next_comp):
        centroids[c] = pts[comp == c].mean(axis=0)
    return centroids[np.lexsort((centroids[:, 1], centroids[:, 0]))]


def anchor_spots(
    detected: list[ParkingSpot],
    pose: Pose6,
    existing: list[ParkingSpot] | None = None,
    merge_radius: float = MERGE_RADIUS,
) -> list[ParkingSpot]:
    """Moves vehicle-frame detections into the world and merges repeats.

    A detection landing within merge_radius of an existing spot's
    center folds into it by running-average of the corners; otherwise
    it joins the list with a fresh id. Corner coordinates are rounded
    through float32 so stored maps reload bit-exact.
    """
    out = [ParkingSpot(s.id, s.corners.copy(), s.occupied, s.coverage, s.hits)
           for s in (existing or [])]
    next_id = max((s.id for s in out), default=-1) + 1
    for det in detected:
        c3 = np.concatenate([det.corners, np.zeros((4, 1))], axis=1)
        world = transform_point(pose, c3)[:, :2]
        world = world.astype(np.float32).astype(np.float64)
        center = world.mean(axis=0)
        target = None
        best = merge_radius
        for spot in out:
            dist = float(np.linalg.norm(spot.center - center))
            if dist < best:
                best, target = dist, spot
        if target is None:
            out.append(ParkingSpot(next_id, world, det.occupied, det.coverage))
            next_id += 1
        else:
            w = target.hits
            merged = (target.corners * w + world) / (w + 1)
            target.corners = merged.astype(np.float32).astype(np.float64)
            target.hits = w + 1
            target.coverage = max(target.coverage, det.coverage)
    return out
