"""Binary persistence for global maps, plus compression and size math.

Layout (all little-endian, no padding):

    offset  size  field
    0       4     magic "AVPM"
    4       2     u16 format version (currently 1)
    6       8     u64 point count N
    14      4     u32 spot count S
    18      48    entrance pose, 6 x f64 (rotvec xyz, translation xyz)
    66      16    config digest (opaque 16 bytes)
    82      13*N  point records: u8 class + 3 x f32 position
    82+13N  34*S  spot records: 4 corners x 2 x f32 + u16 id

Positions travel as f32; GlobalMap assembly already rounds through
f32, so save followed by load reproduces the in-memory map bit for
bit. Writes go to a temp file in the target directory and rename into
place, so readers never observe a half-written map.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .geometry import Pose6
from .mapping import GlobalMap
from .parking import ParkingSpot
from .registration import SpatialIndex
from .semantics import WORLD_FRAME, PointCloud, voxel_downsample

MAGIC = b"AVPM"
VERSION = 1
_HEADER = struct.Struct("<4sHQI6d16s")
HEADER_BYTES = _HEADER.size            # 82
POINT_BYTES = 13
SPOT_BYTES = 34

_POINT_DTYPE = np.dtype([("label", "u1"), ("pos", "<f4", (3,))])
_SPOT_DTYPE = np.dtype([("corners", "<f4", (8,)), ("id", "<u2")])
assert _POINT_DTYPE.itemsize == POINT_BYTES
assert _SPOT_DTYPE.itemsize == SPOT_BYTES


class MapFormatError(ValueError):
    pass


def save(gmap: GlobalMap, path: str | Path, digest: bytes = b"\x00" * 16) -> int:
    """Writes the map atomically; returns the byte count on disk."""
    path = Path(path)
    cloud = gmap.cloud
    n = len(cloud)
    spots = gmap.spots
    header = _HEADER.pack(MAGIC, VERSION, n, len(spots),
                          *gmap.entrance.as_vector().tolist(), bytes(digest))

    points = np.zeros(n, dtype=_POINT_DTYPE)
    points["label"] = cloud.labels
    points["pos"] = cloud.positions.astype("<f4")

    recs = np.zeros(len(spots), dtype=_SPOT_DTYPE)
    for k, spot in enumerate(spots):
        recs["corners"][k] = spot.corners.reshape(8).astype("<f4")
        recs["id"][k] = spot.id

    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(points.tobytes())
            fh.write(recs.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return HEADER_BYTES + POINT_BYTES * n + SPOT_BYTES * len(spots)


def load(path: str | Path) -> GlobalMap:
    """Reads a map back, rebuilding the spatial index."""
    blob = Path(path).read_bytes()
    if len(blob) < HEADER_BYTES:
        raise MapFormatError(
            f"truncated header: file ends at offset {len(blob)}, need {HEADER_BYTES}")
    magic, version, n, s, *rest = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise MapFormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise MapFormatError(f"unsupported version {version} at offset 4")
    entrance = Pose6.from_vector(np.array(rest[:6]))
    expected = HEADER_BYTES + POINT_BYTES * n + SPOT_BYTES * s
    if len(blob) != expected:
        raise MapFormatError(
            f"file ends at offset {len(blob)}, expected {expected} "
            f"({n} points, {s} spots)")

    points = np.frombuffer(blob, dtype=_POINT_DTYPE, count=n, offset=HEADER_BYTES)
    cloud = PointCloud(points["pos"].astype(np.float64),
                       points["label"].copy(), WORLD_FRAME)
    recs = np.frombuffer(blob, dtype=_SPOT_DTYPE, count=s,
                         offset=HEADER_BYTES + POINT_BYTES * n)
    spots = [ParkingSpot(id=int(rec["id"]),
                         corners=rec["corners"].astype(np.float64).reshape(4, 2))
             for rec in recs]
    return GlobalMap(cloud=cloud, index=SpatialIndex(cloud), spots=spots,
                     entrance=entrance)


def compress(cloud: PointCloud, voxel: float) -> PointCloud:
    """Voxel-grid compression: one centroid per (cell, class)."""
    if voxel < 0:
        raise ValueError(f"voxel must be nonnegative, got {voxel}")
    if voxel == 0:
        return PointCloud(cloud.positions.copy(), cloud.labels.copy(), cloud.frame)
    pos, lab = voxel_downsample(cloud.positions, cloud.labels, voxel)
    return PointCloud(pos, lab, cloud.frame)


def size_report(point_count: int, per_point_bytes: int) -> tuple[int, str]:
    """Payload size for a point budget, with a human-readable rendering."""
    if point_count < 0 or per_point_bytes < 0:
        raise ValueError("counts must be nonnegative")
    total = int(point_count) * int(per_point_bytes)
    return total, human_size(total)


def human_size(nbytes: int) -> str:
    if nbytes >= 1e6:
        return f"{nbytes / 1e6:.1f} MB"
    if nbytes >= 1e3:
        return f"{nbytes / 1e3:.1f} kB"
    return f"{nbytes} B"


def map_bytes(gmap: GlobalMap) -> int:
    """On-disk size of a map without writing it."""
    return HEADER_BYTES + POINT_BYTES * len(gmap.cloud) + SPOT_BYTES * len(gmap.spots)
