"""Trajectory error metrics, trajectory CSV I/O, and run reports.

Estimated and reference trajectories share the world frame (the map is
anchored at the first odometry pose), so errors are computed directly
on nearest-in-time pose pairs with no alignment step.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose6


class MetricsError(ValueError):
    pass


ASSOC_WINDOW = 1.0 / 30.0    # nearest-timestamp pairing window, seconds


@dataclass
class Trajectory:
    times: np.ndarray
    poses: list[Pose6]

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        if self.times.shape[0] != len(self.poses):
            raise MetricsError(
                f"{self.times.shape[0]} timestamps for {len(self.poses)} poses")
        if self.times.shape[0] and np.any(np.diff(self.times) <= 0):
            raise MetricsError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.times.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def length(self) -> float:
        pos = self.positions
        if pos.shape[0] < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(pos, axis=0), axis=1).sum())

    @staticmethod
    def from_pairs(pairs) -> "Trajectory":
        return Trajectory(np.array([t for t, _ in pairs]), [p for _, p in pairs])


def associate(est: Trajectory, gt: Trajectory,
              window: float = ASSOC_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-timestamp pairing; drops frames with no partner in the window."""
    if len(est) == 0 or len(gt) == 0:
        raise MetricsError("cannot associate empty trajectories")
    idx = np.searchsorted(gt.times, est.times)
    idx = np.clip(idx, 1, len(gt) - 1)
    left = gt.times[idx - 1]
    right = gt.times[idx]
    pick = np.where(est.times - left <= right - est.times, idx - 1, idx)
    ok = np.abs(gt.times[pick] - est.times) <= window + 1e-12
    if not ok.any():
        raise MetricsError("no timestamps overlap within the pairing window")
    return np.flatnonzero(ok), pick[ok]


def ate(est: Trajectory, gt: Trajectory,
        window: float = ASSOC_WINDOW) -> tuple[float, float]:
    """Absolute trajectory error: (rmse, max) in meters, no alignment."""
    ei, gi = associate(est, gt, window)
    err = np.linalg.norm(est.positions[ei] - gt.positions[gi], axis=1)
    return float(np.sqrt(np.mean(err ** 2))), float(err.max())


def nees(rmse: float, length: float) -> float:
    """Error normalized by trajectory length, in percent."""
    if length <= 0:
        raise MetricsError(f"trajectory length must be positive, got {length}")
    return 100.0 * rmse / length


def recall(outcomes) -> float:
    """Percent of frames with a successful relocalization."""
    flags = np.asarray(list(outcomes), dtype=bool)
    if flags.shape[0] == 0:
        raise MetricsError("empty relocalization log")
    return 100.0 * float(flags.sum()) / flags.shape[0]


def localization_error(est: Trajectory, gt: Trajectory, tracking,
                       window: float = ASSOC_WINDOW) -> tuple[float, float]:
    """(mean, max) planar position error in centimeters, Tracking frames only."""
    tracking = np.asarray(list(tracking), dtype=bool)
    if tracking.shape[0] != len(est):
        raise MetricsError(
            f"{tracking.shape[0]} tracking flags for {len(est)} frames")
    ei, gi = associate(est, gt, window)
    keep = tracking[ei]
    if not keep.any():
        raise MetricsError("no Tracking frames to evaluate")
    err = np.linalg.norm(est.positions[ei][keep][:, :2]
                         - gt.positions[gi][keep][:, :2], axis=1) * 100.0
    return float(err.mean()), float(err.max())


_CSV_HEADER = "time,rx,ry,rz,tx,ty,tz"


def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    lines = [_CSV_HEADER]
    for t, p in zip(traj.times, traj.poses):
        v = p.as_vector()
        lines.append(",".join("%.9g" % x for x in [t, *v]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path: str | Path) -> Trajectory:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0].strip() != _CSV_HEADER:
        raise MetricsError(f"{path}: expected header '{_CSV_HEADER}'")
    times = []
    poses = []
    for lineno, row in enumerate(text[1:], start=2):
        parts = row.split(",")
        if len(parts) != 7:
            raise MetricsError(f"{path}:{lineno}: expected 7 columns, got {len(parts)}")
        vals = [float(x) for x in parts]
        times.append(vals[0])
        poses.append(Pose6.from_vector(np.array(vals[1:])))
    return Trajectory(np.array(times), poses)


@dataclass
class RunReport:
    rmse: float | None = None            # meters
    max_err: float | None = None         # meters
    nees: float | None = None            # percent
    recall: float | None = None          # percent
    loc_err_mean: float | None = None    # centimeters
    loc_err_max: float | None = None     # centimeters
    map_bytes: int | None = None
    timing: dict | None = None           # simulated frames/seconds, not wall clock

    def __post_init__(self) -> None:
        for name in ("rmse", "max_err", "nees", "recall",
                     "loc_err_mean", "loc_err_max", "map_bytes"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise MetricsError(f"{name} must be nonnegative, got {v}")
        if self.recall is not None and self.recall > 100.0 + 1e-9:
            raise MetricsError(f"recall cannot exceed 100, got {self.recall}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"


def write_report(report: RunReport | dict, path: str | Path) -> None:
    if isinstance(report, RunReport):
        Path(path).write_text(report.to_json())
    else:
        Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
