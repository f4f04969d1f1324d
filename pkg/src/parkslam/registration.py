"""Point-cloud registration: nearest-neighbor index and semantic ICP.

Correspondences are constrained to matching semantic classes, which is
what makes alignment work in repetitive parking structures: a lane
pixel can never pair with a parking-line pixel no matter how close.

The index hashes points into a uniform voxel grid per class. Queries
scan the stencil of cells within the search radius, so lookup cost is
bounded by local density rather than map size. Mixed-class query
batches resolve in one sorted lookup through a fused (class, cell) key,
which is what the ICP inner loop uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .config import IcpConfig
from .geometry import Pose6, compose, matrix_to_rotvec, rotvec_to_matrix, transform_point
from .semantics import LOCALIZATION_CLASSES, PointCloud


class RegistrationError(RuntimeError):
    pass


class TooFewPointsError(RegistrationError):
    pass


class NoCorrespondencesError(RegistrationError):
    pass


_CELL = 0.5            # index cell edge, meters
_SHIFT = 1 << 20       # cell coordinates biased to stay positive in the packed key
_FSHIFT = 1 << 18      # fused-key bias; 19-bit fields leave the top bits for the class
_SMOOTH_RADIUS = 0.25  # tent-kernel support for the fit target; a couple of
                       # map voxel pitches so lattice columns blend smoothly


def _cell_keys(cells: np.ndarray) -> np.ndarray:
    c = cells.astype(np.int64) + _SHIFT
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def _fused_keys(cells: np.ndarray, cids: np.ndarray) -> np.ndarray:
    # compact class id in bits 57..60; 19-bit cell fields still cover +-131 km
    c = cells.astype(np.int64) + _FSHIFT
    return (cids.astype(np.int64) << 57) | (c[:, 0] << 38) | (c[:, 1] << 19) | c[:, 2]


class _ClassEntry(NamedTuple):
    keys: np.ndarray     # sorted packed cell key per stored point
    pts: np.ndarray
    orig: np.ndarray     # indices back into the indexed cloud
    zcells: np.ndarray   # occupied z-cell values
    ukeys: np.ndarray    # unique cell keys
    ustart: np.ndarray   # run starts into keys/pts, len(ukeys) + 1


def _make_entry(keys: np.ndarray, pts: np.ndarray, orig: np.ndarray,
                cells: np.ndarray) -> _ClassEntry:
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    ukeys, first = np.unique(keys, return_index=True)
    return _ClassEntry(keys, pts[order], orig[order], np.unique(cells[:, 2]),
                       ukeys, np.append(first, keys.size))


class SpatialIndex:
    """Per-class voxel hash over a fixed point set."""

    def __init__(self, cloud: PointCloud, cell: float = _CELL):
        self.cell = float(cell)
        self.positions = cloud.positions.copy()
        self.labels = cloud.labels.copy()
        self._by_class: dict[int, _ClassEntry] = {}
        self._stencils: dict[tuple, np.ndarray] = {}
        cells = np.floor(self.positions / self.cell).astype(np.int64)
        self._codes = np.unique(self.labels).astype(np.int64)
        for code in self._codes:
            sel = np.flatnonzero(self.labels == code)
            self._by_class[int(code)] = _make_entry(
                _cell_keys(cells[sel]), self.positions[sel], sel, cells[sel])
        cid = np.searchsorted(self._codes, self.labels)
        self._fused = _make_entry(
            _fused_keys(cells, cid), self.positions,
            np.arange(self.positions.shape[0], dtype=np.int64), cells)

    def _stencil(self, rings: int, zoffs: np.ndarray) -> np.ndarray:
        key = (rings, zoffs.tobytes())
        offs = self._stencils.get(key)
        if offs is None:
            xy = np.arange(-rings, rings + 1)
            offs = np.stack([a.ravel() for a in np.meshgrid(xy, xy, zoffs,
                                                            indexing="ij")], axis=1)
            self._stencils[key] = offs
        return offs

    def _stencil_for(self, entry: _ClassEntry, qcell: np.ndarray, rings: int):
        zoffs = np.arange(-rings, rings + 1)
        if entry.zcells.size < 2 * rings + 1:
            # restrict z offsets to layers that actually hold points
            zoffs = np.unique(entry.zcells[None, :] - qcell[:, 2][:, None])
            zoffs = zoffs[np.abs(zoffs) <= rings]
            if zoffs.size == 0:
                return None
        return self._stencil(rings, zoffs)

    @staticmethod
    def _runs_for(entry: _ClassEntry, cand_keys: np.ndarray):
        """[lo, hi) storage runs for a flat batch of candidate cell keys.

        One sorted lookup over the unique occupied cells; misses get the
        empty run [0, 0).
        """
        pos = np.searchsorted(entry.ukeys, cand_keys)
        pos[pos == entry.ukeys.size] = 0
        hit = entry.ukeys[pos] == cand_keys
        lo = np.where(hit, entry.ustart[pos], 0)
        hi = np.where(hit, entry.ustart[pos + 1], 0)
        return lo, hi

    def _cell_runs(self, points: np.ndarray, entry: _ClassEntry, radius: float):
        rings = int(np.ceil(radius / self.cell))
        qcell = np.floor(points / self.cell).astype(np.int64)
        offs = self._stencil_for(entry, qcell, rings)
        if offs is None:
            return None
        cand_keys = _cell_keys((qcell[:, None, :] + offs[None, :, :]).reshape(-1, 3))
        return self._runs_for(entry, cand_keys)

    def _fused_runs(self, points: np.ndarray, labels: np.ndarray, radius: float):
        entry = self._fused
        rings = int(np.ceil(radius / self.cell))
        qcell = np.floor(points / self.cell).astype(np.int64)
        offs = self._stencil_for(entry, qcell, rings)
        if offs is None:
            return None
        cid = np.searchsorted(self._codes, labels)
        cid = np.minimum(cid, self._codes.size - 1)
        known = self._codes[cid] == labels
        cand = (qcell[:, None, :] + offs[None, :, :]).reshape(-1, 3)
        cand_keys = _fused_keys(cand, np.repeat(cid, offs.shape[0]))
        if not known.all():
            # labels the index never saw can't match anything
            cand_keys[~np.repeat(known, offs.shape[0])] = -1
        return self._runs_for(entry, cand_keys)

    @staticmethod
    def _expand(lo: np.ndarray, hi: np.ndarray, nq: int):
        """Flatten ragged [lo, hi) runs into (query id, storage index) pairs."""
        counts = hi - lo
        total = int(counts.sum())
        if total == 0:
            return None
        run_q = np.repeat(np.arange(nq), counts.reshape(nq, -1).sum(axis=1))
        nz = counts > 0
        starts = lo[nz]
        lens = counts[nz]
        flat = np.repeat(starts, lens) + (np.arange(total) -
                                          np.repeat(np.cumsum(lens) - lens, lens))
        return run_q, flat

    def _pairs(self, points, entry, runs, radius):
        """Candidate pairs within radius: (query id, storage id, d2, target).

        query id is nondecreasing, so per-query reductions downstream are
        segmented reductions. None when nothing is in range.
        """
        ex = self._expand(*runs, points.shape[0])
        if ex is None:
            return None
        run_q, flat = ex
        tgt = entry.pts[flat]
        d2 = np.sum((points[run_q] - tgt) ** 2, axis=1)
        ok = d2 <= radius * radius
        if not ok.any():
            return None
        return run_q[ok], flat[ok], d2[ok], tgt[ok]

    @staticmethod
    def _seg_nearest(run_q, orig_flat, d2, out_idx, out_d2) -> None:
        # ties go to the lowest stored point id
        starts = np.flatnonzero(np.diff(run_q, prepend=run_q[0] - 1))
        qids = run_q[starts]
        seg_len = np.diff(np.append(starts, len(run_q)))
        dmin = np.minimum.reduceat(d2, starts)
        tie = d2 == np.repeat(dmin, seg_len)
        cand = np.where(tie, orig_flat, np.iinfo(np.int64).max)
        out_idx[qids] = np.minimum.reduceat(cand, starts)
        out_d2[qids] = dmin

    @staticmethod
    def _seg_tent(run_q, tgt, d2, radius, means, cnt) -> None:
        w = 1.0 - np.sqrt(d2) / radius
        starts = np.flatnonzero(np.diff(run_q, prepend=run_q[0] - 1))
        qids = run_q[starts]
        sums = np.add.reduceat(tgt * w[:, None], starts, axis=0)
        wtot = np.add.reduceat(w, starts)
        n = np.diff(np.append(starts, len(run_q)))
        good = wtot > 1e-12
        means[qids[good]] = sums[good] / wtot[good, None]
        cnt[qids[good]] = n[good]

    def coverage_mask(self, points: np.ndarray, label: int, radius: float) -> np.ndarray:
        """True where any occupied same-class cell overlaps the search stencil.

        A coarse, cell-level visibility test: it tells whether the
        indexed cloud covers the query location at all, regardless of
        exact point distances.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        nq = points.shape[0]
        entry = self._by_class.get(int(label))
        if entry is None or nq == 0:
            return np.zeros(nq, dtype=bool)
        runs = self._cell_runs(points, entry, radius)
        if runs is None:
            return np.zeros(nq, dtype=bool)
        lo, hi = runs
        return (hi - lo).reshape(nq, -1).sum(axis=1) > 0

    def coverage_classes(self, points: np.ndarray, labels: np.ndarray,
                         radius: float) -> np.ndarray:
        """coverage_mask with each query row tested against its own label."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        labels = np.asarray(labels).reshape(-1)
        nq = points.shape[0]
        if nq == 0 or self._codes.size == 0:
            return np.zeros(nq, dtype=bool)
        runs = self._fused_runs(points, labels, radius)
        if runs is None:
            return np.zeros(nq, dtype=bool)
        lo, hi = runs
        return (hi - lo).reshape(nq, -1).sum(axis=1) > 0

    def query(self, points: np.ndarray, label: int, radius: float):
        """Nearest same-class neighbor within radius for each query point.

        Returns (indices into the indexed cloud, squared distances);
        index -1 marks queries with no neighbor in range. Ties go to
        the point stored first.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        nq = points.shape[0]
        out_idx = np.full(nq, -1, dtype=np.int64)
        out_d2 = np.full(nq, np.inf)
        entry = self._by_class.get(int(label))
        if entry is None or nq == 0:
            return out_idx, out_d2
        runs = self._cell_runs(points, entry, radius)
        pr = None if runs is None else self._pairs(points, entry, runs, radius)
        if pr is not None:
            run_q, flat, d2, _ = pr
            self._seg_nearest(run_q, entry.orig[flat], d2, out_idx, out_d2)
        return out_idx, out_d2

    def query_classes(self, points: np.ndarray, labels: np.ndarray, radius: float):
        """query() for a mixed-class batch, one row's label per query row.

        A single fused lookup replaces the per-class loop; results are
        identical to calling query() class by class.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        labels = np.asarray(labels).reshape(-1)
        nq = points.shape[0]
        out_idx = np.full(nq, -1, dtype=np.int64)
        out_d2 = np.full(nq, np.inf)
        if nq == 0 or self._codes.size == 0:
            return out_idx, out_d2
        runs = self._fused_runs(points, labels, radius)
        pr = None if runs is None else self._pairs(points, self._fused, runs, radius)
        if pr is not None:
            run_q, flat, d2, _ = pr
            self._seg_nearest(run_q, self._fused.orig[flat], d2, out_idx, out_d2)
        return out_idx, out_d2

    def match_coverage(self, points: np.ndarray, labels: np.ndarray, radius: float):
        """query_classes plus the per-row coverage bit from one expansion.

        Serves the post-fit quality accounting, where both the matches
        and the covered-point denominator are taken at the same radius.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        labels = np.asarray(labels).reshape(-1)
        nq = points.shape[0]
        out_idx = np.full(nq, -1, dtype=np.int64)
        out_d2 = np.full(nq, np.inf)
        covered = np.zeros(nq, dtype=bool)
        if nq == 0 or self._codes.size == 0:
            return out_idx, out_d2, covered
        runs = self._fused_runs(points, labels, radius)
        if runs is None:
            return out_idx, out_d2, covered
        lo, hi = runs
        covered = (hi - lo).reshape(nq, -1).sum(axis=1) > 0
        pr = self._pairs(points, self._fused, runs, radius)
        if pr is not None:
            run_q, flat, d2, _ = pr
            self._seg_nearest(run_q, self._fused.orig[flat], d2, out_idx, out_d2)
        return out_idx, out_d2, covered

    def match_targets(self, points: np.ndarray, labels: np.ndarray,
                      radius: float, mean_radius: float):
        """Nearest neighbor within radius plus the tent mean within mean_radius.

        The fitting sweep wants both at the same query positions, and the
        candidate set for the larger radius covers the smaller, so one
        expansion serves both (requires mean_radius <= radius). Returns
        (indices, squared distances, means, counts).
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        labels = np.asarray(labels).reshape(-1)
        nq = points.shape[0]
        out_idx = np.full(nq, -1, dtype=np.int64)
        out_d2 = np.full(nq, np.inf)
        means = np.zeros((nq, 3))
        cnt = np.zeros(nq, dtype=np.int64)
        if nq == 0 or self._codes.size == 0:
            return out_idx, out_d2, means, cnt
        runs = self._fused_runs(points, labels, radius)
        pr = None if runs is None else self._pairs(points, self._fused, runs, radius)
        if pr is None:
            return out_idx, out_d2, means, cnt
        run_q, flat, d2, tgt = pr
        self._seg_nearest(run_q, self._fused.orig[flat], d2, out_idx, out_d2)
        okt = d2 <= mean_radius * mean_radius
        if okt.any():
            self._seg_tent(run_q[okt], tgt[okt], d2[okt], mean_radius, means, cnt)
        return out_idx, out_d2, means, cnt

    def local_mean(self, points: np.ndarray, label: int, radius: float):
        """Tent-weighted centroid of the same-class points near each query.

        Weights fall linearly from 1 at the query to 0 at radius. A flat
        window over the voxel lattice of a resampled stripe captures a
        discrete set of columns and snaps to the middle one, so the target
        stays quantized; the tent blends neighboring columns and tracks the
        query smoothly. Returns (means, counts); rows with count 0 are
        all-zero and the caller is expected to fall back to the plain
        nearest neighbor.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        nq = points.shape[0]
        means = np.zeros((nq, 3))
        cnt = np.zeros(nq, dtype=np.int64)
        entry = self._by_class.get(int(label))
        if entry is None or nq == 0:
            return means, cnt
        runs = self._cell_runs(points, entry, radius)
        pr = None if runs is None else self._pairs(points, entry, runs, radius)
        if pr is not None:
            run_q, _, d2, tgt = pr
            self._seg_tent(run_q, tgt, d2, radius, means, cnt)
        return means, cnt

    def local_mean_classes(self, points: np.ndarray, labels: np.ndarray, radius: float):
        """local_mean() for a mixed-class batch in one fused lookup."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        labels = np.asarray(labels).reshape(-1)
        nq = points.shape[0]
        means = np.zeros((nq, 3))
        cnt = np.zeros(nq, dtype=np.int64)
        if nq == 0 or self._codes.size == 0:
            return means, cnt
        runs = self._fused_runs(points, labels, radius)
        pr = None if runs is None else self._pairs(points, self._fused, runs, radius)
        if pr is not None:
            run_q, _, d2, tgt = pr
            self._seg_tent(run_q, tgt, d2, radius, means, cnt)
        return means, cnt


def brute_force_nn(cloud: PointCloud, points: np.ndarray, label: int, radius: float):
    """Reference O(N*M) matcher used to validate the index."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    sel = np.flatnonzero(cloud.labels == int(label))
    out_idx = np.full(points.shape[0], -1, dtype=np.int64)
    out_d2 = np.full(points.shape[0], np.inf)
    if sel.size == 0 or points.shape[0] == 0:
        return out_idx, out_d2
    d2 = np.sum((points[:, None, :] - cloud.positions[sel][None, :, :]) ** 2, axis=2)
    best = np.argmin(d2, axis=1)
    bd = d2[np.arange(points.shape[0]), best]
    ok = bd <= radius * radius
    out_idx[ok] = sel[best[ok]]
    out_d2[ok] = bd[ok]
    return out_idx, out_d2


def rigid_align(src: np.ndarray, dst: np.ndarray) -> Pose6:
    """Least-squares rigid motion taking src points onto dst points.

    Standard SVD solution on centered coordinates. Degenerate spreads
    (all source points coplanar, which is the normal case for ground
    features) are handled by falling back to a yaw-only fit so the
    reflection ambiguity can never flip the vertical axis.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape[0] < 2:
        raise TooFewPointsError(f"need >= 2 pairs, got {src.shape[0]}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    a = src - mu_s
    b = dst - mu_d
    h = a.T @ b
    u, s, vt = np.linalg.svd(h)
    if s[2] <= max(1e-9 * s[0], 1e-12):
        # planar spread: yaw from the 2D cross/dot accumulators
        num = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
        den = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
        yaw = float(np.arctan2(num, den)) if (num != 0.0 or den != 0.0) else 0.0
        rot = rotvec_to_matrix(np.array([0.0, 0.0, yaw]))
    else:
        d = np.sign(np.linalg.det(vt.T @ u.T))
        rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
        rot = rotvec_to_matrix(matrix_to_rotvec(rot))  # re-orthonormalize
    t = mu_d - rot @ mu_s
    return Pose6(matrix_to_rotvec(rot), t)


@dataclass
class IcpResult:
    pose: Pose6                 # maps source frame into target frame
    inlier_ratio: float         # matched / covered source points at the final pose
    mean_residual: float
    iterations: int
    converged: bool
    matches: int
    accepted: bool = field(default=False)

    def gate(self, cfg: IcpConfig) -> "IcpResult":
        self.accepted = (self.inlier_ratio >= cfg.min_inlier
                         and self.mean_residual <= cfg.max_resid)
        return self


def icp(
    source: PointCloud,
    target: PointCloud | SpatialIndex,
    guess: Pose6,
    cfg: IcpConfig | None = None,
) -> IcpResult:
    """Class-constrained point-to-point ICP from an initial guess.

    Only localization classes participate. Each sweep matches every
    transformed source point to its nearest same-class target point
    within cfg.max_corr, re-fits the rigid motion on the matched pairs
    (against a windowed local mean of the target, with far pairs trimmed
    once the bulk alignment has settled), and stops when the incremental
    update falls below cfg.tol. The result reports match quality at the
    final pose; callers gate on it before trusting the alignment.
    """
    cfg = cfg or IcpConfig()
    index = target if isinstance(target, SpatialIndex) else SpatialIndex(target, cfg.cell)

    codes = np.array(sorted(int(c) for c in LOCALIZATION_CLASSES), dtype=np.uint8)
    sel = np.isin(source.labels, codes)
    src_pts = source.positions[sel]
    src_lab = source.labels[sel]
    if src_pts.shape[0] < cfg.min_points:
        raise TooFewPointsError(
            f"{src_pts.shape[0]} localization-class points, need >= {cfg.min_points}")

    pose = guess
    converged = False
    iterations = 0
    # outliers and, under partial overlap, source points clamping onto the
    # target's rim drag a plain least-squares fit. Early sweeps keep every
    # pair (the clamps supply the long-range pull); once the bulk alignment
    # has settled, pairs far beyond the median residual are trimmed so the
    # refit uses the true overlap only. Convergence only counts trimmed.
    trim = False
    radius = cfg.max_corr
    for iterations in range(1, cfg.max_iter + 1):
        moved = transform_point(pose, src_pts)
        trim = trim or iterations > cfg.max_iter // 3
        if trim:
            match_idx, match_d2, mu, n = index.match_targets(
                moved, src_lab, max(radius, _SMOOTH_RADIUS), _SMOOTH_RADIUS)
        else:
            match_idx, match_d2 = index.query_classes(moved, src_lab, radius)
        ok = match_idx >= 0
        if ok.sum() < 2:
            raise NoCorrespondencesError(
                f"{int(ok.sum())} correspondences inside {radius:.2f} m")
        a, b = moved[ok], index.positions[match_idx[ok]]
        d = np.sqrt(match_d2[ok])
        if trim:
            # the floor keeps sparse informative features (sign blobs, bump
            # edges) that a pure median rule would discard whenever the
            # majority class fits well along its own aperture direction
            keep = d <= max(3.0 * float(np.median(d)), 0.3 * cfg.max_corr) + 1e-9
            mu_ok, n_ok = mu[ok], n[ok]
            if int(keep.sum()) >= 20:
                a, b = a[keep], b[keep]
                mu_ok, n_ok = mu_ok[keep], n_ok[keep]
            # cell centroids quantize straight paint lines at the voxel
            # pitch (every interior cell's centroid sits at the cell middle
            # along the line), which leaves ICP stuck one lattice step off;
            # refitting against a tent-weighted local mean restores a smooth
            # sub-cell target. Pointless while the bulk alignment is coarse.
            b[n_ok > 0] = mu_ok[n_ok > 0]
        step = rigid_align(a, b)
        pose = compose(step, pose)
        # matching radius tracks the fit: once residuals tighten, distant
        # candidates are all noise and the cell stencil drops a ring
        radius = min(cfg.max_corr,
                     max(0.3 * cfg.max_corr, 5.0 * float(np.median(d))))
        snorm = float(np.linalg.norm(step.as_vector()))
        if snorm < cfg.tol and trim:
            converged = True
            break
        if snorm < 10.0 * cfg.tol:
            # bulk alignment has settled; switch to the trimmed refit now
            # rather than idling until the iteration-count fallback
            trim = True

    moved = transform_point(pose, src_pts)
    match_idx, match_d2, covered = index.match_coverage(moved, src_lab, cfg.max_corr)
    ok = match_idx >= 0
    n_ok = int(ok.sum())
    mean_res = float(np.sqrt(match_d2[ok]).mean()) if n_ok else float("inf")
    # the ratio is taken over source points the target actually covers,
    # so a partially overlapping (but well aligned) segment still gates in
    n_cov = int(covered.sum())
    res = IcpResult(
        pose=pose,
        inlier_ratio=n_ok / n_cov if n_cov else 0.0,
        mean_residual=mean_res,
        iterations=iterations,
        converged=converged,
        matches=n_ok,
    )
    return res.gate(cfg)
