"""Local-map accumulation, loop closure, and pose-graph optimization.

Features stream in per frame and collect into a local map for every
30 m of odometry, expressed in the frame of the segment's first pose.
Each finished local map is matched against older nearby maps by ICP;
an accepted match becomes a loop edge and the pose graph (odometry
chain plus loop edges, node 0 held fixed) is re-optimized on the spot
by damped Gauss-Newton. Stacking local maps at their optimized poses
yields the global semantic map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .config import IcpConfig, MappingConfig
from .geometry import Pose6, compose, inverse, relative, transform_point
from .parking import ParkingSpot
from .registration import RegistrationError, SpatialIndex, icp
from .semantics import (LOCAL_FRAME, VEHICLE_FRAME, WORLD_FRAME, PointCloud,
                        voxel_downsample)


class MappingError(RuntimeError):
    pass


class FrameMismatchError(MappingError):
    pass


class DisconnectedGraphError(MappingError):
    pass


class NonConvergenceError(MappingError):
    pass


class LocalMap:
    """Labeled points gathered over one odometry segment.

    ``origin`` is the odometry pose at the segment start; ``cloud``
    holds points in that origin frame. Accumulation appends chunks;
    ``finalize_local_map`` produces the downsampled, immutable form.
    """

    def __init__(self, id: int, origin: Pose6, cloud: PointCloud | None = None,
                 traversed_length: float = 0.0):
        self.id = int(id)
        self.origin = origin
        self.traversed_length = float(traversed_length)
        self._chunks: list[PointCloud] = []
        self._cloud = cloud if cloud is not None else PointCloud.empty(LOCAL_FRAME)
        self._last_odom: Pose6 | None = None
        self._index: SpatialIndex | None = None

    @property
    def cloud(self) -> PointCloud:
        if self._chunks:
            self._cloud = PointCloud.concat([self._cloud] + self._chunks, LOCAL_FRAME)
            self._chunks = []
        return self._cloud

    def index(self, cell: float = 0.5) -> SpatialIndex:
        if self._index is None:
            self._index = SpatialIndex(self.cloud, cell)
        return self._index

    def __len__(self) -> int:
        return len(self.cloud)


def accumulate(lm: LocalMap, feats: PointCloud, odom: Pose6) -> LocalMap:
    """Folds one frame of vehicle-frame features into the local map."""
    if feats.frame != VEHICLE_FRAME:
        raise FrameMismatchError(
            f"expected features in '{VEHICLE_FRAME}' frame, got '{feats.frame}'")
    if lm._last_odom is not None:
        lm.traversed_length += float(np.linalg.norm(odom.t - lm._last_odom.t))
    lm._last_odom = odom
    if len(feats):
        lm._chunks.append(feats.transformed(relative(lm.origin, odom), LOCAL_FRAME))
    lm._index = None
    return lm


def finalize_local_map(lm: LocalMap, voxel: float) -> LocalMap:
    """Downsamples the accumulated cloud to one point per cell and class."""
    cloud = lm.cloud
    pos, lab = voxel_downsample(cloud.positions, cloud.labels, voxel)
    return LocalMap(lm.id, lm.origin, PointCloud(pos, lab, LOCAL_FRAME),
                    lm.traversed_length)


class LoopEdge(NamedTuple):
    i: int
    j: int
    z: Pose6   # pose of node j's frame expressed in node i's frame


def _seed_offsets(cfg: MappingConfig) -> np.ndarray:
    r, s = cfg.loop_search_range, cfg.loop_search_step
    vals = np.arange(-r, r + s / 2, s)
    dx, dy = np.meshgrid(vals, vals, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=1)


def detect_loop(
    latest: LocalMap,
    others: list[LocalMap],
    poses: list[Pose6],
    cfg: MappingConfig | None = None,
    icp_cfg: IcpConfig | None = None,
) -> LoopEdge | None:
    """Finds at most one loop-closure edge for the newest local map.

    Candidates are older maps (skipping the ``exclude_recent`` most
    recent) whose origin lies within ``loop_radius`` of the latest
    map's points under the current pose estimates. Because odometry
    drift can exceed the ICP correspondence radius, each candidate is
    tried from a grid of translation-offset guesses around the
    pose-difference guess; the cheap match-count ranking picks the few
    seeds worth a full ICP. Best accepted result wins.
    """
    cfg = cfg or MappingConfig()
    icp_cfg = icp_cfg or IcpConfig()
    if not others:
        return None
    by_id = sorted(others, key=lambda m: m.id)
    excluded = {m.id for m in by_id[len(by_id) - cfg.exclude_recent:]}

    cur = poses[latest.id]
    probe = latest.cloud.positions
    if probe.shape[0] == 0:
        return None
    step = max(1, probe.shape[0] // 400)
    probe_world = transform_point(cur, probe[::step])

    src = latest.cloud
    sub = src.positions[::max(1, len(src) // 600)]
    sub_lab = src.labels[::max(1, len(src) // 600)]
    offsets = _seed_offsets(cfg)

    best: LoopEdge | None = None
    best_key: tuple[float, float] | None = None
    for cand in others:
        if cand.id in excluded:
            continue
        reach = float(np.min(np.linalg.norm(
            probe_world[:, :2] - poses[cand.id].t[None, :2], axis=1)))
        if reach > cfg.loop_radius:
            continue
        base = relative(poses[cand.id], cur)
        index = cand.index(icp_cfg.cell)

        scores = np.zeros(offsets.shape[0], dtype=np.int64)
        for k, (dx, dy) in enumerate(offsets):
            seed = Pose6(base.r, base.t + np.array([dx, dy, 0.0]))
            moved = transform_point(seed, sub)
            hits = 0
            for code in np.unique(sub_lab):
                m = sub_lab == code
                idx, _ = index.query(moved[m], int(code), icp_cfg.max_corr)
                hits += int((idx >= 0).sum())
            scores[k] = hits
        # stable: score desc, then offset magnitude, then grid order
        rank = np.lexsort((np.arange(len(offsets)),
                           np.abs(offsets).sum(axis=1), -scores))
        # seeds whose raw match count is far below the inlier gate can
        # never pass the full gates; skip their ICP entirely
        floor = 0.25 * icp_cfg.min_inlier * max(1, len(sub_lab))
        for k in rank[:cfg.loop_seed_tries]:
            if scores[k] < floor:
                continue
            seed = Pose6(base.r, base.t + np.array([offsets[k, 0], offsets[k, 1], 0.0]))
            try:
                res = icp(src, index, seed, icp_cfg)
            except RegistrationError:
                continue
            if not res.accepted:
                continue
            key = (res.inlier_ratio, -res.mean_residual)
            if best_key is None or key > best_key:
                best_key = key
                best = LoopEdge(cand.id, latest.id, res.pose)
    return best


class GraphEdge(NamedTuple):
    i: int
    j: int
    z: Pose6


class PoseGraph:
    def __init__(self):
        self.nodes: list[Pose6] = []
        self.odom_edges: list[GraphEdge] = []
        self.loop_edges: list[GraphEdge] = []

    def add_node(self, pose: Pose6) -> int:
        self.nodes.append(pose)
        return len(self.nodes) - 1

    def add_odom_edge(self, i: int, j: int, z: Pose6) -> None:
        if j != i + 1:
            raise MappingError(f"odometry edges must chain consecutive nodes, got {i}->{j}")
        self._check(i, j)
        self.odom_edges.append(GraphEdge(i, j, z))

    def add_loop_edge(self, i: int, j: int, z: Pose6) -> None:
        self._check(i, j)
        self.loop_edges.append(GraphEdge(i, j, z))

    def _check(self, i: int, j: int) -> None:
        n = len(self.nodes)
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise MappingError(f"edge ({i}, {j}) references missing nodes (have {n})")

    def weighted_edges(self, cfg: MappingConfig) -> list[tuple[GraphEdge, float]]:
        return ([(e, cfg.odom_weight) for e in self.odom_edges]
                + [(e, cfg.loop_weight) for e in self.loop_edges])


def _edge_residual(pose_i: Pose6, pose_j: Pose6, z: Pose6) -> np.ndarray:
    return relative(z, relative(pose_i, pose_j)).as_vector()


def _pack(nodes: list[Pose6]) -> np.ndarray:
    return np.concatenate([p.as_vector() for p in nodes[1:]]) if len(nodes) > 1 \
        else np.zeros(0)


def _unpack(x: np.ndarray, anchor: Pose6) -> list[Pose6]:
    nodes = [anchor]
    for k in range(x.shape[0] // 6):
        nodes.append(Pose6.from_vector(x[6 * k:6 * k + 6]))
    return nodes


def graph_residuals(graph: PoseGraph, x: np.ndarray, cfg: MappingConfig) -> np.ndarray:
    """Stacked weighted edge residuals at packed state x (node 0 fixed)."""
    nodes = _unpack(x, graph.nodes[0])
    edges = graph.weighted_edges(cfg)
    out = np.zeros(6 * len(edges))
    for e, (edge, w) in enumerate(edges):
        out[6 * e:6 * e + 6] = np.sqrt(w) * _edge_residual(
            nodes[edge.i], nodes[edge.j], edge.z)
    return out


def _connected(graph: PoseGraph) -> bool:
    n = len(graph.nodes)
    if n <= 1:
        return True
    adj: list[list[int]] = [[] for _ in range(n)]
    for e in graph.odom_edges + graph.loop_edges:
        adj[e.i].append(e.j)
        adj[e.j].append(e.i)
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        k = stack.pop()
        for nxt in adj[k]:
            if not seen[nxt]:
                seen[nxt] = True
                stack.append(nxt)
    return bool(seen.all())


def _graph_jacobian(graph: PoseGraph, x: np.ndarray, cfg: MappingConfig) -> np.ndarray:
    """Central-difference Jacobian, perturbing one node block at a time."""
    edges = graph.weighted_edges(cfg)
    n = len(graph.nodes)
    jac = np.zeros((6 * len(edges), x.shape[0]))
    incident: list[list[int]] = [[] for _ in range(n)]
    for e, (edge, _) in enumerate(edges):
        incident[edge.i].append(e)
        incident[edge.j].append(e)
    nodes = _unpack(x, graph.nodes[0])
    h = cfg.jac_step
    for k in range(1, n):
        base = x[6 * (k - 1):6 * k]
        for c in range(6):
            for sign in (1.0, -1.0):
                v = base.copy()
                v[c] += sign * h
                node_k = Pose6.from_vector(v)
                for e in incident[k]:
                    edge, w = edges[e]
                    pi = node_k if edge.i == k else nodes[edge.i]
                    pj = node_k if edge.j == k else nodes[edge.j]
                    r = np.sqrt(w) * _edge_residual(pi, pj, edge.z)
                    jac[6 * e:6 * e + 6, 6 * (k - 1) + c] += sign * r / (2.0 * h)
    return jac


@dataclass
class GraphSolveReport:
    iterations: int
    cost: float
    initial_cost: float
    converged: bool
    cost_history: list[float]


def optimize_pose_graph(
    graph: PoseGraph,
    cfg: MappingConfig | None = None,
) -> tuple[list[Pose6], GraphSolveReport]:
    """Gauss-Newton over all node poses with node 0 as the gauge.

    Normal equations get a diagonal damping term only after a step
    fails to reduce the cost; the damping grows tenfold per retry up
    to ``gn_retries`` attempts, after which a singular system raises
    NonConvergenceError and a merely non-improving one stops at the
    current (locally optimal) estimate. Updates graph.nodes in place.
    """
    cfg = cfg or MappingConfig()
    if not graph.nodes:
        raise MappingError("empty graph")
    if not _connected(graph):
        raise DisconnectedGraphError(
            f"{len(graph.nodes)} nodes are not all reachable from node 0")
    if len(graph.nodes) == 1 or not (graph.odom_edges or graph.loop_edges):
        return graph.nodes, GraphSolveReport(0, 0.0, 0.0, True, [0.0])

    x = _pack(graph.nodes)
    f = graph_residuals(graph, x, cfg)
    cost = 0.5 * float(f @ f)
    history = [cost]
    converged = False
    it = 0
    for it in range(1, cfg.gn_max_iter + 1):
        jac = _graph_jacobian(graph, x, cfg)
        g = jac.T @ f
        h = jac.T @ jac
        lam = 0.0
        accepted = False
        for _ in range(cfg.gn_retries + 1):
            try:
                step = np.linalg.solve(h + lam * np.eye(h.shape[0]), -g)
            except np.linalg.LinAlgError:
                lam = cfg.gn_damping if lam == 0.0 else lam * 10.0
                continue
            x_new = x + step
            f_new = graph_residuals(graph, x_new, cfg)
            cost_new = 0.5 * float(f_new @ f_new)
            if np.isfinite(cost_new) and cost_new <= cost:
                x, f, cost = x_new, f_new, cost_new
                history.append(cost)
                accepted = True
                break
            lam = cfg.gn_damping if lam == 0.0 else lam * 10.0
        if not accepted:
            if lam > 0.0 and not np.isfinite(cost):
                raise NonConvergenceError(
                    f"no finite cost after {cfg.gn_retries} damping retries "
                    f"(iteration {it}, damping {lam:.1e})")
            break
        if float(np.linalg.norm(step)) < cfg.gn_step_tol:
            converged = True
            break
    if not np.isfinite(cost):
        raise NonConvergenceError(f"cost diverged to {cost} at iteration {it}")

    graph.nodes = _unpack(x, graph.nodes[0])
    return graph.nodes, GraphSolveReport(it, cost, history[0],
                                         converged or len(history) == 1, history)


def dump_graph(graph: PoseGraph, path) -> None:
    """Plain-text graph dump for offline inspection."""
    lines = []
    for k, p in enumerate(graph.nodes):
        v = p.as_vector()
        lines.append("NODE %d %s" % (k, " ".join("%.9g" % c for c in v)))
    for tag, edges in (("EDGE", graph.odom_edges), ("EDGE_LOOP", graph.loop_edges)):
        for e in edges:
            v = e.z.as_vector()
            lines.append("%s %d %d %s" % (tag, e.i, e.j,
                                          " ".join("%.9g" % c for c in v)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass
class GlobalMap:
    cloud: PointCloud           # world frame, coordinates exactly representable in f32
    index: SpatialIndex
    spots: list[ParkingSpot]
    entrance: Pose6


def assemble_global_map(
    maps: list[LocalMap],
    poses: list[Pose6],
    entrance: Pose6 | None = None,
    voxel: float = 0.1,
    spots: list[ParkingSpot] | None = None,
) -> GlobalMap:
    """Stacks local maps at their optimized poses into one world cloud.

    Positions are rounded through float32 after the final downsample;
    the on-disk format stores 4-byte floats, so this keeps a saved and
    reloaded map bit-identical to the one in memory.
    """
    if len(maps) > len(poses):
        raise MappingError(f"{len(maps)} local maps but only {len(poses)} poses")
    clouds = [m.cloud.transformed(poses[m.id], WORLD_FRAME) for m in maps]
    merged = PointCloud.concat(clouds, WORLD_FRAME)
    pos, lab = voxel_downsample(merged.positions, merged.labels, voxel)
    pos = pos.astype(np.float32).astype(np.float64)
    cloud = PointCloud(pos, lab, WORLD_FRAME)
    if entrance is None:
        entrance = poses[maps[0].id] if maps else Pose6.identity()
    clean = [ParkingSpot(s.id, s.corners.astype(np.float32).astype(np.float64),
                         s.occupied, s.coverage, s.hits)
             for s in (spots or [])]
    return GlobalMap(cloud=cloud, index=SpatialIndex(cloud), spots=clean,
                     entrance=entrance)


def with_spots(gmap: GlobalMap, spots: list[ParkingSpot]) -> GlobalMap:
    """Same cloud and index, new parking annotations (f32-cleaned as above)."""
    clean = [ParkingSpot(s.id, s.corners.astype(np.float32).astype(np.float64),
                         s.occupied, s.coverage, s.hits)
             for s in spots]
    return GlobalMap(cloud=gmap.cloud, index=gmap.index, spots=clean,
                     entrance=gmap.entrance)


class Mapper:
    """Sequential mapping pipeline: feed frames, then finalize.

    Tracks the active segment, closes it every ``segment_length``
    meters of odometry, runs loop detection on each closed segment,
    and re-optimizes the graph whenever a loop edge lands.
    """

    def __init__(self, cfg: MappingConfig | None = None,
                 icp_cfg: IcpConfig | None = None):
        self.cfg = cfg or MappingConfig()
        self.icp_cfg = icp_cfg or IcpConfig()
        self.graph = PoseGraph()
        self.maps: list[LocalMap] = []
        self.loop_edges_found = 0
        self._active: LocalMap | None = None
        # (stamp, map id, pose in segment, odometry arc since segment start)
        self._frames: list[tuple[float, int, Pose6, float]] = []

    def feed(self, stamp: float, odom: Pose6, feats: PointCloud) -> None:
        if self._active is None:
            self._active = LocalMap(0, odom)
            self.graph.add_node(odom)
        lm = self._active
        if lm._last_odom is not None and lm.traversed_length > 0:
            step = float(np.linalg.norm(odom.t - lm._last_odom.t))
            # close at the previous frame so the segment never overshoots
            if lm.traversed_length + step > self.cfg.segment_length:
                self._close_segment(lm._last_odom)
                lm = self._active
        accumulate(lm, feats, odom)
        self._frames.append((float(stamp), lm.id, relative(lm.origin, odom),
                             lm.traversed_length))

    def _close_segment(self, odom: Pose6) -> None:
        lm = finalize_local_map(self._active, self.cfg.voxel)
        self.maps.append(lm)
        edge = detect_loop(lm, self.maps[:-1], self.graph.nodes,
                           self.cfg, self.icp_cfg)
        if edge is not None:
            self.graph.add_loop_edge(*edge)
            self.loop_edges_found += 1
            optimize_pose_graph(self.graph, self.cfg)
        # next segment starts where this one ended
        z = relative(lm.origin, odom)
        guess = compose(self.graph.nodes[lm.id], z)
        nxt = LocalMap(lm.id + 1, odom)
        nxt._last_odom = odom    # distance bookkeeping continues from the boundary
        self.graph.add_node(guess)
        self.graph.add_odom_edge(lm.id, nxt.id, z)
        self._active = nxt

    def finalize(self) -> None:
        """Closes the partial segment (kept, however short) and settles the graph."""
        lm = self._active
        if lm is None:
            raise MappingError("no frames were fed")
        if len(lm.cloud) or lm.traversed_length > 0:
            final = finalize_local_map(lm, self.cfg.voxel)
            self.maps.append(final)
            edge = detect_loop(final, self.maps[:-1], self.graph.nodes,
                               self.cfg, self.icp_cfg)
            if edge is not None:
                self.graph.add_loop_edge(*edge)
                self.loop_edges_found += 1
                optimize_pose_graph(self.graph, self.cfg)
        self._active = None

    def trajectory(self) -> tuple[np.ndarray, list[Pose6]]:
        """Per-frame poses re-anchored on the optimized segment nodes.

        Within each segment the residual between the raw odometry
        prediction of the next node and its optimized pose is spread
        along the arc, so loop corrections de-warp frame poses instead
        of jumping at segment boundaries.
        """
        nodes = self.graph.nodes
        # per-segment end corrections in the predicted-end frame
        fix = {}
        for e in self.graph.odom_edges:
            pred = compose(nodes[e.i], e.z)
            fix[e.i] = relative(pred, nodes[e.j]).as_vector()
        total = {lm.id: lm.traversed_length for lm in self.maps}
        if self._active is not None:
            total[self._active.id] = self._active.traversed_length
        times = np.array([f[0] for f in self._frames])
        poses = []
        for _, mid, rel, arc in self._frames:
            p = compose(nodes[mid], rel)
            c = fix.get(mid)
            if c is not None and np.any(c != 0.0) and total.get(mid, 0.0) > 0:
                alpha = min(1.0, arc / total[mid])
                p = compose(p, Pose6.from_vector(alpha * c))
            poses.append(p)
        return times, poses

    def build_map(self, spots: list[ParkingSpot] | None = None,
                  voxel: float | None = None) -> GlobalMap:
        if not self.maps:
            raise MappingError("finalize() before building the map")
        return assemble_global_map(self.maps, self.graph.nodes,
                                   entrance=self.graph.nodes[0],
                                   voxel=voxel if voxel is not None else self.cfg.voxel,
                                   spots=spots)
