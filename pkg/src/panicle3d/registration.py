"""Seed-landmark registration: IOU prior refinement, seed ICP and pose-graph LM."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from .geometry import (
    CameraIntrinsics,
    PointCloud,
    RigidTransform,
    adjoint,
    exp_se3,
    hat,
    interpolate_pose,
    invert,
    log_se3_vector,
    relative_angle,
)
from .render import rasterize_mask

logger = logging.getLogger(__name__)

MODES = ("full", "no-shift", "no-final-opt", "full-cloud-icp", "kinematics")


class FrameExcluded(Exception):
    """A frame has no usable seed points; it is dropped from the graph."""


class RegistrationError(RuntimeError):
    pass


class DisconnectedGraphError(RegistrationError):
    def __init__(self, components):
        self.components = components
        listing = "; ".join("[" + ", ".join(c) + "]" for c in components)
        super().__init__(f"pose graph is disconnected into {len(components)} components: {listing}")


@dataclass
class SeedNode:
    frame_id: str
    seed_cloud: PointCloud  # camera frame
    pose: RigidTransform  # camera-to-world estimate


@dataclass
class GraphEdge:
    """Measured pose of ``target`` expressed in the ``source`` camera frame."""

    source: str
    target: str
    relative: RigidTransform
    information: np.ndarray
    kind: str = "odometry"
    fitness: float = 0.0
    inlier_rmse: float = 0.0
    iou_shift: tuple | None = None


@dataclass
class PoseGraph:
    nodes: list
    edges: list
    rejected: list = field(default_factory=list)

    @property
    def node_ids(self):
        return [n.frame_id for n in self.nodes]

    def initial_poses(self):
        return {n.frame_id: n.pose for n in self.nodes}


@dataclass
class RegistrationReport:
    edges: list
    initial_residual: float
    final_residual: float
    iterations: int
    edge_residuals: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # total residual after each accepted step

    def to_dict(self):
        return {
            "initial_residual": self.initial_residual,
            "final_residual": self.final_residual,
            "iterations": self.iterations,
            "history": list(self.history),
            "edges": self.edges,
        }


@dataclass
class IcpResult:
    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    information: np.ndarray
    iterations: int


@dataclass
class IouResult:
    relative: RigidTransform
    shift: tuple
    iou: float
    iou_unshifted: float


def _positions(x):
    if isinstance(x, SeedNode):
        return x.seed_cloud.positions
    if isinstance(x, PointCloud):
        return x.positions
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# nodes


def extract_seed_node(frame, confidence_threshold=0.7, pose=None) -> SeedNode:
    """Keep only points of instances detected with confidence >= threshold."""
    cloud = frame.cloud
    keep = (cloud.instance_label >= 0) & (cloud.confidence >= np.float32(confidence_threshold))
    if not keep.any():
        raise FrameExcluded(f"frame {frame.frame_id!r}: no seed points at confidence >= {confidence_threshold}")
    return SeedNode(frame.frame_id, cloud.select(keep), frame.pose_prior if pose is None else pose)


# ---------------------------------------------------------------------------
# IOU shift search


def best_shift(mask_a, mask_b, shift_range):
    """Integer shift ``(du, dv)`` of ``mask_b`` maximizing IOU with ``mask_a``.

    Ties go to the smallest shift magnitude, then to lexicographic ``(du, dv)``.
    Returns ``(shift, iou_at_shift, iou_at_zero)``.
    """
    S = int(shift_range)
    rows = np.flatnonzero(mask_a.any(axis=1) | mask_b.any(axis=1))
    cols = np.flatnonzero(mask_a.any(axis=0) | mask_b.any(axis=0))
    if len(rows) == 0:
        return (0, 0), 0.0, 0.0
    a = mask_a[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    b = mask_b[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    h, w = a.shape
    A = np.zeros((h + 2 * S, w + 2 * S), bool)
    A[S : S + h, S : S + w] = a
    na, nb = int(a.sum()), int(b.sum())
    shifts = sorted(
        ((du, dv) for du in range(-S, S + 1) for dv in range(-S, S + 1)),
        key=lambda s: (s[0] ** 2 + s[1] ** 2, s[0], s[1]),
    )
    best, best_iou, zero_iou = (0, 0), -1.0, 0.0
    for du, dv in shifts:
        inter = int(np.count_nonzero(A[S + dv : S + dv + h, S + du : S + du + w] & b))
        union = na + nb - inter
        iou = inter / union if union else 0.0
        if (du, dv) == (0, 0):
            zero_iou = iou
        if iou > best_iou:
            best, best_iou = (du, dv), iou
    return best, best_iou, zero_iou


def refine_prior_by_iou(node_i: SeedNode, node_j: SeedNode, k: CameraIntrinsics, shift_range=10) -> IouResult:
    """Correct the relative prior ``T_i⁻¹ T_j`` by aligning projected seed masks.

    Both seed clouds are projected into a virtual camera halfway between the
    two priors; the pixel shift of frame j's mask with the highest IOU becomes
    an in-plane translation at the median seed depth.
    """
    Ti, Tj = node_i.pose, node_j.pose
    prior = invert(Ti) @ Tj
    if relative_angle(Ti, Tj) >= np.deg2rad(45.0):
        logger.warning("IOU refinement skipped for %s-%s: rotation >= 45 deg", node_i.frame_id, node_j.frame_id)
        return IouResult(prior, (0, 0), 0.0, 0.0)
    Tv = interpolate_pose(Ti, Tj, 0.5)
    to_v = invert(Tv)
    pi = (to_v @ Ti).apply(_positions(node_i))
    pj = (to_v @ Tj).apply(_positions(node_j))
    pi, pj = pi[pi[:, 2] > 0], pj[pj[:, 2] > 0]
    mi, mj = rasterize_mask(pi, k), rasterize_mask(pj, k)
    if not mi.any() or not mj.any():
        logger.warning("IOU refinement skipped for %s-%s: empty projected mask", node_i.frame_id, node_j.frame_id)
        return IouResult(prior, (0, 0), 0.0, 0.0)
    (du, dv), iou, iou0 = best_shift(mi, mj, shift_range)
    if (du, dv) == (0, 0):
        return IouResult(prior, (0, 0), iou, iou0)
    zbar = float(np.median(np.concatenate([pi[:, 2], pj[:, 2]])))
    dt = RigidTransform.from_translation([du * zbar / k.fx, dv * zbar / k.fy, 0.0])
    Tj_new = Tv @ dt @ to_v @ Tj
    return IouResult(invert(Ti) @ Tj_new, (du, dv), iou, iou0)


# ---------------------------------------------------------------------------
# ICP


def kabsch(src, dst):
    """Least-squares rigid transform mapping ``src`` onto ``dst``."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return RigidTransform.from_rotation_matrix(R, cd - R @ cs)


def icp_information(points):
    """Gauss-Newton ``JᵀJ`` of point residuals w.r.t. a right perturbation ``(omega, v)``."""
    info = np.zeros((6, 6))
    if len(points) == 0:
        return info
    x, y, z = points.T
    # sum of hat(p).T @ hat(p)
    info[:3, :3] = np.array(
        [
            [np.sum(y * y + z * z), -np.sum(x * y), -np.sum(x * z)],
            [-np.sum(x * y), np.sum(x * x + z * z), -np.sum(y * z)],
            [-np.sum(x * z), -np.sum(y * z), np.sum(x * x + y * y)],
        ]
    )
    s = points.sum(axis=0)
    info[:3, 3:] = hat(s)  # -hat(p).T summed
    info[3:, :3] = hat(s).T
    info[3:, 3:] = len(points) * np.eye(3)
    return info


def pairwise_icp(
    source, target, init=None, max_corr_dist=5e-3, max_iter=60, tol=1e-12, refine_levels=(0.5, 0.25)
) -> IcpResult:
    """Point-to-point ICP returning ``T`` with ``T(source) ≈ target``.

    After converging with the ``max_corr_dist`` gate, ICP continues with the
    gate scaled by each factor in ``refine_levels``; wrong matches between
    touching seeds drop out at the finer gates. Fitness is the fraction of
    source points with a target neighbor within ``max_corr_dist`` at the end.
    """
    src = _positions(source)
    dst = _positions(target)
    T = RigidTransform.identity() if init is None else init
    if len(src) == 0 or len(dst) == 0:
        return IcpResult(T, 0.0, np.inf, np.zeros((6, 6)), 0)
    tree = cKDTree(dst)
    total = 0
    for gate in (max_corr_dist, *(max_corr_dist * f for f in refine_levels)):
        prev = None
        for _ in range(max_iter):
            moved = T.apply(src)
            d, idx = tree.query(moved, distance_upper_bound=gate)
            ok = np.isfinite(d)
            if ok.sum() < 3:
                break
            # same matches as the last step: T already solves them
            matched = np.where(ok, idx, -1)
            if prev is not None and np.array_equal(matched, prev):
                break
            prev = matched
            total += 1
            delta = kabsch(moved[ok], dst[idx[ok]])
            T = delta @ T
            if delta.angle < tol and np.linalg.norm(delta.translation) < tol:
                break
    moved = T.apply(src)
    d, idx = tree.query(moved, distance_upper_bound=max_corr_dist)
    ok = np.isfinite(d)
    fitness = float(ok.mean())
    rmse = float(np.sqrt(np.mean(d[ok] ** 2))) if ok.any() else np.inf
    return IcpResult(T, fitness, rmse, icp_information(src[ok]), total)


# ---------------------------------------------------------------------------
# pose graph


def candidate_pairs(nodes, odometry_window=1, loop_radius=0.12):
    """Node index pairs ``(a, b, kind)`` with ``a < b``."""
    centers = np.array([n.pose.translation for n in nodes])
    pairs = []
    n = len(nodes)
    for a in range(n):
        for b in range(a + 1, n):
            if b - a <= odometry_window:
                pairs.append((a, b, "odometry"))
            elif np.linalg.norm(centers[a] - centers[b]) <= loop_radius:
                pairs.append((a, b, "loop"))
    return pairs


def _connected_components(ids, edges):
    index = {fid: i for i, fid in enumerate(ids)}
    rows = [index[e.source] for e in edges]
    cols = [index[e.target] for e in edges]
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
    n_comp, labels = connected_components(adj, directed=False)
    return [[ids[i] for i in np.flatnonzero(labels == c)] for c in range(n_comp)]


def build_pose_graph(
    nodes,
    intrinsics: CameraIntrinsics,
    odometry_window=1,
    loop_radius=0.12,
    max_corr_dist=5e-3,
    fitness_floor=0.3,
    refine_iou=True,
    shift_range=10,
    icp_clouds=None,
    workers=1,
) -> PoseGraph:
    """Measure relative poses between neighboring nodes.

    ``icp_clouds`` optionally maps frame id to the camera-frame points used for
    ICP (the seed clouds are used otherwise, and always for IOU refinement).
    """
    nodes = list(nodes)
    if len(nodes) < 2:
        raise RegistrationError("pose graph requires at least 2 nodes")
    pairs = candidate_pairs(nodes, odometry_window, loop_radius)

    def measure(pair):
        a, b, kind = pair
        na, nb = nodes[a], nodes[b]
        shift = None
        if refine_iou:
            res = refine_prior_by_iou(na, nb, intrinsics, shift_range)
            init, shift = res.relative, res.shift
        else:
            init = invert(na.pose) @ nb.pose
        src = nb if icp_clouds is None else icp_clouds[nb.frame_id]
        dst = na if icp_clouds is None else icp_clouds[na.frame_id]
        icp = pairwise_icp(src, dst, init, max_corr_dist)
        return GraphEdge(na.frame_id, nb.frame_id, icp.transform, icp.information, kind, icp.fitness, icp.inlier_rmse, shift)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            measured = list(pool.map(measure, pairs))
    else:
        measured = [measure(p) for p in pairs]
    edges = [e for e in measured if e.fitness >= fitness_floor]
    rejected = [e for e in measured if e.fitness < fitness_floor]
    for e in rejected:
        logger.warning("edge %s-%s rejected: fitness %.3f", e.source, e.target, e.fitness)
    comps = _connected_components([n.frame_id for n in nodes], edges)
    if len(comps) > 1:
        raise DisconnectedGraphError(comps)
    return PoseGraph(nodes, edges, rejected)


def _ad(xi):
    A = np.zeros((6, 6))
    A[:3, :3] = hat(xi[:3])
    A[3:, 3:] = hat(xi[:3])
    A[3:, :3] = hat(xi[3:])
    return A


def _edge_residual(edge, Ts, Tt):
    X = invert(Ts) @ Tt
    return log_se3_vector(invert(edge.relative) @ X), X


def graph_residual(edges, poses):
    """Total ``Σ rᵀ Ω r`` and its per-edge terms."""
    terms = {}
    for e in edges:
        r, _ = _edge_residual(e, poses[e.source], poses[e.target])
        c = float(r @ e.information @ r)
        if not np.isfinite(c):
            raise RegistrationError(f"non-finite residual on edge {e.source}-{e.target}")
        terms[(e.source, e.target)] = c
    return float(sum(terms.values())), terms


def optimize_pose_graph(graph: PoseGraph, max_iter=100, initial_damping=1e-4):
    """Levenberg-Marquardt over all poses except the first (gauge anchor).

    Returns ``(poses, RegistrationReport)``; accepted steps strictly decrease
    the total residual.
    """
    ids = graph.node_ids
    poses = graph.initial_poses()
    free = ids[1:]
    col = {fid: 6 * i for i, fid in enumerate(free)}
    dim = 6 * len(free)
    cost, _ = graph_residual(graph.edges, poses)
    initial = cost
    lam = initial_damping
    iterations = 0
    history = [cost]
    for _ in range(max_iter):
        if cost == 0.0 or dim == 0:
            break
        H = np.zeros((dim, dim))
        g = np.zeros(dim)
        for e in graph.edges:
            r, X = _edge_residual(e, poses[e.source], poses[e.target])
            Jr_inv = np.eye(6) + 0.5 * _ad(r)
            blocks = []
            if e.target in col:
                blocks.append((col[e.target], Jr_inv))
            if e.source in col:
                blocks.append((col[e.source], -Jr_inv @ adjoint(invert(X))))
            Om = e.information
            for ca, Ja in blocks:
                g[ca : ca + 6] += Ja.T @ Om @ r
                for cb, Jb in blocks:
                    H[ca : ca + 6, cb : cb + 6] += Ja.T @ Om @ Jb
        diag = np.diag(H).copy()
        diag[diag <= 0] = 1e-12
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = dict(poses)
            for fid, c0 in col.items():
                trial[fid] = poses[fid] @ exp_se3(step[c0 : c0 + 6])
            new_cost, _ = graph_residual(graph.edges, trial)
            if new_cost < cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            break
        iterations += 1
        decrease = (cost - new_cost) / cost
        poses, cost = trial, new_cost
        history.append(cost)
        lam = max(lam / 10, 1e-12)
        if decrease < 1e-9 or np.linalg.norm(step) < 1e-10:
            break
    _, terms = graph_residual(graph.edges, poses)
    edges = [
        {
            "source": e.source,
            "target": e.target,
            "kind": e.kind,
            "fitness": e.fitness,
            "inlier_rmse": e.inlier_rmse,
            "accepted": True,
        }
        for e in graph.edges
    ] + [
        {"source": e.source, "target": e.target, "kind": e.kind, "fitness": e.fitness,
         "inlier_rmse": e.inlier_rmse, "accepted": False}
        for e in graph.rejected
    ]
    report = RegistrationReport(edges, initial, cost, iterations, terms, history)
    return poses, report


def chain_poses(graph: PoseGraph):
    """Poses from composing measured edges outward from the first node (no optimization)."""
    ids = graph.node_ids
    poses = {ids[0]: graph.nodes[0].pose}
    order = sorted(graph.edges, key=lambda e: (e.kind != "odometry", ids.index(e.source), ids.index(e.target)))
    changed = True
    while changed:
        changed = False
        for e in order:
            if e.source in poses and e.target not in poses:
                poses[e.target] = poses[e.source] @ e.relative
                changed = True
            elif e.target in poses and e.source not in poses:
                poses[e.source] = poses[e.target] @ invert(e.relative)
                changed = True
    return {fid: poses[fid] for fid in ids}


# ---------------------------------------------------------------------------
# fusion


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Average position and color per voxel; keep the most frequent instance label."""
    if voxel <= 0 or len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)
    pos = np.zeros((m, 3))
    np.add.at(pos, inverse, cloud.positions)
    pos /= counts[:, None]
    col = np.zeros((m, 3))
    np.add.at(col, inverse, cloud.colors.astype(np.float64))
    col = np.round(col / counts[:, None]).astype(np.uint8)
    # modal label: count (voxel, label) pairs, ties go to the smaller label
    pairs, pair_counts = np.unique(
        np.column_stack([inverse, cloud.instance_label]), axis=0, return_counts=True
    )
    order = np.lexsort((pairs[:, 1], -pair_counts, pairs[:, 0]))
    first = order[np.r_[True, pairs[order[1:], 0] != pairs[order[:-1], 0]]]
    labels = np.empty(m, np.int32)
    labels[pairs[first, 0]] = pairs[first, 1]
    match = cloud.instance_label == labels[inverse]
    conf_sum = np.zeros(m)
    np.add.at(conf_sum, inverse[match], cloud.confidence[match])
    n_match = np.bincount(inverse[match], minlength=m)
    conf = np.where(labels >= 0, conf_sum / np.maximum(n_match, 1), 0.0).astype(np.float32)
    return PointCloud(pos, col, labels, conf)


def fuse_clouds(frames, poses, voxel=0.0) -> PointCloud:
    """Transform each frame's cloud to world by its pose and merge them."""
    clouds = [f.cloud.transformed(poses[f.frame_id]) for f in frames]
    return voxel_downsample(PointCloud.concatenate(clouds), voxel)


# ---------------------------------------------------------------------------
# estimator


class SeedRegistration(BaseEstimator):
    """Estimate camera poses for a set of frames and fuse their clouds.

    ``mode`` selects the ablation path: ``full`` (IOU refinement, seed ICP and
    graph optimization), ``no-shift``, ``no-final-opt`` (chained pairwise ICP),
    ``full-cloud-icp`` and ``kinematics`` (priors passed through).

    Attributes set by ``fit``: ``poses_``, ``graph_``, ``report_``, ``excluded_``.
    """

    def __init__(
        self,
        mode="full",
        confidence_threshold=0.7,
        max_corr_dist=5e-3,
        odometry_window=1,
        loop_radius=0.12,
        shift_range=10,
        fitness_floor=0.3,
        voxel=0.0,
        workers=1,
    ):
        self.mode = mode
        self.confidence_threshold = confidence_threshold
        self.max_corr_dist = max_corr_dist
        self.odometry_window = odometry_window
        self.loop_radius = loop_radius
        self.shift_range = shift_range
        self.fitness_floor = fitness_floor
        self.voxel = voxel
        self.workers = workers

    def fit(self, frames, y=None):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        frames = list(frames)
        if len(frames) < 2:
            raise RegistrationError("registration requires at least 2 frames")
        self.excluded_ = []
        self.graph_ = None
        if self.mode == "kinematics":
            self.poses_ = {f.frame_id: f.pose_prior for f in frames}
            self.report_ = RegistrationReport([], 0.0, 0.0, 0)
            return self
        nodes = []
        for f in frames:
            try:
                nodes.append(extract_seed_node(f, self.confidence_threshold))
            except FrameExcluded as exc:
                logger.warning("%s; frame dropped", exc)
                self.excluded_.append(f.frame_id)
        icp_clouds = None
        if self.mode == "full-cloud-icp":
            icp_clouds = {f.frame_id: f.cloud.positions for f in frames}
        graph = build_pose_graph(
            nodes,
            frames[0].intrinsics,
            odometry_window=self.odometry_window,
            loop_radius=self.loop_radius,
            max_corr_dist=self.max_corr_dist,
            fitness_floor=self.fitness_floor,
            refine_iou=self.mode != "no-shift",
            shift_range=self.shift_range,
            icp_clouds=icp_clouds,
            workers=self.workers,
        )
        self.graph_ = graph
        if self.mode == "no-final-opt":
            poses = chain_poses(graph)
            total, terms = graph_residual(graph.edges, poses)
            init, _ = graph_residual(graph.edges, graph.initial_poses())
            edges = [{"source": e.source, "target": e.target, "kind": e.kind, "fitness": e.fitness,
                      "inlier_rmse": e.inlier_rmse, "accepted": True} for e in graph.edges]
            self.report_ = RegistrationReport(edges, init, total, 0, terms)
        else:
            poses, self.report_ = optimize_pose_graph(graph)
        # excluded frames keep their priors
        self.poses_ = {f.frame_id: poses.get(f.frame_id, f.pose_prior) for f in frames}
        return self

    def transform(self, frames):
        return fuse_clouds(list(frames), self.poses_, self.voxel)
