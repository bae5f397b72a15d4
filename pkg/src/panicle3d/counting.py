"""Whole-panicle seed counting from per-view detections.

Per-view instance centers are clustered in 3D with DBSCAN, each cluster's
points get a Gaussian impulse density, and greedy non-maximum suppression
keeps one point per density peak.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.cluster import DBSCAN

from .geometry import PointCloud
from .validation import check_int, check_positive

logger = logging.getLogger(__name__)

MIN_CENTER_POINTS = 3
DEPTH_GATE = 3e-3
# kernel terms beyond this many sigmas are below exp(-72) and skipped
_KERNEL_CUTOFF = 12.0


@dataclass(frozen=True)
class SeedCenter:
    position: np.ndarray
    frame_id: str
    instance_id: int
    confidence: float
    points: np.ndarray = field(default=None, repr=False, compare=False)  # world-frame instance points


@dataclass
class SeedCluster:
    member_centers: list
    member_cloud: np.ndarray  # (k, 3) world points of member instances
    cluster_id: int

    @property
    def center_positions(self):
        if not self.member_centers:
            return np.zeros((0, 3))
        return np.array([c.position for c in self.member_centers])


@dataclass
class DensityField:
    values: np.ndarray
    sigma: float


@dataclass
class ClusterCount:
    cluster_id: int
    n_members: int
    maxima: np.ndarray  # (m, 3)

    @property
    def count(self):
        return len(self.maxima)


@dataclass
class CountResult:
    clusters: list

    @property
    def total(self) -> int:
        return int(sum(c.count for c in self.clusters))

    @property
    def maxima(self):
        if not self.clusters:
            return np.zeros((0, 3))
        return np.concatenate([c.maxima for c in self.clusters])

    def to_dict(self):
        return {
            "total": self.total,
            "clusters": [
                {
                    "id": c.cluster_id,
                    "n_members": c.n_members,
                    "n_maxima": c.count,
                    "maxima": c.maxima.tolist(),
                }
                for c in self.clusters
            ],
        }

    def to_json(self, path=None, indent=1):
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def maxima_cloud(self) -> PointCloud:
        pts = self.maxima
        colors = np.tile(np.array([[255, 0, 0]], np.uint8), (len(pts), 1))
        return PointCloud(pts, colors)


def compute_seed_centers(frames, poses, min_confidence=0.0, depth_gate=DEPTH_GATE):
    """One center per detected instance per frame: the coordinate-wise median
    of that instance's points, taken in the camera frame and mapped to world
    (a world-axis median would not follow a global rotation of the scene).

    ``poses`` maps frame id to a camera-to-world transform. Instances with
    fewer than three points are dropped with a warning. Points whose camera
    depth is more than ``depth_gate`` from the instance's median depth are
    left out of the center's point set (background leaking through the mask
    silhouette); ``None`` keeps every point.
    """
    centers = []
    for frame in frames:
        pose = poses[frame.frame_id] if isinstance(poses, dict) else poses
        cloud = frame.cloud
        labels = cloud.instance_label
        ids = np.unique(labels[labels >= 0]) if len(labels) else np.zeros(0, int)
        if len(ids) == 0:
            continue
        world = pose.apply(cloud.positions)
        conf_map = frame.masks.confidence if frame.masks is not None else {}
        order = np.argsort(labels, kind="stable")
        sorted_labels = labels[order]
        for inst in ids:
            lo, hi = np.searchsorted(sorted_labels, [inst, inst + 1])
            idx = order[lo:hi]
            conf = float(conf_map.get(int(inst), cloud.confidence[idx[0]]))
            if conf < min_confidence:
                continue
            if len(idx) < MIN_CENTER_POINTS:
                logger.warning(
                    "frame %r instance %d has %d points; center dropped", frame.frame_id, inst, len(idx)
                )
                continue
            pts = world[idx]
            if depth_gate is not None:
                z = cloud.positions[idx, 2]
                pts_kept = pts[np.abs(z - np.median(z)) <= depth_gate]
            else:
                pts_kept = pts
            position = pose.apply(np.median(cloud.positions[idx], axis=0))
            centers.append(SeedCenter(position, frame.frame_id, int(inst), conf, pts_kept))
    return centers


def dbscan_labels(positions, eps, min_pts):
    """DBSCAN labels (``-1`` for noise). ``min_pts`` counts the point itself."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        return np.zeros(0, dtype=np.int64)
    return DBSCAN(eps=eps, min_samples=min_pts).fit_predict(positions).astype(np.int64)


def cluster_centers(centers, eps=4e-3, min_pts=2):
    """Group centers with DBSCAN; noise centers become singleton clusters.

    Cluster ids follow DBSCAN's labels, then singletons in input order.
    """
    eps = check_positive(eps, "eps")
    min_pts = check_int(min_pts, "min_pts", minimum=1)
    centers = list(centers)
    if not centers:
        return []
    labels = dbscan_labels([c.position for c in centers], eps, min_pts)
    groups = []
    for lab in range(labels.max() + 1):
        groups.append([centers[i] for i in np.flatnonzero(labels == lab)])
    groups.extend([centers[i]] for i in np.flatnonzero(labels < 0))
    out = []
    for cid, members in enumerate(groups):
        clouds = [c.points if c.points is not None else c.position[None] for c in members]
        out.append(SeedCluster(members, np.concatenate(clouds), cid))
    return out


def gaussian_density(points, centers, sigma):
    """``D(p) = Σ_c exp(-|p - c|² / 2σ²)`` evaluated at each of ``points``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    D = np.zeros(len(points))
    if len(points) == 0 or len(centers) == 0:
        return D
    if len(points) * len(centers) <= 4_000_000:
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-d2 / (2.0 * sigma**2)).sum(axis=1)
    pairs = cKDTree(points).sparse_distance_matrix(
        cKDTree(centers), _KERNEL_CUTOFF * sigma, output_type="coo_matrix"
    )
    np.add.at(D, pairs.row, np.exp(-(pairs.data**2) / (2.0 * sigma**2)))
    return D


def density_field(cluster: SeedCluster, sigma=1.5e-3) -> DensityField:
    sigma = check_positive(sigma, "sigma")
    return DensityField(gaussian_density(cluster.member_cloud, cluster.center_positions, sigma), sigma)


def local_maxima_indices(M, r, D):
    """Greedy density NMS over cloud ``M``; returns indices of maxima in pop order.

    Repeatedly take the unvisited point ``s`` with the largest density (lowest
    index on ties). Its neighborhood ``R`` is every point of ``M`` at distance
    in ``(0, r)``. ``s`` is kept if ``D(s)`` is strictly greater than every
    density in ``R`` (always true for empty ``R``), then ``R`` is marked
    visited.
    """
    M = np.asarray(M, dtype=np.float64).reshape(-1, 3)
    D = np.asarray(D, dtype=np.float64).ravel()
    r = check_positive(r, "r")
    if len(D) != len(M):
        raise ValueError(f"density has {len(D)} values for {len(M)} points")
    if len(M) == 0:
        return np.zeros(0, dtype=np.int64)
    tree = cKDTree(M)
    order = np.lexsort((np.arange(len(D)), -D))
    visited = np.zeros(len(M), bool)
    keep = []
    for s in order:
        if visited[s]:
            continue
        visited[s] = True
        hood = np.asarray(tree.query_ball_point(M[s], r), dtype=np.int64)
        if len(hood):
            d = np.linalg.norm(M[hood] - M[s], axis=1)
            hood = hood[(d > 0) & (d < r)]
        if len(hood) == 0 or D[s] > D[hood].max():
            keep.append(s)
        visited[hood] = True
    return np.asarray(keep, dtype=np.int64)


def find_local_maxima(M, r, D):
    """Positions of the density maxima of ``M`` (see ``local_maxima_indices``)."""
    if isinstance(D, DensityField):
        D = D.values
    M = np.asarray(M, dtype=np.float64).reshape(-1, 3)
    return M[local_maxima_indices(M, r, D)]


def _count_cluster(cluster, sigma, r):
    # exact duplicate points carry identical density and would each survive NMS
    M = np.unique(cluster.member_cloud, axis=0)
    D = gaussian_density(M, cluster.center_positions, sigma)
    return ClusterCount(cluster.cluster_id, len(cluster.member_centers), find_local_maxima(M, r, D))


def count_clusters(clusters, sigma=1.5e-3, r=2.5e-3, workers=1) -> CountResult:
    sigma = check_positive(sigma, "sigma")
    r = check_positive(r, "r")
    if workers > 1 and len(clusters) > 1:
        with ThreadPoolExecutor(workers) as pool:
            counts = list(pool.map(lambda c: _count_cluster(c, sigma, r), clusters))
    else:
        counts = [_count_cluster(c, sigma, r) for c in clusters]
    return CountResult(counts)


def count_panicle(
    frames, poses, eps=4e-3, min_pts=2, sigma=1.5e-3, r=2.5e-3, min_confidence=0.0, depth_gate=DEPTH_GATE, workers=1
):
    centers = compute_seed_centers(frames, poses, min_confidence, depth_gate)
    clusters = cluster_centers(centers, eps, min_pts)
    return count_clusters(clusters, sigma, r, workers)


class SeedCounter(BaseEstimator):
    """Count seeds from registered frames.

    ``fit(frames, poses)`` stores ``result_`` and ``total_``; ``predict`` on a
    list of ``(frames, poses)`` pairs returns one total per panicle.
    """

    def __init__(self, eps=4e-3, min_pts=2, sigma=1.5e-3, r=2.5e-3, min_confidence=0.0, depth_gate=DEPTH_GATE, workers=1):
        self.eps = eps
        self.min_pts = min_pts
        self.sigma = sigma
        self.r = r
        self.min_confidence = min_confidence
        self.depth_gate = depth_gate
        self.workers = workers

    def _count(self, frames, poses):
        return count_panicle(
            frames, poses, self.eps, self.min_pts, self.sigma, self.r, self.min_confidence, self.depth_gate,
            self.workers,
        )

    def fit(self, frames, poses=None):
        frames = list(frames)
        if poses is None:
            poses = {f.frame_id: f.pose_prior for f in frames}
        self.result_ = self._count(frames, poses)
        self.total_ = self.result_.total
        return self

    def predict(self, panicles):
        out = []
        for frames, poses in panicles:
            frames = list(frames)
            if poses is None:
                poses = {f.frame_id: f.pose_prior for f in frames}
            out.append(self._count(frames, poses).total)
        return np.asarray(out, dtype=np.int64)
