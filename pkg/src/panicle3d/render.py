"""Square-splat z-buffer rendering of point clouds through a pinhole camera."""

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, PointCloud, RigidTransform


@dataclass
class RenderedView:
    color: np.ndarray  # (H, W, 3) uint8, black where empty
    depth: np.ndarray  # (H, W) float64, +inf where empty
    index: np.ndarray  # (H, W) int64 winning point index, -1 where empty

    @property
    def covered(self):
        return np.isfinite(self.depth)


def _splat_offsets(splat_px):
    side = max(int(splat_px), 1)
    o = np.arange(side) - (side - 1) // 2
    du, dv = np.meshgrid(o, o, indexing="xy")
    return du.ravel(), dv.ravel()


def zbuffer(points_cam, k: CameraIntrinsics, splat_px=3, near=1e-6):
    """Nearest-depth winner per pixel for camera-frame points.

    Returns ``(depth, index)``; exact depth ties go to the lowest point index so
    the result does not depend on evaluation order.
    """
    h, w = k.height, k.width
    depth = np.full(h * w, np.inf)
    index = np.full(h * w, -1, dtype=np.int64)
    pts = np.asarray(points_cam, dtype=np.float64)
    if len(pts) == 0:
        return depth.reshape(h, w), index.reshape(h, w)
    z = pts[:, 2]
    ids = np.flatnonzero(z > near)
    if len(ids) == 0:
        return depth.reshape(h, w), index.reshape(h, w)
    z = z[ids]
    u = np.floor(k.fx * pts[ids, 0] / z + k.cx).astype(np.int64)
    v = np.floor(k.fy * pts[ids, 1] / z + k.cy).astype(np.int64)
    du, dv = _splat_offsets(splat_px)
    # cull points whose whole splat misses the image
    lo, hi = du.min(), du.max()
    vis = (u + hi >= 0) & (u + lo < w) & (v + hi >= 0) & (v + lo < h)
    ids, z, u, v = ids[vis], z[vis], u[vis], v[vis]
    uu = (u[None, :] + du[:, None]).ravel()
    vv = (v[None, :] + dv[:, None]).ravel()
    zz = np.broadcast_to(z, (len(du), len(z))).ravel()
    pid = np.broadcast_to(ids, (len(du), len(ids))).ravel()
    inside = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
    pix = vv[inside] * w + uu[inside]
    zz, pid = zz[inside], pid[inside]
    np.minimum.at(depth, pix, zz)
    win = zz == depth[pix]
    owner = np.full(h * w, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(owner, pix[win], pid[win])
    filled = np.isfinite(depth)
    index[filled] = owner[filled]
    return depth.reshape(h, w), index.reshape(h, w)


def render_view(cloud: PointCloud, pose: RigidTransform, k: CameraIntrinsics, splat_px=3) -> RenderedView:
    """Render a world-frame cloud from a camera-to-world ``pose``."""
    if len(cloud) == 0:
        depth, index = zbuffer(np.zeros((0, 3)), k, splat_px)
    else:
        depth, index = zbuffer(pose.inverse().apply(cloud.positions), k, splat_px)
    color = np.zeros((k.height, k.width, 3), np.uint8)
    filled = index >= 0
    if len(cloud):
        color[filled] = cloud.colors[index[filled]]
    return RenderedView(color, depth, index)


def rasterize_mask(points_cam, k: CameraIntrinsics, splat_px=1):
    """Boolean occupancy image of camera-frame points."""
    depth, _ = zbuffer(points_cam, k, splat_px)
    return np.isfinite(depth)
