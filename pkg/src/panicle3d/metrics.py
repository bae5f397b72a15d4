"""Reference-free reconstruction scores from image/render patch pairs.

For sampled seeds, a circular grayscale patch of the captured image (alpha)
is compared with the same footprint of the fused cloud rendered from that
camera (beta): gradient MSE and Laplacian SSIM, averaged per panicle and then
over panicles.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .geometry import CameraIntrinsics, PointCloud
from .noise import PoseNoiseSpec, inject_pose_noise
from .registration import fuse_clouds
from .render import RenderedView, render_view
from .validation import check_fraction, check_int

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
C1 = (0.01 * 255) ** 2
C2 = (0.03 * 255) ** 2
# fusion voxel for scoring: ~2 px at 0.3 m so 3 px splats close the surface
FUSE_VOXEL = 1.5e-3


class MetricError(ValueError):
    pass


class PatchOutOfBounds(ValueError):
    pass


@dataclass
class PatchPair:
    alpha: np.ndarray  # normalized grayscale patch of the image, (2R+1, 2R+1)
    beta: np.ndarray  # same footprint of the render
    footprint: np.ndarray  # bool disk
    seed: tuple = ()
    radius: int = 0


@dataclass(frozen=True)
class SeedScore:
    panicle_id: str
    frame_id: str
    instance_id: int
    mse: float
    ssim: float


@dataclass
class MetricReport:
    per_seed: list
    per_image: dict
    per_panicle: dict
    ab_mse: float
    ab_ssim: float
    samples_per_image: dict
    skipped: list = field(default_factory=list)

    def to_dict(self):
        return {
            "ab_mse": self.ab_mse,
            "ab_ssim": self.ab_ssim,
            "per_panicle": {p: {"mse": m, "ssim": s} for p, (m, s) in self.per_panicle.items()},
            "per_image": [
                {"panicle": p, "frame": f, "mse": m, "ssim": s, "k": self.samples_per_image[(p, f)]}
                for (p, f), (m, s) in self.per_image.items()
            ],
            "per_seed": [
                {"panicle": s.panicle_id, "frame": s.frame_id, "instance": s.instance_id, "mse": s.mse, "ssim": s.ssim}
                for s in self.per_seed
            ],
            "skipped": [list(s) for s in self.skipped],
        }


# ---------------------------------------------------------------------------
# patches


def grayscale(rgb):
    return np.asarray(rgb, dtype=np.float64)[..., :3] @ LUMA


def disk(radius):
    o = np.arange(-radius, radius + 1)
    return (o[None, :] ** 2 + o[:, None] ** 2) <= radius**2


def normalize_patch(values, footprint):
    """Min-max map the footprint's values onto [0, 255]; constant patches become zero."""
    out = np.zeros(values.shape)
    v = values[footprint]
    lo, hi = v.min(), v.max()
    if hi > lo:
        out[footprint] = (v - lo) * (255.0 / (hi - lo))
    return out


def _crop(img, cu, cv, radius):
    h, w = img.shape[:2]
    if cu - radius < 0 or cv - radius < 0 or cu + radius >= w or cv + radius >= h:
        raise PatchOutOfBounds(f"circle of radius {radius} at ({cu}, {cv}) leaves the {w}x{h} image")
    return img[cv - radius : cv + radius + 1, cu - radius : cu + radius + 1]


def extract_patch_pair(rgb, render, seed_center_px, radius_px=15, seed=()) -> PatchPair:
    """Circular grayscale patches of ``rgb`` and ``render`` around a pixel position.

    ``seed_center_px`` is ``(u, v)`` in continuous pixel coordinates; the disk
    is centered on the pixel containing it.
    """
    radius = check_int(radius_px, "radius_px", minimum=1)
    cu, cv = (int(np.floor(c)) for c in seed_center_px)
    fp = disk(radius)
    a = normalize_patch(grayscale(_crop(rgb, cu, cv, radius)), fp)
    b = normalize_patch(grayscale(_crop(render, cu, cv, radius)), fp)
    return PatchPair(a, b, fp, tuple(seed), radius)


def _stencil_valid(fp):
    """Pixels whose 4 neighbors all lie in the footprint."""
    v = fp.copy()
    v[1:, :] &= fp[:-1, :]
    v[:-1, :] &= fp[1:, :]
    v[:, 1:] &= fp[:, :-1]
    v[:, :-1] &= fp[:, 1:]
    v[0, :] = v[-1, :] = v[:, 0] = v[:, -1] = False
    return v


def _gradient(p):
    gu = np.zeros(p.shape)
    gv = np.zeros(p.shape)
    gu[:, 1:-1] = (p[:, 2:] - p[:, :-2]) / 2.0
    gv[1:-1, :] = (p[2:, :] - p[:-2, :]) / 2.0
    return gu, gv


def _laplacian(p):
    out = np.zeros(p.shape)
    out[1:-1, 1:-1] = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * p[1:-1, 1:-1]
    return out


def patch_mse(pair: PatchPair) -> float:
    """Mean over valid-stencil pixels of the squared central-difference gradient difference."""
    valid = _stencil_valid(pair.footprint)
    if not valid.any():
        raise MetricError("patch footprint has no pixel with a full gradient stencil")
    au, av = _gradient(pair.alpha)
    bu, bv = _gradient(pair.beta)
    d = (au - bu) ** 2 + (av - bv) ** 2
    return float(d[valid].mean())


def ssim_global(x, y):
    """Single-window SSIM of two equally sized samples (dynamic range 255)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cxy = ((x - mx) * (y - my)).mean()
    return float(((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2)))


def patch_ssim(pair: PatchPair) -> float:
    """SSIM of the 4-neighbor Laplacians over valid-stencil pixels."""
    valid = _stencil_valid(pair.footprint)
    if not valid.any():
        raise MetricError("patch footprint has no pixel with a full Laplacian stencil")
    return ssim_global(_laplacian(pair.alpha)[valid], _laplacian(pair.beta)[valid])


# ---------------------------------------------------------------------------
# seed sampling


def sample_seeds_lambda(frame, K=5, band_fraction=0.5):
    """Up to ``K`` detected seeds nearest the image's vertical center line.

    Only seeds whose mask centroid lies in the central band of width
    ``band_fraction * width`` are considered. Ties in distance go to the
    smaller ``u``. Returns ``[(instance_id, (u, v)), ...]``.
    """
    K = check_int(K, "K", minimum=1)
    band_fraction = check_fraction(band_fraction, "band_fraction")
    masks = frame.masks
    if masks is None or len(masks) == 0:
        return []
    width = masks.shape[1]
    mid = width / 2.0
    half = band_fraction * width / 2.0
    cands = []
    for inst in masks.instance_ids:
        u, v = masks.centroid(inst)
        if abs(u - mid) <= half:
            cands.append((abs(u - mid), u, int(inst), (u, v)))
    cands.sort(key=lambda c: (c[0], c[1], c[2]))
    picked = [(inst, uv) for _, _, inst, uv in cands[:K]]
    if len(picked) < K:
        logger.info("frame %r: %d of %d requested seeds available", frame.frame_id, len(picked), K)
    return picked


# ---------------------------------------------------------------------------
# aggregation


def _mean(values):
    return math.fsum(values) / len(values)


def aggregate_metrics(scores, skipped=()) -> MetricReport:
    """Per-panicle mean over all sampled seeds, then the mean over panicles."""
    scores = list(scores)
    if not scores:
        raise MetricError("no sampled seeds to aggregate")
    by_image, by_panicle = {}, {}
    for s in scores:
        by_image.setdefault((s.panicle_id, s.frame_id), []).append(s)
        by_panicle.setdefault(s.panicle_id, []).append(s)
    per_image = {k: (_mean([s.mse for s in v]), _mean([s.ssim for s in v])) for k, v in by_image.items()}
    per_panicle = {k: (_mean([s.mse for s in v]), _mean([s.ssim for s in v])) for k, v in by_panicle.items()}
    ab_mse = _mean([m for m, _ in per_panicle.values()])
    ab_ssim = _mean([s for _, s in per_panicle.values()])
    counts = {k: len(v) for k, v in by_image.items()}
    return MetricReport(scores, per_image, per_panicle, ab_mse, ab_ssim, counts, list(skipped))


# ---------------------------------------------------------------------------
# scoring a reconstruction


def _render_window(cloud: PointCloud, pose, k: CameraIntrinsics, centers, radius, splat_px):
    """Render only points that can land in the sampled patches."""
    if len(cloud) == 0 or not centers:
        return render_view(PointCloud.empty(), pose, k, splat_px)
    cam = pose.inverse().apply(cloud.positions)
    z = cam[:, 2]
    front = z > 1e-6
    u = np.full(len(z), -1e9)
    v = np.full(len(z), -1e9)
    u[front] = k.fx * cam[front, 0] / z[front] + k.cx
    v[front] = k.fy * cam[front, 1] / z[front] + k.cy
    reach = radius + splat_px + 1
    keep = np.zeros(len(z), bool)
    for cu, cv in centers:
        keep |= (np.abs(u - cu) <= reach) & (np.abs(v - cv) <= reach)
    return render_view(cloud.select(keep & front), pose, k, splat_px)


def score_frames(frames, poses, cloud=None, K=5, patch_radius=15, band_fraction=0.5, splat_px=3,
                 panicle_id="panicle", voxel=FUSE_VOXEL):
    """Per-seed scores for one panicle plus the list of skipped seeds.

    ``cloud`` defaults to the frames fused with ``poses``; each frame is
    rendered from its own pose in ``poses``.
    """
    frames = list(frames)
    if cloud is None:
        cloud = fuse_clouds(frames, poses, voxel)
    scores, skipped = [], []
    for frame in frames:
        picks = sample_seeds_lambda(frame, K, band_fraction)
        if not picks or frame.rgb is None:
            continue
        view = _render_window(cloud, poses[frame.frame_id], frame.intrinsics,
                              [uv for _, uv in picks], patch_radius, splat_px)
        for inst, uv in picks:
            try:
                pair = extract_patch_pair(frame.rgb, view.color, uv, patch_radius, (frame.frame_id, inst))
            except PatchOutOfBounds:
                skipped.append((panicle_id, frame.frame_id, inst))
                continue
            scores.append(SeedScore(panicle_id, frame.frame_id, inst, patch_mse(pair), patch_ssim(pair)))
    return scores, skipped


def assess_reconstruction(frames, poses, cloud=None, K=5, patch_radius=15, band_fraction=0.5, splat_px=3,
                          panicle_id="panicle", voxel=FUSE_VOXEL) -> MetricReport:
    scores, skipped = score_frames(frames, poses, cloud, K, patch_radius, band_fraction, splat_px, panicle_id, voxel)
    return aggregate_metrics(scores, skipped)


def noise_response_curve(frames, poses, scales, K=5, seed=0, patch_radius=15, band_fraction=0.5, splat_px=3,
                         voxel=FUSE_VOXEL, panicle_id="panicle"):
    """Rows ``(scale, ab_mse, ab_ssim)`` for pose noise of increasing scale.

    At each scale the cloud is re-fused from perturbed poses and scored
    against the images through the unperturbed ``poses``, so the rows measure
    how far the perturbed cloud drifts from what the cameras saw.
    """
    frames = list(frames)
    poses = dict(poses)
    rows = []
    for scale in scales:
        noisy = inject_pose_noise(poses, PoseNoiseSpec(float(scale), seed))
        cloud = fuse_clouds(frames, noisy, voxel)
        rep = assess_reconstruction(frames, poses, cloud, K, patch_radius, band_fraction, splat_px, panicle_id)
        rows.append((float(scale), rep.ab_mse, rep.ab_ssim))
    return rows


def write_curve_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scale", "ab_mse", "ab_ssim"])
        for scale, m, s in rows:
            w.writerow([repr(float(scale)), repr(float(m)), repr(float(s))])


def save_render_png(view: RenderedView, path):
    from PIL import Image

    Image.fromarray(view.color).save(path)


class ReconstructionScorer(BaseEstimator):
    """αβ scores of registered frames.

    ``fit(frames, poses)`` stores ``report_``; ``score`` returns the negated
    αβ-MSE so that larger is better.
    """

    def __init__(self, K=5, patch_radius=15, band_fraction=0.5, splat_px=3, voxel=FUSE_VOXEL):
        self.K = K
        self.patch_radius = patch_radius
        self.band_fraction = band_fraction
        self.splat_px = splat_px
        self.voxel = voxel

    def fit(self, frames, poses=None):
        frames = list(frames)
        if poses is None:
            poses = {f.frame_id: f.pose_prior for f in frames}
        self.report_ = assess_reconstruction(
            frames, poses, None, self.K, self.patch_radius, self.band_fraction, self.splat_px, voxel=self.voxel
        )
        return self

    def score(self, frames, poses=None):
        return -self.fit(frames, poses).report_.ab_mse
