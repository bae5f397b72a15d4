"""Parametric panicle scenes with exact ground truth.

Seeds are spheres packed near the surface of an ellipsoidal body; a thin
cylinder stands in for the stem. Frames are produced by ray casting the scene
from a double ring of cameras, so depth, occlusion and visibility are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .dataset import SeedMaskSet, label_points, save_frame, write_manifest
from .geometry import CameraIntrinsics, PointCloud, RigidTransform, look_at
from .noise import PoseNoiseSpec, inject_pose_noise

SEED_RADIUS = 1.65e-3  # 3.3 mm mean seed diameter


class PackingError(RuntimeError):
    pass


@dataclass
class PanicleModel:
    seed_positions: np.ndarray
    seed_radius: float
    shell_axes: tuple
    shell_depth: tuple
    stem: tuple  # (bottom_z, top_z, radius) of a vertical cylinder on the z axis
    rng_seed: int
    seed_albedo: np.ndarray = field(repr=False, default=None)

    @property
    def n_seeds(self):
        return len(self.seed_positions)


@dataclass(frozen=True)
class DoubleRing:
    """Two horizontal camera circles around the panicle, cameras aimed inwards."""

    radius: float = 0.3
    heights: tuple = (-0.05, 0.05)
    frames_per_ring: int = 20
    look_at_fraction: float = 0.25
    phase_offset: float = 0.5
    intrinsics: CameraIntrinsics = CameraIntrinsics(480.0, 480.0, 180.0, 200.0, 360, 400)

    def poses(self):
        out = []
        for ring, h in enumerate(self.heights):
            for i in range(self.frames_per_ring):
                phi = 2 * np.pi * (i + ring * self.phase_offset) / self.frames_per_ring
                eye = (self.radius * np.cos(phi), self.radius * np.sin(phi), h)
                out.append((f"r{ring}_{i:03d}", look_at(eye, (0.0, 0.0, h * self.look_at_fraction))))
        return out


@dataclass
class VisibilityRecord:
    n_seeds: int
    frames: dict  # seed index -> list of frame ids in which the seed is detectable
    frame_ids: list = field(default_factory=list)

    def to_dict(self):
        return {
            "n_seeds": self.n_seeds,
            "frame_ids": list(self.frame_ids),
            "visible_in": {str(k): v for k, v in sorted(self.frames.items())},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["n_seeds"]), {int(k): list(v) for k, v in d["visible_in"].items()}, list(d["frame_ids"]))


# ---------------------------------------------------------------------------
# model generation


def _ellipsoid_normal(p, axes):
    n = p / np.square(axes)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def generate_panicle(
    n_seeds,
    shell_axes=(0.03, 0.03, 0.08),
    min_spacing=4e-3,
    rng=0,
    seed_radius=SEED_RADIUS,
    shell_depth=(-2.2e-3, 1.0e-3),
    asymmetry=0.0,
    asymmetry_azimuth=0.0,
    max_attempts=400,
) -> PanicleModel:
    """Pack ``n_seeds`` seeds near an ellipsoid by rejection sampling.

    A seed center sits at ``h`` along the outward body normal, ``h`` uniform in
    ``shell_depth``; seeds deep enough are hidden inside the body.
    ``asymmetry`` in [0, 1) skews seed density towards ``asymmetry_azimuth``.
    ``max_attempts`` caps candidates per requested seed.
    """
    if n_seeds < 0:
        raise ValueError("n_seeds must be >= 0")
    if not 0.0 <= asymmetry < 1.0:
        raise ValueError("asymmetry must lie in [0, 1)")
    axes = np.asarray(shell_axes, dtype=np.float64)
    gen = np.random.default_rng(rng)
    a, b, c = axes
    stem = (-c - 0.06, -0.8 * c, 4e-3)
    placed = np.zeros((0, 3))
    budget = max_attempts * max(n_seeds, 1)
    tried = 0
    batch = 256
    while len(placed) < n_seeds:
        if tried >= budget:
            raise PackingError(
                f"placed only {len(placed)} of {n_seeds} seeds at spacing {min_spacing} m; "
                "try fewer seeds or a smaller spacing"
            )
        tried += batch
        u = gen.normal(size=(batch, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        # area-uniform sampling on the ellipsoid
        w = np.linalg.norm(u * np.array([b * c, a * c, a * b]), axis=1) / max(b * c, a * c, a * b)
        if asymmetry > 0:
            phi = np.arctan2(u[:, 1], u[:, 0])
            w = w * (1 + asymmetry * np.cos(phi - asymmetry_azimuth)) / (1 + asymmetry)
        keep = gen.random(batch) < w
        h = gen.uniform(shell_depth[0], shell_depth[1], batch)
        surf = u * axes
        cand = surf + _ellipsoid_normal(surf, axes) * h[:, None]
        for p in cand[keep]:
            if len(placed) >= n_seeds:
                break
            if len(placed) and np.min(np.sum((placed - p) ** 2, axis=1)) < min_spacing**2:
                continue
            placed = np.vstack([placed, p])
    base = np.array([196.0, 132.0, 64.0])
    albedo = np.clip(base * gen.uniform(0.85, 1.15, (n_seeds, 1)), 0, 255)
    return PanicleModel(placed, float(seed_radius), tuple(axes), tuple(shell_depth), stem, int(rng) if np.isscalar(rng) else 0, albedo)


# ---------------------------------------------------------------------------
# ray casting

KIND_NONE, KIND_BODY, KIND_STEM, KIND_SEED = 0, 1, 2, 3


@dataclass
class RayCast:
    depth: np.ndarray  # camera z-depth, +inf where nothing is hit
    kind: np.ndarray
    seed: np.ndarray  # seed index where kind == KIND_SEED else -1
    color: np.ndarray  # (H, W, 3) uint8
    points: np.ndarray  # (H, W, 3) world coordinates of hits


def _pixel_rays(k: CameraIntrinsics):
    u, v = np.meshgrid(np.arange(k.width) + 0.5, np.arange(k.height) + 0.5)
    # unit z component: ray parameter equals camera depth
    return np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)


def _body_texture(p):
    s = (
        np.sin(p[..., 0] * 1100 + 0.3)
        + np.sin(p[..., 1] * 900 + p[..., 2] * 400)
        + np.sin(p[..., 2] * 1300 - p[..., 0] * 300)
    )
    return 0.8 + 0.2 * s / 3.0


def raycast(model: PanicleModel, pose: RigidTransform, k: CameraIntrinsics) -> RayCast:
    h, w = k.height, k.width
    R = pose.rotation_matrix
    o = pose.translation
    d_cam = _pixel_rays(k).reshape(-1, 3)
    d = d_cam @ R.T
    n_px = len(d)
    depth = np.full(n_px, np.inf)
    kind = np.zeros(n_px, np.int8)
    seed = np.full(n_px, -1, np.int64)

    # body ellipsoid
    axes = np.asarray(model.shell_axes)
    o_s, d_s = o / axes, d / axes
    A = np.sum(d_s * d_s, axis=1)
    B = 2 * d_s @ o_s
    C = o_s @ o_s - 1.0
    disc = B * B - 4 * A * C
    ok = disc >= 0
    t = np.full(n_px, np.inf)
    t[ok] = (-B[ok] - np.sqrt(disc[ok])) / (2 * A[ok])
    t[t <= 0] = np.inf
    closer = t < depth
    depth[closer], kind[closer] = t[closer], KIND_BODY

    # stem cylinder around the world z axis
    z0, z1, rs = model.stem
    A = d[:, 0] ** 2 + d[:, 1] ** 2
    B = 2 * (o[0] * d[:, 0] + o[1] * d[:, 1])
    C = o[0] ** 2 + o[1] ** 2 - rs**2
    disc = B * B - 4 * A * C
    ok = (disc >= 0) & (A > 0)
    t = np.full(n_px, np.inf)
    t[ok] = (-B[ok] - np.sqrt(disc[ok])) / (2 * A[ok])
    zhit = o[2] + t * d[:, 2]
    t[(t <= 0) | (zhit < z0) | (zhit > z1)] = np.inf
    closer = t < depth
    depth[closer], kind[closer] = t[closer], KIND_STEM

    # seeds: test only pixels inside each sphere's bounding box
    if model.n_seeds:
        rad = model.seed_radius
        c_cam = (model.seed_positions - o) @ R
        front = np.flatnonzero(c_cam[:, 2] > rad * 1.5)
        cc = c_cam[front]
        u0 = k.fx * cc[:, 0] / cc[:, 2] + k.cx
        v0 = k.fy * cc[:, 1] / cc[:, 2] + k.cy
        half = int(np.ceil(max(k.fx, k.fy) * rad / np.min(cc[:, 2] - rad))) + 1 if len(cc) else 0
        off = np.arange(-half, half + 1)
        ou, ov = np.meshgrid(off, off)
        pu = (np.floor(u0)[:, None] + ou.ravel()[None, :]).astype(np.int64)
        pv = (np.floor(v0)[:, None] + ov.ravel()[None, :]).astype(np.int64)
        sid = np.broadcast_to(np.arange(len(front))[:, None], pu.shape)
        inside = (pu >= 0) & (pu < w) & (pv >= 0) & (pv < h)
        pu, pv, sid = pu[inside], pv[inside], sid[inside]
        pix = pv * w + pu
        ray = d_cam[pix]
        cen = cc[sid]
        a2 = np.sum(ray * ray, axis=1)
        b2 = np.sum(ray * cen, axis=1)
        c2 = np.sum(cen * cen, axis=1) - rad**2
        disc = b2 * b2 - a2 * c2
        hit = disc >= 0
        t = (b2[hit] - np.sqrt(disc[hit])) / a2[hit]
        pix, sid = pix[hit], sid[hit]
        best = np.full(n_px, np.inf)
        np.minimum.at(best, pix, t)
        win = t == best[pix]
        owner = np.full(n_px, np.iinfo(np.int64).max)
        np.minimum.at(owner, pix[win], front[sid[win]])
        closer = best < depth
        depth[closer], kind[closer] = best[closer], KIND_SEED
        seed[closer] = owner[closer]

    hitmask = np.isfinite(depth)
    pts = np.zeros((n_px, 3))
    pts[hitmask] = o + depth[hitmask, None] * d[hitmask]
    # view-independent shading so every camera sees the same surface colors
    color = np.zeros((n_px, 3))
    m = kind == KIND_BODY
    if m.any():
        color[m] = np.array([120.0, 128.0, 72.0]) * _body_texture(pts[m])[:, None]
    m = kind == KIND_STEM
    if m.any():
        color[m] = np.array([90.0, 130.0, 50.0])
    m = kind == KIND_SEED
    if m.any():
        centers = model.seed_positions[seed[m]]
        nrm = (pts[m] - centers) / model.seed_radius
        up = _ellipsoid_normal(centers, axes)
        shade = 0.25 + 0.75 * np.clip(np.sum(nrm * up, axis=1), 0, 1)
        color[m] = model.seed_albedo[seed[m]] * shade[:, None]
    color = np.clip(np.round(color), 0, 255).astype(np.uint8)
    return RayCast(
        depth.reshape(h, w), kind.reshape(h, w), seed.reshape(h, w), color.reshape(h, w, 3), pts.reshape(h, w, 3)
    )


def seed_visibility(model: PanicleModel, cast: RayCast, pose: RigidTransform, k: CameraIntrinsics, min_fraction):
    """Seeds whose visible pixel count reaches ``min_fraction`` of the projected disk.

    Returns ``(indices, visible_fraction)``.
    """
    counts = np.bincount(cast.seed[cast.seed >= 0], minlength=model.n_seeds)
    cand = np.flatnonzero(counts)
    if len(cand) == 0:
        return cand, np.zeros(0)
    c_cam = pose.inverse().apply(model.seed_positions[cand])
    disk = np.pi * (k.fx * model.seed_radius / c_cam[:, 2]) * (k.fy * model.seed_radius / c_cam[:, 2])
    frac = counts[cand] / disk
    keep = frac >= min_fraction
    return cand[keep], frac[keep]


# ---------------------------------------------------------------------------
# dataset synthesis


@dataclass
class SyntheticFrame:
    frame_id: str
    true_pose: RigidTransform
    cloud: PointCloud  # camera frame
    masks: SeedMaskSet
    rgb: np.ndarray
    visible: np.ndarray
    instance_seed: dict  # instance id -> seed index


def synthesize_frame(
    model, frame_id, pose, k, index, point_noise_sigma=0.0, detection_miss_rate=0.0,
    confidence_noise=0.03, min_visible_fraction=0.5, rng=0, blur_sigma=1.0, nonseed_depth_sigma=0.0,
):
    gen = np.random.default_rng([int(rng), 7919, index])
    cast = raycast(model, pose, k)
    visible, frac = seed_visibility(model, cast, pose, k, min_visible_fraction)
    hit = gen.random(len(visible)) >= detection_miss_rate
    detected = visible[hit]
    # detector confidence tracks how much of the seed is in view
    conf = np.clip(0.35 + 0.6 * np.minimum(frac[hit], 1.0) + gen.normal(0, confidence_noise, len(detected)), 0, 1)
    labels = np.zeros((k.height, k.width), np.uint16)
    lut = np.zeros(model.n_seeds + 1, np.uint16)
    lut[detected] = np.arange(1, len(detected) + 1)
    seeded = cast.seed >= 0
    labels[seeded] = lut[cast.seed[seeded]]
    masks = SeedMaskSet(labels, {i + 1: round(float(c), 4) for i, c in enumerate(conf)})

    vv, uu = np.nonzero(np.isfinite(cast.depth))
    z = cast.depth[vv, uu]
    pts = np.column_stack([(uu + 0.5 - k.cx) / k.fx * z, (vv + 0.5 - k.cy) / k.fy * z, z])
    if point_noise_sigma > 0:
        pts = pts + gen.normal(0.0, point_noise_sigma, pts.shape)
    if nonseed_depth_sigma > 0:
        # stereo-like depth error along the ray on dark, low-texture non-seed surfaces
        plain = cast.kind[vv, uu] != KIND_SEED
        dz = gen.normal(0.0, nonseed_depth_sigma, int(plain.sum()))
        pts[plain] *= (1.0 + dz / pts[plain, 2])[:, None]
    pts = pts.astype(np.float32).astype(np.float64)  # stored precision
    lab, cf = label_points(pts, masks, k)
    rgb = cast.color
    if blur_sigma > 0:
        # optical blur; point colors are sampled from the blurred image
        rgb = gaussian_filter(rgb.astype(np.float64), (blur_sigma, blur_sigma, 0), mode="constant")
        rgb = np.clip(np.round(rgb), 0, 255).astype(np.uint8)
    cloud = PointCloud(pts, rgb[vv, uu], lab, cf)
    inst = {i + 1: int(s) for i, s in enumerate(detected)}
    return SyntheticFrame(frame_id, pose, cloud, masks, rgb, visible, inst)


def synthesize_dataset(
    model: PanicleModel,
    out_dir,
    trajectory: DoubleRing = DoubleRing(),
    point_noise_sigma=0.0,
    detection_miss_rate=0.0,
    rng=0,
    prior_noise: PoseNoiseSpec | None = None,
    min_visible_fraction=0.5,
    panicle_id="synthetic",
    ground_truth_weight=None,
    blur_sigma=1.0,
    nonseed_depth_sigma=0.0,
):
    """Write a dataset for ``model`` and return ``(manifest_path, VisibilityRecord)``.

    Pose priors equal the true poses unless ``prior_noise`` is given. A
    ``truth.json`` sidecar holds true poses, seed positions and visibility.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    k = trajectory.intrinsics
    ids_poses = trajectory.poses()
    true = {fid: p for fid, p in ids_poses}
    priors = inject_pose_noise(true, prior_noise) if prior_noise is not None else dict(true)
    entries = []
    visible_in = {}
    detections = {}
    for index, (fid, pose) in enumerate(ids_poses):
        fr = synthesize_frame(
            model, fid, pose, k, index, point_noise_sigma, detection_miss_rate,
            min_visible_fraction=min_visible_fraction, rng=rng, blur_sigma=blur_sigma,
            nonseed_depth_sigma=nonseed_depth_sigma,
        )
        entries.append(save_frame(out_dir, fid, fr.cloud, fr.masks, priors[fid], k, fr.rgb))
        for s in fr.visible:
            visible_in.setdefault(int(s), []).append(fid)
        detections[fid] = {str(i): s for i, s in fr.instance_seed.items()}
    record = VisibilityRecord(model.n_seeds, visible_in, [fid for fid, _ in ids_poses])
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, panicle_id, entries, model.n_seeds, ground_truth_weight)
    truth = {
        "n_seeds": model.n_seeds,
        "visible_count": visible_count_oracle(record),
        "seed_radius": model.seed_radius,
        "seed_positions": model.seed_positions.tolist(),
        "true_poses": {fid: p.to_dict() for fid, p in ids_poses},
        "detections": detections,
        "visibility": record.to_dict(),
    }
    (out_dir / "truth.json").write_text(json.dumps(truth, indent=1))
    return manifest, record


def load_truth(dataset_dir):
    doc = json.loads((Path(dataset_dir) / "truth.json").read_text())
    doc["true_poses"] = {k: RigidTransform.from_dict(v) for k, v in doc["true_poses"].items()}
    doc["visibility"] = VisibilityRecord.from_dict(doc["visibility"])
    doc["seed_positions"] = np.asarray(doc["seed_positions"])
    return doc


def visible_count_oracle(record: VisibilityRecord) -> int:
    """Number of seeds detectable in at least one frame."""
    return sum(1 for frames in record.frames.values() if frames)
