"""On-disk dataset layout, frame loading and double-ring frame selection.

A dataset is one JSON manifest per panicle::

    {"panicle_id": "p001", "ground_truth_count": 812, "ground_truth_weight_g": 21.4,
     "frames": [{"frame_id": "r0_000", "cloud": "clouds/r0_000.ply",
                 "masks": "masks/r0_000.png", "mask_meta": "masks/r0_000.json",
                 "rgb": "rgb/r0_000.png",
                 "pose": {"q": [w, x, y, z], "t": [x, y, z]},
                 "intrinsics": {"fx": .., "fy": .., "cx": .., "cy": .., "width": .., "height": ..}}]}

Paths are relative to the manifest. Clouds are stored in the camera frame,
poses are camera-to-world. Masks are 16-bit label images (0 = background,
``k`` = instance ``k``) with a JSON sidecar ``{"confidence": {"k": c}}``.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, PointCloud, RigidTransform
from .ply import PlyError, read_ply, write_ply

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Raised when a manifest or one of its frames cannot be loaded."""


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    cloud_path: Path
    mask_path: Path
    mask_meta_path: Path
    pose_prior: RigidTransform
    intrinsics: CameraIntrinsics
    rgb_path: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    panicle_id: str
    frames: tuple
    ground_truth_count: int | None = None
    ground_truth_weight: float | None = None
    root: Path = Path(".")


class SeedMaskSet:
    """Instance masks of one image: a label image and per-instance confidences."""

    def __init__(self, labels, confidence):
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise ValueError("label image must be 2-D")
        self.labels = labels.astype(np.uint16)
        self.confidence = {int(k): float(v) for k, v in confidence.items()}
        present = set(np.unique(self.labels).tolist()) - {0}
        missing = present - set(self.confidence)
        if missing:
            raise ValueError(f"instances without confidence: {sorted(missing)}")
        for k, c in self.confidence.items():
            if k < 1:
                raise ValueError(f"instance ids start at 1, got {k}")
            if not 0.0 <= c <= 1.0:
                raise ValueError(f"confidence of instance {k} outside [0, 1]: {c}")

    @property
    def shape(self):
        return self.labels.shape

    @property
    def instance_ids(self):
        return sorted(self.confidence)

    def __len__(self):
        return len(self.confidence)

    def pixels(self, instance_id):
        """``(v, u)`` row/column coordinates of one instance."""
        return np.argwhere(self.labels == instance_id)

    def centroid(self, instance_id):
        """Mask centroid as ``(u, v)`` at pixel centers; None for an empty mask."""
        px = self.pixels(instance_id)
        if len(px) == 0:
            return None
        return px[:, ::-1].mean(axis=0) + 0.5

    def rle(self, instance_id):
        """Run-length encoding as ``[(row, col_start, length), ...]``."""
        runs = []
        mask = self.labels == instance_id
        for row in np.flatnonzero(mask.any(axis=1)):
            line = np.concatenate([[0], mask[row].astype(np.int8), [0]])
            edges = np.flatnonzero(np.diff(line))
            for start, stop in zip(edges[::2], edges[1::2]):
                runs.append((int(row), int(start), int(stop - start)))
        return runs

    def save(self, label_path, meta_path):
        Image.fromarray(self.labels).save(label_path)
        meta = {"confidence": {str(k): self.confidence[k] for k in self.instance_ids}}
        Path(meta_path).write_text(json.dumps(meta, indent=1, sort_keys=False))

    @classmethod
    def load(cls, label_path, meta_path) -> SeedMaskSet:
        labels = np.asarray(Image.open(label_path))
        meta = json.loads(Path(meta_path).read_text())
        return cls(labels, meta.get("confidence", {}))


@dataclass
class Frame:
    """A loaded view: camera-frame cloud with mask-projected labels."""

    frame_id: str
    cloud: PointCloud
    intrinsics: CameraIntrinsics
    pose_prior: RigidTransform
    masks: SeedMaskSet
    rgb: np.ndarray | None = None
    record: FrameRecord | None = field(default=None, repr=False)

    @property
    def n_detections(self):
        return len(self.masks)


@dataclass
class Dataset:
    manifest: DatasetManifest
    frames: list

    @property
    def panicle_id(self):
        return self.manifest.panicle_id

    def poses(self):
        return {f.frame_id: f.pose_prior for f in self.frames}


def label_points(positions, masks: SeedMaskSet, k: CameraIntrinsics):
    """Per-point instance label and confidence from the mask at each projected pixel.

    Camera-frame points outside the image or behind the camera stay unlabeled.
    """
    n = len(positions)
    labels = np.full(n, -1, np.int32)
    conf = np.zeros(n, np.float32)
    if n == 0:
        return labels, conf
    z = positions[:, 2]
    front = z > 0
    u = np.full(n, -1, np.int64)
    v = np.full(n, -1, np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        u[front] = np.floor(k.fx * positions[front, 0] / z[front] + k.cx).astype(np.int64)
        v[front] = np.floor(k.fy * positions[front, 1] / z[front] + k.cy).astype(np.int64)
    inside = front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    lab = np.zeros(n, np.int64)
    lab[inside] = masks.labels[v[inside], u[inside]]
    hit = lab > 0
    labels[hit] = lab[hit]
    if hit.any():
        ids = np.array(masks.instance_ids, dtype=np.int64)
        table = np.zeros(int(ids.max()) + 1, np.float32)
        table[ids] = [masks.confidence[i] for i in ids]
        conf[hit] = table[lab[hit]]
    return labels, conf


def _resolve(root, value, frame_id, key):
    if value is None:
        raise DatasetError(f"frame {frame_id!r}: missing {key!r}")
    return (root / value).resolve()


def read_manifest(manifest_path) -> DatasetManifest:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON ({exc})") from exc
    root = manifest_path.parent
    if "panicle_id" not in doc:
        raise DatasetError(f"{manifest_path}: missing 'panicle_id'")
    raw_frames = doc.get("frames") or []
    if len(raw_frames) < 2:
        raise DatasetError("dataset requires ≥ 2 frames")
    records = []
    seen = set()
    for i, fr in enumerate(raw_frames):
        fid = str(fr.get("frame_id", f"#{i}"))
        if fid in seen:
            raise DatasetError(f"duplicate frame_id {fid!r}")
        seen.add(fid)
        try:
            pose = RigidTransform.from_dict(fr["pose"])
            intr = CameraIntrinsics.from_dict(fr["intrinsics"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"frame {fid!r}: malformed pose/intrinsics ({exc})") from exc
        records.append(
            FrameRecord(
                frame_id=fid,
                cloud_path=_resolve(root, fr.get("cloud"), fid, "cloud"),
                mask_path=_resolve(root, fr.get("masks"), fid, "masks"),
                mask_meta_path=_resolve(root, fr.get("mask_meta"), fid, "mask_meta"),
                pose_prior=pose,
                intrinsics=intr,
                rgb_path=_resolve(root, fr["rgb"], fid, "rgb") if fr.get("rgb") else None,
            )
        )
    gt_count = doc.get("ground_truth_count")
    gt_weight = doc.get("ground_truth_weight_g")
    for name, value in (("ground_truth_count", gt_count), ("ground_truth_weight_g", gt_weight)):
        if value is not None and value < 0:
            raise DatasetError(f"{name} must be non-negative")
    return DatasetManifest(
        panicle_id=str(doc["panicle_id"]),
        frames=tuple(records),
        ground_truth_count=None if gt_count is None else int(gt_count),
        ground_truth_weight=None if gt_weight is None else float(gt_weight),
        root=root,
    )


def load_frame(record: FrameRecord) -> Frame:
    fid = record.frame_id
    try:
        cloud = read_ply(record.cloud_path)
        masks = SeedMaskSet.load(record.mask_path, record.mask_meta_path)
        rgb = np.asarray(Image.open(record.rgb_path).convert("RGB")) if record.rgb_path else None
    except (OSError, PlyError, ValueError, json.JSONDecodeError) as exc:
        raise DatasetError(f"frame {fid!r}: {exc}") from exc
    k = record.intrinsics
    if masks.shape != (k.height, k.width):
        raise DatasetError(
            f"frame {fid!r}: mask size {masks.shape[1]}x{masks.shape[0]} does not match "
            f"intrinsics {k.width}x{k.height}"
        )
    if rgb is not None and rgb.shape[:2] != (k.height, k.width):
        raise DatasetError(f"frame {fid!r}: rgb size does not match intrinsics")
    labels, conf = label_points(cloud.positions, masks, k)
    cloud = PointCloud(cloud.positions, cloud.colors, labels, conf)
    return Frame(fid, cloud, k, record.pose_prior, masks, rgb, record)


def load_dataset(manifest_path, workers: int = 1) -> Dataset:
    """Load a manifest and all of its frames (frames load independently)."""
    manifest = read_manifest(manifest_path)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            frames = list(pool.map(load_frame, manifest.frames))
    else:
        frames = [load_frame(r) for r in manifest.frames]
    return Dataset(manifest, frames)


def save_frame(root, frame_id, cloud: PointCloud, masks: SeedMaskSet, pose, intrinsics, rgb=None) -> dict:
    """Write one frame's files under ``root`` and return its manifest entry."""
    root = Path(root)
    for sub in ("clouds", "masks", "rgb"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entry = {
        "frame_id": frame_id,
        "cloud": f"clouds/{frame_id}.ply",
        "masks": f"masks/{frame_id}.png",
        "mask_meta": f"masks/{frame_id}.json",
    }
    write_ply(root / entry["cloud"], cloud)
    masks.save(root / entry["masks"], root / entry["mask_meta"])
    if rgb is not None:
        entry["rgb"] = f"rgb/{frame_id}.png"
        Image.fromarray(np.asarray(rgb, np.uint8)).save(root / entry["rgb"])
    entry["pose"] = pose.to_dict()
    entry["intrinsics"] = intrinsics.to_dict()
    return entry


def write_manifest(path, panicle_id, entries, ground_truth_count=None, ground_truth_weight=None):
    doc = {"panicle_id": panicle_id}
    if ground_truth_count is not None:
        doc["ground_truth_count"] = int(ground_truth_count)
    if ground_truth_weight is not None:
        doc["ground_truth_weight_g"] = float(ground_truth_weight)
    doc["frames"] = list(entries)
    Path(path).write_text(json.dumps(doc, indent=1))


def write_pose_manifest(path, dataset: Dataset, poses) -> Path:
    """Write a manifest for ``dataset`` whose poses are replaced by ``poses``.

    File references are absolute so the manifest loads from any directory.
    """
    entries = []
    for f in dataset.frames:
        r = f.record
        if r is None:
            raise DatasetError(f"frame {f.frame_id!r} was not loaded from disk")
        entry = {
            "frame_id": f.frame_id,
            "cloud": str(r.cloud_path),
            "masks": str(r.mask_path),
            "mask_meta": str(r.mask_meta_path),
        }
        if r.rgb_path is not None:
            entry["rgb"] = str(r.rgb_path)
        entry["pose"] = poses.get(f.frame_id, f.pose_prior).to_dict()
        entry["intrinsics"] = f.intrinsics.to_dict()
        entries.append(entry)
    m = dataset.manifest
    write_manifest(path, m.panicle_id, entries, m.ground_truth_count, m.ground_truth_weight)
    return Path(path)


def save_dataset(dataset: Dataset, out_dir, poses=None) -> Path:
    """Write a loaded dataset (optionally with replacement poses) to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for f in dataset.frames:
        pose = poses[f.frame_id] if poses is not None else f.pose_prior
        entries.append(save_frame(out_dir, f.frame_id, f.cloud, f.masks, pose, f.intrinsics, f.rgb))
    m = dataset.manifest
    path = out_dir / "manifest.json"
    write_manifest(path, m.panicle_id, entries, m.ground_truth_count, m.ground_truth_weight)
    return path


# ---------------------------------------------------------------------------
# frame selection


def _ring_membership(heights, ring_count):
    """1-D k-means of camera heights; ring 0 is the lowest."""
    heights = np.asarray(heights, dtype=np.float64)
    if ring_count == 1 or len(heights) <= 1:
        return np.zeros(len(heights), dtype=int)
    centers = np.quantile(heights, (np.arange(ring_count) + 0.5) / ring_count)
    for _ in range(100):
        assign = np.argmin(np.abs(heights[:, None] - centers[None, :]), axis=1)
        new = np.array(
            [heights[assign == c].mean() if np.any(assign == c) else centers[c] for c in range(ring_count)]
        )
        if np.allclose(new, centers, rtol=0, atol=1e-15):
            break
        centers = new
    order = np.argsort(centers)
    rank = np.empty(ring_count, dtype=int)
    rank[order] = np.arange(ring_count)
    return rank[assign]


def select_double_ring(frames, spacing: float, ring_count: int = 2):
    """Greedy arc-length subsampling of each camera ring.

    Frames are walked in capture order; a frame is kept when its camera center
    is at least ``spacing`` from every kept frame of the same ring, so the
    closing pair of a full circle also respects the spacing. Ring membership
    comes from clustering camera heights (world z).
    """
    if spacing < 0:
        raise ValueError("spacing must be >= 0")
    if ring_count < 1:
        raise ValueError("ring_count must be >= 1")
    frames = list(frames)
    for f in frames:
        if getattr(f, "pose_prior", None) is None:
            raise ValueError(f"frame {getattr(f, 'frame_id', '?')!r} has no pose prior")
    if not frames:
        return []
    centers = np.array([f.pose_prior.translation for f in frames])
    rings = _ring_membership(centers[:, 2], ring_count)
    kept_in = {}
    kept = []
    for i, (f, ring) in enumerate(zip(frames, rings)):
        prev = kept_in.setdefault(ring, [])
        if not prev or np.linalg.norm(centers[prev] - centers[i], axis=1).min() >= spacing:
            kept.append(f)
            prev.append(i)
    return kept
