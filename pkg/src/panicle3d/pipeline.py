"""End-to-end runs over on-disk datasets; each step writes stable file names.

A reconstruction directory holds ``poses.json`` (a loadable manifest with the
estimated poses), ``fused.ply``, ``registration_report.json`` and ``run.json``.
Later steps add ``count.json``, ``metrics.json`` and ``curve.csv``.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .counting import count_panicle
from .dataset import load_dataset, write_pose_manifest
from .evaluation import kfold_rmse, linear_fit, read_count_csv
from .metrics import assess_reconstruction, noise_response_curve, write_curve_csv
from .noise import PoseNoiseSpec
from .ply import write_ply
from .registration import MODES, SeedRegistration
from .render import render_view
from .synthetic import DoubleRing, generate_panicle, synthesize_dataset

logger = logging.getLogger(__name__)

POSES = "poses.json"
FUSED = "fused.ply"
REPORT = "registration_report.json"
RUN = "run.json"
COUNT = "count.json"
METRICS = "metrics.json"
CURVE = "curve.csv"


def _dump(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _load_recon(recon_dir, workers=1):
    recon_dir = Path(recon_dir)
    poses_path = recon_dir / POSES
    if not poses_path.is_file():
        raise FileNotFoundError(f"{recon_dir} is not a reconstruction directory (no {POSES})")
    return load_dataset(poses_path, workers)


def run_synth(out_dir, config: PipelineConfig, n_seeds=500, shell_axes=(0.03, 0.03, 0.08), min_spacing=4e-3,
              frames_per_ring=20, point_noise=0.0, miss_rate=0.0, prior_noise_scale=0.0, asymmetry=0.0,
              nonseed_depth_noise=0.0, panicle_id="synthetic"):
    """Generate a synthetic panicle dataset; returns the manifest path."""
    model = generate_panicle(n_seeds, shell_axes, min_spacing, rng=config.seed, asymmetry=asymmetry)
    prior = PoseNoiseSpec(prior_noise_scale, config.seed) if prior_noise_scale > 0 else None
    manifest, _ = synthesize_dataset(
        model, out_dir, DoubleRing(frames_per_ring=frames_per_ring), point_noise_sigma=point_noise,
        detection_miss_rate=miss_rate, rng=config.seed, prior_noise=prior, panicle_id=panicle_id,
        nonseed_depth_sigma=nonseed_depth_noise,
    )
    return manifest


def run_reconstruct(manifest, out_dir, config: PipelineConfig, mode=None, workers=1):
    """Register a dataset and write the reconstruction directory; returns the run record."""
    mode = mode or config.mode
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(manifest, workers)
    est = SeedRegistration(
        mode=mode,
        confidence_threshold=config.confidence_threshold,
        max_corr_dist=config.max_corr_dist,
        odometry_window=config.odometry_window,
        loop_radius=config.loop_radius,
        shift_range=config.shift_range,
        fitness_floor=config.fitness_floor,
        voxel=config.voxel,
        workers=workers,
    ).fit(ds.frames)
    write_pose_manifest(out_dir / POSES, ds, est.poses_)
    write_ply(out_dir / FUSED, est.transform(ds.frames))
    report = est.report_.to_dict()
    report["mode"] = mode
    report["excluded_frames"] = list(est.excluded_)
    _dump(out_dir / REPORT, report)
    run = {
        "dataset": str(Path(manifest).resolve()),
        "mode": mode,
        "config": config.to_dict(),
        "outputs": [POSES, FUSED, REPORT],
        "n_frames": len(ds.frames),
        "initial_residual": est.report_.initial_residual,
        "final_residual": est.report_.final_residual,
    }
    _dump(out_dir / RUN, run)
    return run


def run_count(recon_dir, config: PipelineConfig, workers=1):
    ds = _load_recon(recon_dir, workers)
    result = count_panicle(
        ds.frames, ds.poses(), config.eps, config.min_pts, config.sigma, config.r,
        config.min_confidence, config.depth_gate, workers,
    )
    doc = result.to_dict()
    _dump(Path(recon_dir) / COUNT, doc)
    return result


def _score_recon(ds, config):
    return assess_reconstruction(
        ds.frames, ds.poses(), None, config.K, config.patch_radius, config.band_fraction, config.splat_px,
        ds.panicle_id, config.voxel,
    )


def run_assess(recon_dir, config: PipelineConfig, scales=None, workers=1):
    """Score a reconstruction; with ``scales`` also write the noise-response curve."""
    recon_dir = Path(recon_dir)
    ds = _load_recon(recon_dir, workers)
    report = _score_recon(ds, config)
    doc = report.to_dict()
    rows = None
    if scales is not None:
        rows = noise_response_curve(
            ds.frames, ds.poses(), scales, config.K, config.seed, config.patch_radius, config.band_fraction,
            config.splat_px, config.voxel, ds.panicle_id,
        )
        write_curve_csv(rows, recon_dir / CURVE)
        doc["curve"] = [{"scale": s, "ab_mse": m, "ab_ssim": q} for s, m, q in rows]
    _dump(recon_dir / METRICS, doc)
    return report, rows


def run_ablate(manifest, out_dir, config: PipelineConfig, modes=MODES, workers=1):
    """Reconstruct and score every ablation mode; writes ``ablation.json`` and ``ablation.csv``."""
    out_dir = Path(out_dir)
    rows = []
    for mode in modes:
        sub = out_dir / mode
        run = run_reconstruct(manifest, sub, config, mode, workers)
        report, _ = run_assess(sub, config, None, workers)
        rows.append({
            "mode": mode,
            "ab_mse": report.ab_mse,
            "ab_ssim": report.ab_ssim,
            "initial_residual": run["initial_residual"],
            "final_residual": run["final_residual"],
        })
    _dump(out_dir / "ablation.json", {"rows": rows})
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return rows


def run_evaluate(csv_path, config: PipelineConfig, out=None):
    """Linear fit and repeated-split RMSE of ``prediction`` against ``ground_truth``."""
    x, y = read_count_csv(csv_path)
    fit = linear_fit(x, y)
    kf = kfold_rmse(x, y, config.kfold_k, config.train_fraction, config.seed)
    doc = {"fit": fit.to_dict(), "kfold": kf.to_dict()}
    if out is not None:
        _dump(out, doc)
    return doc


def run_export(recon_dir, out_dir=None, config: PipelineConfig | None = None, workers=1):
    """Write count maxima as PLY and one PNG render per frame; returns written paths."""
    from .geometry import PointCloud
    from .metrics import save_render_png
    from .registration import fuse_clouds

    config = config or PipelineConfig()
    recon_dir = Path(recon_dir)
    out_dir = Path(out_dir) if out_dir is not None else recon_dir / "export"
    (out_dir / "renders").mkdir(parents=True, exist_ok=True)
    written = []
    count_path = recon_dir / COUNT
    if count_path.is_file():
        doc = json.loads(count_path.read_text())
        pts = [m for c in doc["clusters"] for m in c["maxima"]]
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        colors = np.tile(np.array([[255, 0, 0]], np.uint8), (len(pts), 1))
        write_ply(out_dir / "maxima.ply", PointCloud(pts, colors))
        written.append(out_dir / "maxima.ply")
    ds = _load_recon(recon_dir, workers)
    cloud = fuse_clouds(ds.frames, ds.poses(), config.voxel)
    for f in ds.frames:
        view = render_view(cloud, f.pose_prior, f.intrinsics, config.splat_px)
        path = out_dir / "renders" / f"{f.frame_id}.png"
        save_render_png(view, path)
        written.append(path)
    return written
