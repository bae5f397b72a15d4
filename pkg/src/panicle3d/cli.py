"""``panicle3d`` command line.

Exit codes: 0 success, 1 input error, 2 numerical failure. Failures print a
JSON error record on stdout; diagnostics go to stderr. The log level comes from
``PANICLE3D_LOG_LEVEL`` (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ConfigError, PipelineConfig
from .dataset import DatasetError
from .evaluation import EvaluationError
from .metrics import MetricError
from .ply import PlyError
from .registration import MODES, RegistrationError
from .synthetic import PackingError

logger = logging.getLogger("panicle3d")

INPUT_ERRORS = (ConfigError, DatasetError, PlyError, PackingError, FileNotFoundError, NotADirectoryError,
                IsADirectoryError, json.JSONDecodeError)
NUMERICAL_ERRORS = (RegistrationError, EvaluationError, MetricError, np.linalg.LinAlgError, ArithmeticError)


def _parse_scales(text):
    try:
        scales = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not scales:
        raise argparse.ArgumentTypeError("no noise scales given")
    return scales


def _parse_override(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip(), parsed


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], type=_parse_override,
                        metavar="KEY=VALUE", help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="seed for every stochastic step")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker pool size")
    common.add_argument("--json", action="store_true", help="print the machine-readable result on stdout")

    p = argparse.ArgumentParser(prog="panicle3d", description="Seed-landmark panicle reconstruction and counting.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("out_dir", type=Path)
    s.add_argument("--n-seeds", type=int, default=500)
    s.add_argument("--shell-axes", type=float, nargs=3, default=(0.03, 0.03, 0.08), metavar=("A", "B", "C"))
    s.add_argument("--min-spacing", type=float, default=4e-3)
    s.add_argument("--frames-per-ring", type=int, default=20)
    s.add_argument("--point-noise", type=float, default=0.0)
    s.add_argument("--miss-rate", type=float, default=0.0)
    s.add_argument("--prior-noise", type=float, default=0.0, help="pose prior noise scale")
    s.add_argument("--asymmetry", type=float, default=0.0)
    s.add_argument("--nonseed-depth-noise", type=float, default=0.0)
    s.add_argument("--panicle-id", default="synthetic")

    r = sub.add_parser("reconstruct", parents=[common], help="register frames and fuse the cloud")
    r.add_argument("manifest", type=Path)
    r.add_argument("out_dir", type=Path)
    r.add_argument("--mode", choices=MODES)

    c = sub.add_parser("count", parents=[common], help="count seeds in a reconstruction")
    c.add_argument("recon_dir", type=Path)

    a = sub.add_parser("assess", parents=[common], help="score a reconstruction against its images")
    a.add_argument("recon_dir", type=Path)
    a.add_argument("--noise-scales", type=_parse_scales, help="comma-separated pose noise scales for curve.csv")

    b = sub.add_parser("ablate", parents=[common], help="reconstruct and score every registration mode")
    b.add_argument("manifest", type=Path)
    b.add_argument("out_dir", type=Path)

    e = sub.add_parser("evaluate", parents=[common], help="fit predictions to ground truth from a CSV")
    e.add_argument("csv", type=Path)
    e.add_argument("--out", type=Path)

    x = sub.add_parser("export", parents=[common], help="write maxima PLY and per-frame renders")
    x.add_argument("recon_dir", type=Path)
    x.add_argument("--out-dir", type=Path)
    return p


def load_config(args) -> PipelineConfig:
    """Defaults, then the config file, then ``--set`` and ``--seed``."""
    cfg = PipelineConfig.load(args.config) if args.config is not None else PipelineConfig()
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    unknown = sorted(set(overrides) - set(PipelineConfig.field_names()))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return cfg.replace(**overrides)


def _dispatch(args, cfg):
    w = args.workers
    if args.command == "synth":
        manifest = pipeline.run_synth(
            args.out_dir, cfg, args.n_seeds, tuple(args.shell_axes), args.min_spacing, args.frames_per_ring,
            args.point_noise, args.miss_rate, args.prior_noise, args.asymmetry, args.nonseed_depth_noise,
            args.panicle_id,
        )
        return {"manifest": str(manifest)}
    if args.command == "reconstruct":
        return pipeline.run_reconstruct(args.manifest, args.out_dir, cfg, args.mode, w)
    if args.command == "count":
        return pipeline.run_count(args.recon_dir, cfg, w).to_dict()
    if args.command == "assess":
        pipeline.run_assess(args.recon_dir, cfg, args.noise_scales, w)
        return json.loads((args.recon_dir / pipeline.METRICS).read_text())
    if args.command == "ablate":
        return {"rows": pipeline.run_ablate(args.manifest, args.out_dir, cfg, workers=w)}
    if args.command == "evaluate":
        return pipeline.run_evaluate(args.csv, cfg, args.out)
    if args.command == "export":
        return {"written": [str(p) for p in pipeline.run_export(args.recon_dir, args.out_dir, cfg, w)]}
    raise AssertionError(args.command)


def _fail(code, kind, exc):
    record = {"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record, sort_keys=True))
    logger.error("%s: %s", type(exc).__name__, exc)
    return code


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("PANICLE3D_LOG_LEVEL", "WARNING").upper(),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError(f"--workers must be >= 1, got {args.workers}")
        cfg = load_config(args)
        result = _dispatch(args, cfg)
    except INPUT_ERRORS as exc:
        return _fail(1, "input", exc)
    except NUMERICAL_ERRORS as exc:
        return _fail(2, "numerical", exc)
    except ValueError as exc:
        return _fail(1, "input", exc)
    if args.json:
        print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
