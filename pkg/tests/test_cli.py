import json

import numpy as np
import pytest

from panicle3d import pipeline
from panicle3d.cli import build_parser, load_config, main
from panicle3d.config import PipelineConfig
from panicle3d.dataset import load_dataset


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().out


@pytest.fixture(scope="module")
def synth_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", str(out), "--n-seeds", "80", "--frames-per-ring", "10", "--point-noise", "1e-4",
                 "--prior-noise", "1", "--seed", "3"]) == 0
    return out / "manifest.json"


@pytest.fixture(scope="module")
def recon(synth_manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("recon")
    assert main(["reconstruct", str(synth_manifest), str(out), "--workers", "2"]) == 0
    return out


def test_config_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"sigma": 2e-3, "eps": 6e-3, "seed": 4}))
    args = build_parser().parse_args(
        ["count", "x", "--config", str(tmp_path / "c.json"), "--set", "eps=7e-3", "--set", "mode=no-shift", "--seed", "8"]
    )
    cfg = load_config(args)
    assert cfg.sigma == 2e-3 and cfg.eps == 7e-3 and cfg.mode == "no-shift" and cfg.seed == 8
    assert cfg.r == PipelineConfig().r


def test_unknown_override(capsys):
    code, out = run(capsys, "count", "nowhere", "--set", "bogus=1")
    assert code == 1
    rec = json.loads(out)
    assert rec["exit_code"] == 1 and rec["type"] == "ConfigError" and "bogus" in rec["message"]


def test_missing_manifest(capsys, tmp_path):
    code, out = run(capsys, "reconstruct", tmp_path / "none.json", tmp_path / "o")
    assert code == 1 and json.loads(out)["error"] == "input"


def test_not_a_recon_dir(capsys, tmp_path):
    code, _ = run(capsys, "count", tmp_path)
    assert code == 1


def test_numerical_failure(capsys, tmp_path):
    (tmp_path / "c.csv").write_text("prediction,ground_truth\n1,5\n2,5\n3,5\n")
    code, out = run(capsys, "evaluate", tmp_path / "c.csv")
    assert code == 2 and json.loads(out)["error"] == "numerical"


def test_bad_workers(capsys, tmp_path):
    code, _ = run(capsys, "count", tmp_path, "--workers", "0")
    assert code == 1


def test_reconstruct_outputs(recon):
    for name in (pipeline.POSES, pipeline.FUSED, pipeline.REPORT, pipeline.RUN):
        assert (recon / name).is_file()
    run_doc = json.loads((recon / pipeline.RUN).read_text())
    assert run_doc["mode"] == "full" and run_doc["final_residual"] <= run_doc["initial_residual"]
    assert len(load_dataset(recon / pipeline.POSES).frames) == run_doc["n_frames"]


def test_kinematics_keeps_priors(synth_manifest, tmp_path, capsys):
    code, _ = run(capsys, "reconstruct", synth_manifest, tmp_path, "--mode", "kinematics")
    assert code == 0
    src = load_dataset(synth_manifest)
    out = load_dataset(tmp_path / pipeline.POSES)
    for a, b in zip(src.frames, out.frames):
        np.testing.assert_array_equal(a.pose_prior.as_matrix(), b.pose_prior.as_matrix())


def test_count_and_json(recon, capsys):
    code, out = run(capsys, "count", recon, "--json")
    assert code == 0
    doc = json.loads(out)
    assert doc == json.loads((recon / pipeline.COUNT).read_text())
    assert doc["total"] == sum(c["n_maxima"] for c in doc["clusters"]) > 0


def test_count_without_detections(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "s"), "--n-seeds", "20", "--frames-per-ring", "4", "--miss-rate", "1"]) == 0
    assert main(["reconstruct", str(tmp_path / "s" / "manifest.json"), str(tmp_path / "r"), "--mode", "kinematics"]) == 0
    code, out = run(capsys, "count", tmp_path / "r", "--json")
    assert code == 0 and json.loads(out)["total"] == 0


def test_assess_zero_scale_matches_metrics(recon):
    report, rows = pipeline.run_assess(recon, PipelineConfig(), [0.0])
    assert rows[0][1] == report.ab_mse and rows[0][2] == report.ab_ssim
    assert (recon / pipeline.CURVE).is_file()


def test_export(recon, capsys, tmp_path):
    main(["count", str(recon)])
    code, out = run(capsys, "export", recon, "--out-dir", tmp_path, "--json")
    assert code == 0
    written = json.loads(out)["written"]
    assert str(tmp_path / "maxima.ply") in written
    assert len([w for w in written if w.endswith(".png")]) == len(load_dataset(recon / pipeline.POSES).frames)


def test_evaluate_writes_report(tmp_path, capsys):
    rng = np.random.default_rng(0)
    x = rng.uniform(50, 150, 30)
    lines = ["panicle,prediction,ground_truth"] + [f"p{i},{a},{1.1 * a + 2}" for i, a in enumerate(x)]
    (tmp_path / "c.csv").write_text("\n".join(lines) + "\n")
    code, _ = run(capsys, "evaluate", tmp_path / "c.csv", "--out", tmp_path / "e.json")
    assert code == 0
    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc["fit"]["slope"] == pytest.approx(1.1) and doc["fit"]["r_squared"] == pytest.approx(1.0)


def test_reruns_are_byte_identical(synth_manifest, tmp_path):
    for name, workers in (("a", "1"), ("b", "3")):
        assert main(["reconstruct", str(synth_manifest), str(tmp_path / name), "--workers", workers]) == 0
        assert main(["count", str(tmp_path / name), "--workers", workers]) == 0
    for f in (pipeline.POSES, pipeline.FUSED, pipeline.REPORT, pipeline.COUNT):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
