import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panicle3d.dataset import Frame, SeedMaskSet
from panicle3d.geometry import CameraIntrinsics, PointCloud, RigidTransform
from panicle3d.metrics import (
    MetricError,
    PatchOutOfBounds,
    PatchPair,
    ReconstructionScorer,
    SeedScore,
    aggregate_metrics,
    assess_reconstruction,
    disk,
    extract_patch_pair,
    noise_response_curve,
    normalize_patch,
    patch_mse,
    patch_ssim,
    sample_seeds_lambda,
    write_curve_csv,
)


def frame_with_seeds(us, width=640, height=480, v=240):
    labels = np.zeros((height, width), np.uint16)
    for i, u in enumerate(us, start=1):
        labels[v, u] = i  # single-pixel mask: centroid at (u + 0.5, v + 0.5)
    masks = SeedMaskSet(labels, {i: 0.9 for i in range(1, len(us) + 1)})
    k = CameraIntrinsics(500.0, 500.0, width / 2, height / 2, width, height)
    return Frame("f", PointCloud.empty(), k, RigidTransform.identity(), masks)


def pair(alpha, beta, radius=None):
    radius = radius if radius is not None else (alpha.shape[0] - 1) // 2
    return PatchPair(np.asarray(alpha, float), np.asarray(beta, float), disk(radius), (), radius)


def random_patch(rng, radius=15):
    return normalize_patch(rng.uniform(0, 255, (2 * radius + 1,) * 2), disk(radius))


# -- sampling


def test_single_center_seed():
    f = frame_with_seeds([320])
    assert [i for i, _ in sample_seeds_lambda(f, K=1)] == [1]


def test_band_membership_and_order():
    # |u - 320| <= 160 keeps only the center seed; 100 and 600 lie outside the band
    f = frame_with_seeds([100, 320, 600])
    assert [i for i, _ in sample_seeds_lambda(f, K=2, band_fraction=0.5)] == [2]


def test_distance_ties_go_to_lower_u():
    f = frame_with_seeds([330, 309, 250])  # centroids 330.5 and 309.5 are both 10.5 from 320
    assert [i for i, _ in sample_seeds_lambda(f, K=3, band_fraction=0.5)] == [2, 1, 3]


def test_k_saturates():
    f = frame_with_seeds([300, 310, 320])
    assert len(sample_seeds_lambda(f, K=10, band_fraction=1.0)) == 3


def test_no_detections():
    assert sample_seeds_lambda(frame_with_seeds([]), K=3) == []


# -- patches


def test_extraction_is_deterministic():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (60, 60, 3), dtype=np.uint8)
    a = extract_patch_pair(img, img, (30.2, 29.9), 10)
    b = extract_patch_pair(img, img, (30.2, 29.9), 10)
    np.testing.assert_array_equal(a.alpha, b.alpha)
    np.testing.assert_array_equal(a.alpha, a.beta)


def test_constant_patch_normalizes_to_zero():
    img = np.full((40, 40, 3), 77, np.uint8)
    assert not extract_patch_pair(img, img, (20, 20), 8).alpha.any()


def test_min_max_map():
    fp = np.ones((1, 3), bool)
    np.testing.assert_allclose(normalize_patch(np.array([[10.0, 60.0, 110.0]]), fp), [[0, 127.5, 255]])


def test_patch_leaving_image():
    img = np.zeros((40, 40, 3), np.uint8)
    with pytest.raises(PatchOutOfBounds):
        extract_patch_pair(img, img, (5, 20), 8)


def test_footprint_is_a_disk():
    d = disk(15)
    assert d.shape == (31, 31) and d[15, 0] and d[0, 15] and not d[0, 0]
    assert d.sum() == sum(1 for x in range(-15, 16) for y in range(-15, 16) if x * x + y * y <= 225)


# -- scores


def test_identical_patches():
    p = random_patch(np.random.default_rng(1))
    assert patch_mse(pair(p, p)) == 0.0
    assert patch_ssim(pair(p, p)) == 1.0


def test_offset_removed_by_normalization():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 200, (50, 50, 3))
    pp = extract_patch_pair(img, img + 40.0, (25, 25), 12)
    assert patch_mse(pp) == pytest.approx(0.0, abs=1e-20)


def test_ramp_against_flat():
    R = 15
    ramp = np.tile(np.arange(2 * R + 1, dtype=float), (2 * R + 1, 1))
    assert patch_mse(pair(ramp, np.zeros_like(ramp))) == 1.0


def test_negated_patch_has_negative_ssim():
    p = random_patch(np.random.default_rng(3))
    assert patch_ssim(pair(p, -p)) < 0


def test_independent_patches_average_near_zero():
    rng = np.random.default_rng(4)
    vals = [patch_ssim(pair(random_patch(rng), random_patch(rng))) for _ in range(1000)]
    assert abs(np.mean(vals)) < 0.1


def test_tiny_footprint_rejected():
    with pytest.raises(MetricError):
        patch_mse(PatchPair(np.zeros((3, 3)), np.zeros((3, 3)), np.eye(3, dtype=bool)))


@given(st.integers(0, 2**32 - 1))
def test_score_ranges(seed):
    rng = np.random.default_rng(seed)
    p = pair(random_patch(rng, 6), random_patch(rng, 6))
    assert patch_mse(p) >= 0
    assert -1 <= patch_ssim(p) <= 1


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 20.0), st.floats(-300, 300))
def test_affine_intensity_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 255, (30, 30, 3))
    ref = rng.uniform(0, 255, (30, 30, 3))
    base = extract_patch_pair(img, ref, (15, 15), 10)
    moved = extract_patch_pair(a * img + b, ref, (15, 15), 10)
    assert patch_mse(moved) == pytest.approx(patch_mse(base), rel=1e-9)
    assert patch_ssim(moved) == pytest.approx(patch_ssim(base), rel=1e-9, abs=1e-12)


# -- aggregation


def score(p, f, mse, ssim=0.5, inst=1):
    return SeedScore(p, f, inst, mse, ssim)


def test_single_seed():
    assert aggregate_metrics([score("p", "f", 4.0)]).ab_mse == 4.0


def test_two_level_mean_is_not_pooled():
    scores = [score("a", "f", 2.0)] + [score("b", "g", 4.0, inst=i) for i in range(7)]
    assert aggregate_metrics(scores).ab_mse == 3.0


def test_all_ssim_one():
    scores = [score("a", "f", 1.0, 1.0), score("b", "g", 2.0, 1.0)]
    assert aggregate_metrics(scores).ab_ssim == 1.0


def test_empty_aggregation():
    with pytest.raises(MetricError):
        aggregate_metrics([])


@given(st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from("xyz"), st.floats(0, 1e4), st.floats(-1, 1)),
                min_size=1, max_size=30), st.randoms())
def test_aggregation_order_invariant(rows, rnd):
    scores = [score(p, f, m, s, i) for i, (p, f, m, s) in enumerate(rows)]
    shuffled = scores[:]
    rnd.shuffle(shuffled)
    a, b = aggregate_metrics(scores), aggregate_metrics(shuffled)
    assert a.ab_mse == pytest.approx(b.ab_mse, rel=1e-12, abs=1e-12)
    assert a.ab_ssim == pytest.approx(b.ab_ssim, rel=1e-12, abs=1e-12)


# -- reconstruction scoring


def test_reconstruction_scores_are_finite(small_dataset):
    rep = assess_reconstruction(small_dataset.frames, small_dataset.poses(), panicle_id="p")
    assert rep.ab_mse > 0 and -1 <= rep.ab_ssim <= 1
    assert set(rep.per_panicle) == {"p"}
    assert all(1 <= k <= 5 for k in rep.samples_per_image.values())


def test_scale_zero_row_matches_plain_scores(small_dataset):
    rep = assess_reconstruction(small_dataset.frames, small_dataset.poses())
    (row,) = noise_response_curve(small_dataset.frames, small_dataset.poses(), [0.0])
    assert row == (0.0, rep.ab_mse, rep.ab_ssim)


def test_curve_is_reproducible(small_dataset, tmp_path):
    a = noise_response_curve(small_dataset.frames, small_dataset.poses(), [0, 2], seed=3)
    b = noise_response_curve(small_dataset.frames, small_dataset.poses(), [0, 2], seed=3)
    write_curve_csv(a, tmp_path / "a.csv")
    write_curve_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "scale,ab_mse,ab_ssim"


def test_scorer_estimator(small_dataset):
    est = ReconstructionScorer(K=3)
    s = est.score(small_dataset.frames)
    assert s == -est.report_.ab_mse
    assert est.get_params()["K"] == 3
