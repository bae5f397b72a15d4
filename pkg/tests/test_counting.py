import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from panicle3d.counting import (
    CountResult,
    SeedCenter,
    SeedCluster,
    SeedCounter,
    cluster_centers,
    compute_seed_centers,
    count_panicle,
    dbscan_labels,
    density_field,
    find_local_maxima,
    gaussian_density,
    local_maxima_indices,
)
from panicle3d.dataset import Frame, load_dataset
from panicle3d.geometry import CameraIntrinsics, RigidTransform, look_at
from panicle3d.synthetic import generate_panicle, load_truth, synthesize_frame

from conftest import make_frame
from oracles import check_dbscan, local_maxima_bruteforce


def center(p, fid="f", inst=1, points=None):
    p = np.asarray(p, dtype=np.float64)
    return SeedCenter(p, fid, inst, 1.0, p[None] if points is None else points)


# -- seed centers


def test_cube_corners_center():
    corners = np.array([[x, y, z] for x in (0, 1e-3) for y in (0, 1e-3) for z in (0.5, 0.501)])
    f = make_frame("a", corners, [1] * 8)
    (c,) = compute_seed_centers([f], {"a": RigidTransform.identity()})
    np.testing.assert_allclose(c.position, [0.5e-3, 0.5e-3, 0.5005], atol=1e-15)


def test_two_point_instance_dropped():
    f = make_frame("a", [[0, 0, 1], [0, 0, 1.001], [0, 0, 2], [0, 0, 2], [0, 0, 2]], [1, 1, 2, 2, 2])
    cs = compute_seed_centers([f], {"a": RigidTransform.identity()})
    assert [c.instance_id for c in cs] == [2]


def test_centers_use_world_pose():
    pts = np.array([[0, 0, 1.0], [0, 0, 1.0], [0, 0, 1.0]])
    f = make_frame("a", pts, [1, 1, 1])
    T = RigidTransform.from_translation([1, 2, 3])
    (c,) = compute_seed_centers([f], {"a": T})
    np.testing.assert_allclose(c.position, [1, 2, 4])


def test_depth_gate_drops_background_leaks():
    pts = np.array([[0, 0, 0.30], [0, 1e-3, 0.3005], [1e-3, 0, 0.3002], [0, 0, 0.45]])
    f = make_frame("a", pts, [1, 1, 1, 1])
    (c,) = compute_seed_centers([f], {"a": RigidTransform.identity()})
    assert len(c.points) == 3
    (c,) = compute_seed_centers([f], {"a": RigidTransform.identity()}, depth_gate=None)
    assert len(c.points) == 4


def test_min_confidence_filters_instances():
    f = make_frame("a", np.zeros((6, 3)) + [0, 0, 1], [1, 1, 1, 2, 2, 2], conf_map={1: 0.2, 2: 0.9})
    cs = compute_seed_centers([f], {"a": RigidTransform.identity()}, min_confidence=0.5)
    assert [c.instance_id for c in cs] == [2]


def single_seed_views(point_noise):
    # one seed seen by 12 close-up cameras spread over +-50 degrees around its outward normal
    model = generate_panicle(1, rng=5)
    p = model.seed_positions[0]
    k = CameraIntrinsics(900.0, 900.0, 160.0, 120.0, 320, 240)
    az = np.arctan2(p[1], p[0])
    frames = []
    for i, a in enumerate(np.linspace(-0.9, 0.9, 12)):
        eye = [0.15 * np.cos(az + a), 0.15 * np.sin(az + a), p[2] + (0.03 if i % 2 else -0.03)]
        pose = look_at(eye, p)
        f = synthesize_frame(model, f"v{i}", pose, k, i, point_noise_sigma=point_noise, rng=1)
        frames.append(Frame(f.frame_id, f.cloud, k, pose, f.masks))
    return model, frames


def test_multi_view_centers():
    sigma = 0.3e-3
    model, clean = single_seed_views(0.0)
    _, noisy = single_seed_views(sigma)
    poses = {f.frame_id: f.pose_prior for f in clean}
    a = {c.frame_id: c.position for c in compute_seed_centers(clean, poses)}
    b = {c.frame_id: c.position for c in compute_seed_centers(noisy, poses)}
    assert len(a) == len(b) == 12
    for fid in a:
        assert np.linalg.norm(b[fid] - a[fid]) < 2 * sigma
        # the median of the visible cap sits inside the seed, offset towards the camera
        assert np.linalg.norm(a[fid] - model.seed_positions[0]) < model.seed_radius


# -- clustering


def test_empty_centers():
    assert cluster_centers([], 5e-3, 2) == []


def test_two_separated_groups():
    rng = np.random.default_rng(0)
    cs = [center(rng.normal(0, 1e-3, 3)) for _ in range(5)] + [center([0.05, 0, 0] + rng.normal(0, 1e-3, 3)) for _ in range(5)]
    clusters = cluster_centers(cs, 5e-3, 2)
    assert sorted(len(c.member_centers) for c in clusters) == [5, 5]
    X = np.array([c.position for c in cs])
    check_dbscan(dbscan_labels(X, 5e-3, 2), X, 5e-3, 2)


def test_single_center_singleton():
    (c,) = cluster_centers([center([0, 0, 0])], 5e-3, 2)
    assert len(c.member_centers) == 1 and c.cluster_id == 0


def test_noise_points_become_singletons():
    cs = [center([0, 0, 0]), center([1e-3, 0, 0]), center([1, 0, 0])]
    clusters = cluster_centers(cs, 5e-3, 2)
    assert [len(c.member_centers) for c in clusters] == [2, 1]


def test_invalid_cluster_params():
    with pytest.raises(ValueError):
        cluster_centers([center([0, 0, 0])], 0.0, 2)
    with pytest.raises(ValueError):
        cluster_centers([center([0, 0, 0])], 1e-3, 0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.integers(1, 5))
def test_dbscan_matches_bruteforce(seed, n, min_pts):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 0.02, (n, 3))
    check_dbscan(dbscan_labels(X, 4e-3, min_pts), X, 4e-3, min_pts)


# -- density


def test_density_at_center_is_one():
    c = SeedCluster([center([0, 0, 0])], np.zeros((1, 3)), 0)
    assert density_field(c, 1e-3).values[0] == 1.0


def test_density_at_one_sigma():
    D = gaussian_density([[1.5e-3, 0, 0]], [[0, 0, 0]], 1.5e-3)
    assert D[0] == pytest.approx(np.exp(-0.5), rel=1e-15)


def test_coincident_centers_double():
    pts = np.random.default_rng(1).normal(0, 2e-3, (30, 3))
    np.testing.assert_allclose(gaussian_density(pts, [[0, 0, 0]] * 2, 1e-3), 2 * gaussian_density(pts, [[0, 0, 0]], 1e-3), rtol=1e-15)


def test_sparse_path_matches_dense():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 0.1, (3000, 3))
    cs = rng.uniform(0, 0.1, (1500, 3))
    sparse = gaussian_density(pts, cs, 1.5e-3)
    d2 = ((pts[:, None, :] - cs[None]) ** 2).sum(axis=2)
    dense = np.exp(-d2 / (2 * 1.5e-3**2)).sum(axis=1)
    np.testing.assert_allclose(sparse, dense, rtol=1e-12, atol=1e-300)


@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(1, 20))
def test_density_superposition(seed, na, nb):
    rng = np.random.default_rng(seed)
    pts = rng.normal(0, 3e-3, (40, 3))
    a, b = rng.normal(0, 3e-3, (na, 3)), rng.normal(0, 3e-3, (nb, 3))
    both = gaussian_density(pts, np.vstack([a, b]), 1.5e-3)
    np.testing.assert_allclose(both, gaussian_density(pts, a, 1.5e-3) + gaussian_density(pts, b, 1.5e-3), rtol=1e-12, atol=1e-300)


# -- maxima


def test_single_point_is_maximum():
    np.testing.assert_array_equal(find_local_maxima([[1.0, 2.0, 3.0]], 1e-3, [0.3]), [[1, 2, 3]])


def test_two_impulses_give_two_maxima():
    r, sigma = 2.5e-3, 0.3e-3
    impulses = np.array([[0, 0, 0], [3 * r, 0, 0]])
    rng = np.random.default_rng(4)
    M = np.vstack([p + rng.normal(0, 0.6e-3, (150, 3)) for p in impulses])
    D = gaussian_density(M, impulses, sigma)
    L = find_local_maxima(M, r, D)
    assert len(L) == 2
    assert sorted(local_maxima_indices(M, r, D).tolist()) == local_maxima_bruteforce(M, r, D)
    for p in impulses:
        assert np.linalg.norm(L - p, axis=1).min() < sigma


def test_uniform_density_keeps_only_isolated_points():
    M = np.array([[0, 0, 0], [1e-3, 0, 0], [2e-3, 0, 0], [1.0, 0, 0]])
    L = find_local_maxima(M, 2.5e-3, np.ones(4))
    np.testing.assert_array_equal(L, [[1.0, 0, 0]])


def test_density_length_mismatch():
    with pytest.raises(ValueError):
        find_local_maxima(np.zeros((3, 3)), 1e-3, np.ones(2))


@st.composite
def clusters(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    n = draw(st.integers(1, 120))
    M = rng.uniform(0, 0.01, (n, 3))
    if draw(st.booleans()):
        M = np.round(M, 3)  # lattice-like cloud with exact density ties
    cs = rng.uniform(0, 0.01, (draw(st.integers(1, 10)), 3))
    sigma = draw(st.floats(2e-4, 3e-3))
    r = draw(st.floats(5e-4, 5e-3))
    return M, gaussian_density(M, cs, sigma), r


@given(clusters())
def test_nms_matches_bruteforce(case):
    M, D, r = case
    assert sorted(local_maxima_indices(M, r, D).tolist()) == local_maxima_bruteforce(M, r, D)


@given(clusters())
def test_nms_separation(case):
    M, D, r = case
    L = find_local_maxima(np.unique(M, axis=0), r, gaussian_density(np.unique(M, axis=0), M[:3], 1e-3))
    d = np.linalg.norm(L[:, None] - L[None], axis=2)
    assert (d[np.triu_indices(len(L), 1)] >= r).all()


@given(clusters(), st.integers(2, 4))
def test_duplicating_centers_keeps_maxima(case, k):
    M, _, r = case
    cs = M[: max(1, len(M) // 3)]
    D1 = gaussian_density(M, cs, 1e-3)
    Dk = gaussian_density(M, np.repeat(cs, k, axis=0), 1e-3)
    np.testing.assert_allclose(Dk, k * D1, rtol=1e-12)
    np.testing.assert_array_equal(find_local_maxima(M, r, Dk), find_local_maxima(M, r, k * D1))


# -- whole panicle


def test_no_detections_counts_zero():
    f = make_frame("a", np.random.default_rng(0).normal(size=(20, 3)))
    res = count_panicle([f, f], {"a": RigidTransform.identity()})
    assert res.total == 0 and res.to_dict() == {"total": 0, "clusters": []}


def test_count_matches_oracle_on_small_scene(small_scene, small_dataset):
    res = count_panicle(small_dataset.frames, small_dataset.poses())
    visible = load_truth(small_scene[0].parent)["visible_count"]
    assert abs(res.total - visible) <= 0.1 * visible


def test_duplicated_detections_same_total(small_dataset):
    frames = small_dataset.frames
    poses = small_dataset.poses()
    twins = [Frame(f.frame_id + "_dup", f.cloud, f.intrinsics, f.pose_prior, f.masks) for f in frames]
    poses2 = dict(poses, **{f.frame_id: f.pose_prior for f in twins})
    assert count_panicle(frames + twins, poses2).total == count_panicle(frames, poses).total


def test_rigid_invariance(small_dataset):
    frames = small_dataset.frames
    poses = small_dataset.poses()
    G = RigidTransform.from_rotation_matrix(Rotation.from_rotvec([0.2, -0.5, 0.9]).as_matrix(), [0.3, -0.1, 0.7])
    a = count_panicle(frames, poses)
    b = count_panicle(frames, {k: G @ p for k, p in poses.items()})
    assert a.total == b.total
    d, idx = cKDTree(b.maxima).query(G.apply(a.maxima))
    assert d.max() < 1e-9
    assert len(set(idx.tolist())) == b.total


def test_workers_do_not_change_count(small_dataset):
    a = count_panicle(small_dataset.frames, small_dataset.poses(), workers=1)
    b = count_panicle(small_dataset.frames, small_dataset.poses(), workers=4)
    assert a.to_json() == b.to_json()


def test_result_serialization(tmp_path):
    res = CountResult([])
    assert res.to_json(tmp_path / "c.json") == (tmp_path / "c.json").read_text()
    assert len(res.maxima_cloud()) == 0


def test_counter_estimator(small_dataset):
    est = SeedCounter().fit(small_dataset.frames, small_dataset.poses())
    assert est.total_ == est.result_.total
    pred = est.predict([(small_dataset.frames, None), (small_dataset.frames[:0], {})])
    assert pred.tolist() == [est.total_, 0]
