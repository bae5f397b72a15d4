import numpy as np
import pytest

from panicle3d.geometry import RigidTransform, log_se3_vector
from panicle3d.noise import PoseNoiseSpec, inject_pose_noise, perturbation


def test_scale_zero_is_identity():
    poses = {str(i): RigidTransform.from_translation([i, 0, 0]) for i in range(5)}
    out = inject_pose_noise(poses, PoseNoiseSpec(0.0, 3))
    assert all(out[k] is poses[k] for k in poses)


def translation_offsets(scale, n=10_000, seed=7):
    out = inject_pose_noise([RigidTransform.identity()] * n, PoseNoiseSpec(scale, seed))
    return np.array([p.translation for p in out])


def test_scale_one_translation_std():
    std = translation_offsets(1.0).std(axis=0)
    np.testing.assert_allclose(std, 0.4e-3, rtol=0.05)


def test_scale_two_doubles_std():
    s1 = translation_offsets(1.0).std(axis=0)
    s2 = translation_offsets(2.0).std(axis=0)
    np.testing.assert_allclose(s2 / s1, 2.0, rtol=1e-12)


def test_rotation_std_scale_three():
    out = inject_pose_noise([RigidTransform.identity()] * 10_000, PoseNoiseSpec(3.0, 1))
    w = np.array([log_se3_vector(p)[:3] for p in out])
    np.testing.assert_allclose(w.std(axis=0), 1.5e-3, rtol=0.05)


def test_stream_is_order_independent():
    spec = PoseNoiseSpec(1.0, 5)
    a = perturbation(spec, 3)
    perturbation(spec, 0)
    np.testing.assert_array_equal(a.as_matrix(), perturbation(spec, 3).as_matrix())


def test_noise_is_right_composed():
    pose = RigidTransform([0.0, 0.0, 0.0, 1.0], [1.0, 2.0, 3.0])
    spec = PoseNoiseSpec(1.0, 2)
    np.testing.assert_allclose(inject_pose_noise([pose], spec)[0].as_matrix(),
                               pose.as_matrix() @ perturbation(spec, 0).as_matrix())


def test_negative_scale_rejected():
    with pytest.raises(ValueError):
        PoseNoiseSpec(-1.0)
