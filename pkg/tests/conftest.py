import numpy as np
import pytest
from hypothesis import settings

from panicle3d.dataset import Frame, SeedMaskSet, load_dataset
from panicle3d.geometry import CameraIntrinsics, PointCloud, RigidTransform
from panicle3d.synthetic import DoubleRing, generate_panicle, synthesize_dataset

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def make_frame(frame_id, positions, labels=None, confidence=None, pose=None, k=None, conf_map=None):
    """In-memory frame with camera-frame points and hand-set labels."""
    k = k or CameraIntrinsics(100.0, 100.0, 32.0, 32.0, 64, 64)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    labels = np.full(n, -1) if labels is None else np.asarray(labels)
    if conf_map is None:
        conf_map = {int(i): 1.0 for i in np.unique(labels[labels >= 0])}
    if confidence is None:
        confidence = np.array([conf_map.get(int(l), 0.0) for l in labels], np.float32)
    masks = SeedMaskSet(np.zeros((k.height, k.width), np.uint16), conf_map)
    cloud = PointCloud(positions, np.full((n, 3), 128, np.uint8), labels, confidence)
    return Frame(frame_id, cloud, k, pose or RigidTransform.identity(), masks)


@pytest.fixture(scope="session")
def small_scene(tmp_path_factory):
    """120 seeds seen by two rings of 20 cameras; exact pose priors."""
    out = tmp_path_factory.mktemp("small_scene")
    model = generate_panicle(120, rng=2)
    manifest, record = synthesize_dataset(model, out, DoubleRing(frames_per_ring=20), rng=4)
    return manifest, model, record


@pytest.fixture(scope="session")
def small_dataset(small_scene):
    return load_dataset(small_scene[0])


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Log one acceptance line; the summary is printed at the end of the session."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
