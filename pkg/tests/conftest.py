import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from probtri.geometry import CameraPose, CameraRig, Intrinsics, quat_from_rotvec, random_quaternion

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Remember one acceptance verdict for the end-of-run summary."""
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


def random_rig(rng, K=4, intr=Intrinsics(100.0, 100.0, 50.0, 50.0)) -> CameraRig:
    """Cameras around the origin looking roughly at it, from 3-5 units away."""
    poses = []
    for _ in range(K):
        t = np.array([0.0, 0.0, rng.uniform(3.0, 5.0)]) + rng.normal(0, 0.2, 3)
        poses.append(CameraPose(random_quaternion(rng), t))
    return CameraRig(poses, [intr] * K)


def small_rotation(rng, sigma) -> np.ndarray:
    return quat_from_rotvec(rng.normal(0.0, sigma, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
