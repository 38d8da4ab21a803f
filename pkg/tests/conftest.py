import numpy as np
import pytest
from hypothesis import settings

from splatstream.core import Camera, GaussianArray

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")


@pytest.fixture
def cam100():
    """fx = fy = 100, principal point (50, 50), identity extrinsics, 100x100."""
    return Camera(100.0, 100.0, 50.0, 50.0, 100, 100)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_camera(rng, width=64, height=48):
    R = random_rotation(rng)
    f = rng.uniform(40, 120)
    return Camera(f, f * rng.uniform(0.9, 1.1), width / 2 + rng.uniform(-3, 3), height / 2 + rng.uniform(-3, 3),
                  width, height, R, rng.normal(0, 2, 3))


def random_gaussians(rng, n, center=(0.0, 0.0, 5.0), spread=2.0, scale=(-3.0, -1.0), colors=True):
    pos = np.asarray(center) + rng.normal(0, spread, (n, 3))
    log_s = rng.uniform(*scale, (n, 3))
    q = rng.normal(size=(n, 4))
    op = rng.uniform(0.2, 0.9, n)
    col = rng.uniform(0, 1, (n, 3)) if colors else None
    return GaussianArray(pos, log_s, q, op, col)


# criterion number -> result line, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
