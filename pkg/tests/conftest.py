import math

import numpy as np
import pytest

from flatmatch.fileformats import write_image
from flatmatch.geoeval.geometry import CameraIntrinsics, RelPose, rotation_from_axis_angle
from flatmatch.geoeval.synthetic import SceneParams, gen_synthetic_pair

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None or report.when == "teardown":
        return
    num, title = marker
    if report.when == "setup" and report.passed:
        return
    prev = _criteria.get(num, (title, "PASS"))
    outcome = "PASS" if report.passed and prev[1] == "PASS" else "FAIL"
    _criteria[num] = (title, outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        title, outcome = _criteria[num]
        terminalreporter.write_line(f"criterion {num:>2} {outcome}  {title}")


def make_scene(seed, n=100, f=500.0, size=512, angle_deg=10.0, noise=0.0):
    """Random points at depth 4-8 seen by two cameras; returns (pa, pb, K, pose)."""
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(f, f, size / 2, size / 2)
    R = rotation_from_axis_angle(rng.normal(size=3), math.radians(angle_deg))
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    X = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(4, 8, n)])
    pa = K.project(X) + noise * rng.normal(size=(n, 2))
    pb = K.project(X @ R.T + t) + noise * rng.normal(size=(n, 2))
    return pa, pb, K, RelPose(R, t)


@pytest.fixture
def scene():
    return make_scene


@pytest.fixture(scope="session")
def image_pair(tmp_path_factory):
    """A fixed 64x64 textured pair written as PGM files."""
    root = tmp_path_factory.mktemp("imgs")
    pair = gen_synthetic_pair(1, "texture", SceneParams(grid_cells=8))
    a, b = root / "a.pgm", root / "b.pgm"
    write_image(a, pair.img_a)
    write_image(b, pair.img_b)
    return a, b
