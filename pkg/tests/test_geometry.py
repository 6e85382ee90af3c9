import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flatmatch.errors import (
    AmbiguousDecompositionError,
    DegenerateConfigurationError,
    InsufficientDataError,
)
from flatmatch.geoeval.geometry import (
    RelPose,
    angle_between,
    decompose_essential,
    essential_8point,
    essential_from_pose,
    fundamental_from_essential,
    project_to_essential,
    ransac_essential,
    rotation_angle,
    rotation_from_axis_angle,
    sampson_distance,
    svd3,
    triangulate,
)
from flatmatch.geoeval.metrics import pose_error

from .conftest import make_scene


def _same_up_to_scale(a, b):
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return min(np.abs(a - b).max(), np.abs(a + b).max())


class TestRotations:
    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, math.pi), st.integers(0, 1000))
    def test_angle_round_trip(self, angle, seed):
        axis = np.random.default_rng(seed).normal(size=3)
        R = rotation_from_axis_angle(axis, angle)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-14)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-14)
        assert rotation_angle(R) == pytest.approx(angle, abs=1e-7)

    def test_small_angles_resolved(self):
        R = rotation_from_axis_angle([0, 0, 1], 1e-9)
        assert rotation_angle(R) == pytest.approx(1e-9, rel=1e-6)

    def test_identity_is_zero(self):
        assert rotation_angle(np.eye(3)) == 0.0

    def test_relpose_normalizes(self):
        pose = RelPose(np.eye(3), [0.0, 3.0, 4.0])
        np.testing.assert_allclose(pose.t, [0, 0.6, 0.8])
        with pytest.raises(ValueError):
            RelPose(np.eye(3), np.zeros(3))


class TestEssential:
    def test_svd3_rank2_exact(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(5, 3, 2)) @ rng.normal(size=(5, 2, 3))
        U, S, V = svd3(m)
        for k in range(5):
            np.testing.assert_allclose(U[k][:, :2] * S[k, :2] @ V[k][:, :2].T, m[k], atol=1e-12)
            assert S[k, 2] <= 1e-7 * S[k, 0]
            assert np.linalg.det(U[k]) == pytest.approx(1) and np.linalg.det(V[k]) == pytest.approx(1)
        assert np.all(np.diff(S, axis=1) <= 0)

    def test_svd3_leading_part_on_full_rank(self):
        m = np.random.default_rng(1).normal(size=(3, 3))
        U, S, V = svd3(m)
        u, s, vt = np.linalg.svd(m)
        np.testing.assert_allclose(S, s, rtol=1e-12)
        lead = U[:, :2] * S[:2] @ V[:, :2].T
        np.testing.assert_allclose(lead, u[:, :2] * s[:2] @ vt[:2], atol=1e-12)

    def test_projection_onto_manifold(self):
        Ep, ok = project_to_essential(np.random.default_rng(1).normal(size=(3, 3)))
        s = np.linalg.svd(Ep, compute_uv=False)
        assert ok
        assert s[0] == pytest.approx(s[1], rel=1e-12) and s[2] < 1e-12 * s[0]

    @pytest.mark.parametrize("n", [8, 20, 100])
    def test_eight_point_exact(self, n):
        pa, pb, K, pose = make_scene(n, n=n)
        E = essential_8point(K.normalize(pa), K.normalize(pb))
        assert _same_up_to_scale(E, essential_from_pose(pose.R, pose.t)) < 1e-8

    def test_too_few_points(self):
        with pytest.raises(InsufficientDataError):
            essential_8point(np.zeros((7, 2)), np.zeros((7, 2)))

    def test_degenerate_points(self):
        x = np.tile([[0.1, 0.2]], (10, 1))
        with pytest.raises(DegenerateConfigurationError):
            essential_8point(x, x)

    def test_sampson_hand_value(self):
        # F = [t]_x with t = (1, 0, 0): constraint is y_a = y_b
        F = essential_from_pose(np.eye(3), [1.0, 0.0, 0.0])
        d = sampson_distance(F, np.array([[0.0, 0.0]]), np.array([[5.0, 2.0]]))
        # residual 2, gradient norm^2 = 1 + 1 -> distance 2 / sqrt(2)
        assert d[0] == pytest.approx(math.sqrt(2), rel=1e-14)

    def test_sampson_zero_on_exact(self):
        pa, pb, K, pose = make_scene(3)
        F = fundamental_from_essential(essential_from_pose(pose.R, pose.t), K)
        assert sampson_distance(F, pa, pb).max() < 1e-8


class TestRansac:
    def test_noiseless(self):
        pa, pb, K, pose = make_scene(4)
        E, inl = ransac_essential(pa, pb, K, iters=50)
        assert inl.all()
        assert _same_up_to_scale(E, essential_from_pose(pose.R, pose.t)) < 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_outliers(self, seed):
        pa, pb, K, pose = make_scene(seed)
        rng = np.random.default_rng(100 + seed)
        bad = rng.choice(100, 30, replace=False)
        pb[bad] = rng.uniform(0, 512, size=(30, 2))
        E, inl = ransac_essential(pa, pb, K, iters=500, seed=seed)
        est = decompose_essential(E, K.normalize(pa[inl]), K.normalize(pb[inl]))
        assert pose_error(est, pose).rot_err_deg < 0.5
        F = fundamental_from_essential(E, K)
        assert sampson_distance(F, pa[inl], pb[inl]).max() < 1.0

    def test_seeded(self):
        pa, pb, K, _ = make_scene(5, noise=0.5)
        a = ransac_essential(pa, pb, K, iters=100, seed=7)
        b = ransac_essential(pa, pb, K, iters=100, seed=7)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_too_few_matches(self):
        pa, pb, K, _ = make_scene(6, n=7)
        with pytest.raises(InsufficientDataError):
            ransac_essential(pa, pb, K)


class TestDecomposition:
    def test_triangulation(self):
        rng = np.random.default_rng(7)
        R = rotation_from_axis_angle(rng.normal(size=3), 0.2)
        t = np.array([1.0, 0.1, 0.0])
        X = rng.uniform(-1, 1, size=(10, 3)) + [0, 0, 5]
        xa = X[:, :2] / X[:, 2:]
        Xb = X @ R.T + t
        xb = Xb[:, :2] / Xb[:, 2:]
        H = triangulate(R, t, xa, xb)
        np.testing.assert_allclose(H[:, :3] / H[:, 3:], X, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_recovers_pose(self, seed):
        pa, pb, K, pose = make_scene(seed)
        E = essential_from_pose(pose.R, pose.t)
        est = decompose_essential(-3.0 * E, K.normalize(pa), K.normalize(pb))
        err = pose_error(est, pose)
        assert err.rot_err_deg < 1e-8 and err.trans_err_deg < 1e-8
        assert est.t @ pose.t > 0

    def test_balanced_split_is_ambiguous(self):
        # half the points lie in front for (R, t), half in front for (R, -t); both share E up to sign
        rng = np.random.default_rng(8)
        R = rotation_from_axis_angle([0, 1, 0], 0.1)
        t = np.array([1.0, 0.0, 0.0])
        xa, xb = [], []
        for sign in (1.0, -1.0):
            found = 0
            while found < 10:
                X = rng.uniform(-2, 2, 3) + [0, 0, 6]
                Xb = R @ X + sign * t
                if Xb[2] > 0:
                    xa.append(X[:2] / X[2])
                    xb.append(Xb[:2] / Xb[2])
                    found += 1
        with pytest.raises(AmbiguousDecompositionError):
            decompose_essential(essential_from_pose(R, t), np.array(xa), np.array(xb))

    def test_angle_between(self):
        assert angle_between([1, 0, 0], [0, 1, 0]) == pytest.approx(90)
        assert angle_between([1, 0, 0], [-1, 0, 0]) == pytest.approx(180)
        assert angle_between([1, 0, 0], [-1, 0, 0], fold_sign=True) == pytest.approx(0)
