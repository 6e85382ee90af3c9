import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flatmatch.errors import UndefinedInputError
from flatmatch.geoeval.geometry import RelPose, rotation_from_axis_angle
from flatmatch.geoeval.metrics import PoseErrorRecord, auc, pose_error

errors = st.lists(st.one_of(st.floats(0, 60), st.just(math.inf)), min_size=1, max_size=40)


def step_integral(errs, t):
    """Area under recall(x) = #{e <= x} / n on [0, t], walked breakpoint by breakpoint."""
    pts = sorted(e for e in errs if e < t)
    area, prev = 0.0, 0.0
    for k, e in enumerate(pts):
        area += k * (e - prev)
        prev = e
    area += len(pts) * (t - prev)
    return area / (len(errs) * t)


class TestAuc:
    def test_single_sample(self):
        assert auc([2.5]) == {5.0: 0.5, 10.0: 0.75, 20.0: 0.875}

    def test_all_zero(self):
        assert auc([0.0] * 7) == {5.0: 1.0, 10.0: 1.0, 20.0: 1.0}

    def test_all_failed(self):
        assert auc([math.inf] * 3) == {5.0: 0.0, 10.0: 0.0, 20.0: 0.0}

    def test_error_at_threshold_contributes_nothing(self):
        assert auc([5.0], [5.0])[5.0] == 0.0

    def test_undefined(self):
        with pytest.raises(UndefinedInputError):
            auc([])
        with pytest.raises(UndefinedInputError):
            auc([1.0, -0.5])
        with pytest.raises(UndefinedInputError):
            auc([math.nan])

    @settings(max_examples=200, deadline=None)
    @given(errors)
    def test_matches_step_integral(self, errs):
        got = auc(errs)
        for t in (5.0, 10.0, 20.0):
            assert got[t] == pytest.approx(step_integral(errs, t), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(errors)
    def test_monotone_in_threshold(self, errs):
        a = auc(errs)
        assert 0.0 <= a[5.0] <= a[10.0] <= a[20.0] <= 1.0

    def test_failures_lower_auc(self):
        assert auc([1.0, math.inf])[5.0] == pytest.approx(auc([1.0])[5.0] / 2)


class TestPoseError:
    def _pose(self, seed):
        rng = np.random.default_rng(seed)
        return RelPose(rotation_from_axis_angle(rng.normal(size=3), rng.uniform(0, 1)), rng.normal(size=3))

    def test_identical_is_zero(self):
        p = self._pose(0)
        e = pose_error(p, p)
        assert e.rot_err_deg == pytest.approx(0, abs=1e-6) and e.trans_err_deg == pytest.approx(0, abs=1e-6)

    def test_exact_identity_is_exactly_zero(self):
        p = RelPose(np.eye(3), [1.0, 0.0, 0.0])
        assert pose_error(p, p).pose_err_deg == 0.0

    def test_known_rotation(self):
        gt = RelPose(np.eye(3), [0, 0, 1.0])
        est = RelPose(rotation_from_axis_angle([1, 0, 0], math.radians(3)), [0, 0, 1.0])
        assert pose_error(est, gt).rot_err_deg == pytest.approx(3.0, rel=1e-10)

    def test_translation_sign_folded(self):
        gt = RelPose(np.eye(3), [0, 0, 1.0])
        assert pose_error(RelPose(np.eye(3), [0, 0, -1.0]), gt).trans_err_deg == 0.0

    def test_max_of_components(self):
        rec = PoseErrorRecord(2.0, 7.0)
        assert rec.pose_err_deg == 7.0
        assert math.isinf(PoseErrorRecord.failed().pose_err_deg)

    @pytest.mark.parametrize("seed", range(10))
    def test_symmetric_under_inversion(self, seed):
        a, b = self._pose(seed), self._pose(seed + 100)
        e1 = pose_error(a, b)
        e2 = pose_error(a.inverse(), b.inverse())
        assert e1.rot_err_deg == pytest.approx(e2.rot_err_deg, abs=1e-9)
