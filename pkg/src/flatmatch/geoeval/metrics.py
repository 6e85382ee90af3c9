"""Pose-error records and the AUC of the pose-error recall curve."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import UndefinedInputError
from .geometry import RelPose, angle_between, rotation_angle

THRESHOLDS = (5.0, 10.0, 20.0)
AUC_CONVENTION = (
    "exact area under the empirical recall-vs-threshold step curve on [0, t], divided by t; "
    "failed pairs count as infinite error"
)


@dataclass(frozen=True)
class PoseErrorRecord:
    rot_err_deg: float
    trans_err_deg: float
    inliers: int = 0

    @property
    def pose_err_deg(self) -> float:
        return max(self.rot_err_deg, self.trans_err_deg)

    @classmethod
    def failed(cls) -> "PoseErrorRecord":
        return cls(math.inf, math.inf, 0)


def pose_error(est: RelPose, gt: RelPose, inliers: int = 0) -> PoseErrorRecord:
    """Rotation error is the angle of R_est R_gt^T; translation error ignores the sign of t."""
    rot = math.degrees(rotation_angle(est.R @ gt.R.T))
    trans = angle_between(est.t, gt.t, fold_sign=True)
    return PoseErrorRecord(rot, trans, inliers)


def auc(errors, thresholds=THRESHOLDS) -> dict:
    """Normalized area under the cumulative recall curve for each threshold.

    For a threshold t this equals the mean of max(0, t - e) / t over all
    errors e, the exact integral of the empirical recall step function.
    """
    errs = np.asarray(list(errors), dtype=np.float64)
    if errs.size == 0:
        raise UndefinedInputError("AUC of an empty error list is undefined")
    if np.any(errs < 0) or np.any(np.isnan(errs)):
        raise UndefinedInputError("pose errors must be non-negative numbers")
    out = {}
    for t in thresholds:
        area = np.where(errs < t, t - errs, 0.0)
        out[t] = float(area.mean() / t)
    return out
