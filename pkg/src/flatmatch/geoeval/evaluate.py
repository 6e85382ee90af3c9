"""Relative-pose evaluation over seeded synthetic pairs."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from ..errors import ConfigError, FlatMatchError
from ..matcher import MatcherConfig, MatchingModel, MatchSet, match_injected, match_pipeline
from ..transformer import TransformerConfig
from .geometry import CameraIntrinsics, RelPose, decompose_essential, ransac_essential
from .metrics import AUC_CONVENTION, THRESHOLDS, PoseErrorRecord, auc, pose_error
from .synthetic import SceneParams, SyntheticPair, gen_synthetic_pair

COARSE_PRECISION_NOTE = "diagnostic only, not part of the headline metric"


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "injection"
    scene: SceneParams = SceneParams()
    matcher: MatcherConfig = MatcherConfig()
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    ransac_iters: int = 1000
    px_thresh: float = 1.0

    def __post_init__(self):
        if self.mode not in ("injection", "texture"):
            raise ConfigError(f"unknown eval mode {self.mode!r}")
        if self.ransac_iters < 1:
            raise ConfigError("ransac_iters must be >= 1")
        if self.px_thresh <= 0:
            raise ConfigError("px_thresh must be positive")

    def digest(self) -> str:
        blob = json.dumps(_plain(self), sort_keys=True, default=repr)
        return hashlib.sha256(blob.encode()).hexdigest()


def _plain(cfg: EvalConfig) -> dict:
    return {
        "mode": cfg.mode,
        "scene": asdict(cfg.scene),
        "matcher": asdict(cfg.matcher),
        "transformer": {**asdict(replace(cfg.transformer, variant=None)),
                        "variant": repr(cfg.transformer.variant)},
        "ransac_iters": cfg.ransac_iters,
        "px_thresh": cfg.px_thresh,
    }


@dataclass
class PairResult:
    seed: int
    record: PoseErrorRecord
    n_coarse: int
    n_refined: int
    coarse_precision: Optional[float] = None
    failure: str = ""

    def to_json(self) -> dict:
        def num(x):
            return None if math.isinf(x) else x

        return {
            "seed": self.seed,
            "pose_err_deg": num(self.record.pose_err_deg),
            "rot_err_deg": num(self.record.rot_err_deg),
            "trans_err_deg": num(self.record.trans_err_deg),
            "n_coarse": self.n_coarse,
            "n_refined": self.n_refined,
            "inliers": self.record.inliers,
            "failure": self.failure or None,
        }


def estimate_pose(ms: MatchSet, K: CameraIntrinsics, iters: int, px_thresh: float, seed: int):
    """(RelPose, inlier count); raises a FlatMatchError subclass when no pose is recoverable."""
    pa, pb = ms.points()
    E, inl = ransac_essential(pa, pb, K, iters=iters, px_thresh=px_thresh, seed=seed)
    pose = decompose_essential(E, K.normalize(pa[inl]), K.normalize(pb[inl]))
    return pose, int(inl.sum())


def _coarse_precision(ms: MatchSet, pair: SyntheticPair) -> Optional[float]:
    if not pair.cells or not ms.coarse:
        return None
    hits = sum(pair.cells.get(m.i) == m.j for m in ms.coarse)
    return hits / len(ms.coarse)


def evaluate_pair(cfg: EvalConfig, seed: int, model: Optional[MatchingModel] = None) -> PairResult:
    pair = gen_synthetic_pair(seed, cfg.mode, cfg.scene, cfg.matcher)
    if cfg.mode == "injection":
        ms = match_injected(pair.coarse_a, pair.coarse_b, pair.centers_a, pair.windows_b, cfg.matcher)
    else:
        model = model or MatchingModel.init(cfg.transformer)
        ms = match_pipeline(pair.img_a, pair.img_b, model, cfg.matcher)
    n_coarse, n_refined = len(ms.coarse), len(ms.refined)
    try:
        est, inliers = estimate_pose(ms, pair.intrinsics, cfg.ransac_iters, cfg.px_thresh, seed)
    except FlatMatchError as exc:
        return PairResult(seed, PoseErrorRecord.failed(), n_coarse, n_refined,
                          _coarse_precision(ms, pair), type(exc).__name__)
    return PairResult(seed, pose_error(est, pair.gt_pose, inliers), n_coarse, n_refined,
                      _coarse_precision(ms, pair))


@dataclass
class EvalReport:
    config_digest: str
    pairs: list
    auc: dict

    def to_json(self) -> dict:
        precisions = [p.coarse_precision for p in self.pairs if p.coarse_precision is not None]
        return {
            "config_digest": self.config_digest,
            "auc_convention": AUC_CONVENTION,
            "per_pair": [p.to_json() for p in self.pairs],
            "auc": {f"{t:g}": v for t, v in self.auc.items()},
            "failed_pairs": sum(math.isinf(p.record.pose_err_deg) for p in self.pairs),
            "coarse_precision": {
                "note": COARSE_PRECISION_NOTE,
                "mean": float(np.mean(precisions)) if precisions else None,
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, allow_nan=False) + "\n"


def evaluate(cfg: EvalConfig, n_pairs: int, seed: int = 0,
             model: Optional[MatchingModel] = None) -> EvalReport:
    """Pair k uses seed + k. Failed pairs enter the AUC as infinite error."""
    if n_pairs < 1:
        raise ConfigError("n_pairs must be >= 1")
    if cfg.mode == "texture" and model is None:
        model = MatchingModel.init(cfg.transformer)
    pairs = [evaluate_pair(cfg, seed + k, model) for k in range(n_pairs)]
    scores = auc([p.record.pose_err_deg for p in pairs], THRESHOLDS)
    return EvalReport(cfg.digest(), pairs, scores)
