"""Synthetic two-view pairs with known relative pose.

``texture`` mode renders a procedurally textured plane from two cameras;
``injection`` mode skips rendering and places ground-truth-linked descriptors
directly on the coarse grids, with fine windows whose correlation heatmap
has its expectation exactly at the true sub-pixel position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ConfigError
from ..fileformats import Image
from ..matcher import COARSE_STRIDE, FINE_STRIDE, MatcherConfig, coarse_to_fine_center
from ..numgrid import FeatureGrid
from ..transformer import layer_norm
from .geometry import CameraIntrinsics, RelPose, rotation_from_axis_angle

# log-weight standing in for zero probability: exp(-800) underflows to 0.0
LOG_ZERO = -800.0


@dataclass(frozen=True)
class SceneParams:
    grid_cells: int = 16  # coarse cells per side; image side is 8x this
    n_points: int = 64
    min_depth: float = 4.0
    max_depth: float = 8.0
    rot_deg: tuple = (5.0, 15.0)
    baseline: float = 1.0
    noise: float = 0.0
    coarse_dim: int = 64
    fine_dim: int = 32
    blank: bool = False

    @property
    def image_size(self) -> int:
        return self.grid_cells * COARSE_STRIDE


@dataclass(eq=False)
class SyntheticPair:
    gt_pose: RelPose
    intrinsics: CameraIntrinsics
    points3d: np.ndarray  # camera-A frame
    pix_a: np.ndarray
    pix_b: np.ndarray
    baseline: float = 1.0
    img_a: Optional[Image] = None
    img_b: Optional[Image] = None
    coarse_a: Optional[FeatureGrid] = None
    coarse_b: Optional[FeatureGrid] = None
    centers_a: Optional[np.ndarray] = None
    windows_b: Optional[np.ndarray] = None
    cells: dict = field(default_factory=dict)  # A cell index -> B cell index

    @property
    def gt_correspondences(self):
        return list(zip(map(tuple, self.pix_a), map(tuple, self.pix_b)))


def default_intrinsics(size: int) -> CameraIntrinsics:
    return CameraIntrinsics(float(size), float(size), size / 2.0, size / 2.0)


def random_pose(rng, rot_deg=(5.0, 15.0)) -> RelPose:
    angle = math.radians(rng.uniform(*rot_deg))
    R = rotation_from_axis_angle(rng.normal(size=3), angle)
    t = rng.normal(size=3)
    return RelPose(R, t)


def bilinear_weights(offset, w: int) -> np.ndarray:
    """w x w weights with expectation exactly ``offset`` (dx, dy) about the centre."""
    r = w // 2
    out = np.zeros((w, w))
    axes = []
    for o in offset:
        if not -r <= o <= r:
            raise ValueError(f"offset {o} outside the window")
        f0 = min(int(math.floor(o)), r - 1)
        a = o - f0
        axes.append(((f0 + r, 1.0 - a), (f0 + r + 1, a)))
    for xi, wx in axes[0]:
        for yi, wy in axes[1]:
            out[yi, xi] += wx * wy
    return out


def _injection(seed: int, params: SceneParams, mcfg: MatcherConfig) -> SyntheticPair:
    if params.baseline <= 0:
        raise ConfigError("injection pairs need a non-zero baseline for essential-matrix evaluation")
    if params.n_points < 16:
        raise ConfigError("injection mode needs at least 16 points")
    rng = np.random.default_rng(seed)
    n = params.grid_cells
    size = params.image_size
    K = default_intrinsics(size)
    pose = random_pose(rng, params.rot_deg)
    t = pose.t * params.baseline
    margin = mcfg.border_margin
    w = mcfg.window

    interior = [c for c in range(n * n)
                if margin <= c % n < n - margin and margin <= c // n < n - margin]
    order = rng.permutation(len(interior))
    cells, pts, pix_b = {}, [], []
    used_b = set()
    for k in order:
        ca = interior[k]
        xa = (ca % n) * COARSE_STRIDE + COARSE_STRIDE / 2
        ya = (ca // n) * COARSE_STRIDE + COARSE_STRIDE / 2
        depth = rng.uniform(params.min_depth, params.max_depth)
        X = depth * np.array([(xa - K.cx) / K.fx, (ya - K.cy) / K.fy, 1.0])
        Xb = pose.R @ X + t
        if Xb[2] <= 0:
            continue
        pb = K.project(Xb)
        bx, by = int(pb[0] // COARSE_STRIDE), int(pb[1] // COARSE_STRIDE)
        if not (margin <= bx < n - margin and margin <= by < n - margin):
            continue
        cb = by * n + bx
        if cb in used_b:
            continue
        used_b.add(cb)
        cells[ca] = cb
        pts.append(X)
        pix_b.append(pb)
        if len(cells) == params.n_points:
            break
    if len(cells) < 16:
        raise ConfigError(f"only {len(cells)} points visible in both views; adjust the scene")

    pts = np.array(pts)
    pix_a = np.array([((c % n) * COARSE_STRIDE + COARSE_STRIDE / 2,
                       (c // n) * COARSE_STRIDE + COARSE_STRIDE / 2) for c in cells])
    pix_b = np.array(pix_b)

    d, df = params.coarse_dim, params.fine_dim
    # descriptors sit at the scale of the transformer's LayerNorm output
    coarse_a = layer_norm(rng.normal(size=(n * n, d)))
    coarse_b = rng.normal(size=(n * n, d))
    for ca, cb in cells.items():
        coarse_b[cb] = coarse_a[ca] + params.noise * rng.normal(size=d)
    coarse_b = layer_norm(coarse_b)

    centers_a = rng.normal(size=(n * n, df))
    windows_b = rng.normal(size=(n * n, w, w, df))
    fine_scale = mcfg.descriptor_scale(df)
    gain = fine_scale * fine_scale / mcfg.tau_fine
    for (ca, cb), pb in zip(cells.items(), pix_b):
        fx, fy = coarse_to_fine_center(cb, n)
        offset = (pb[0] / FINE_STRIDE - fx, pb[1] / FINE_STRIDE - fy)
        weights = bilinear_weights(offset, w)
        logits = np.where(weights > 0, np.log(np.where(weights > 0, weights, 1.0)), LOG_ZERO)
        logits = logits + params.noise * rng.normal(size=logits.shape)
        c = centers_a[ca]
        # tokens along c reproduce the logits; orthogonal parts are distractor texture
        ortho = rng.normal(size=(w, w, df))
        ortho -= (ortho @ c)[..., None] * c / (c @ c)
        windows_b[cb] = logits[..., None] * c / (gain * (c @ c)) + ortho

    return SyntheticPair(
        gt_pose=pose, intrinsics=K, points3d=pts, pix_a=pix_a, pix_b=pix_b,
        baseline=params.baseline,
        coarse_a=FeatureGrid(n, n, coarse_a), coarse_b=FeatureGrid(n, n, coarse_b),
        centers_a=centers_a, windows_b=windows_b, cells=cells,
    )


def _texture_raster(rng, size: int = 256, blank: bool = False) -> np.ndarray:
    if blank:
        return np.full((size, size), 0.5)
    yy, xx = np.mgrid[0:size, 0:size] / size
    tex = np.zeros((size, size))
    for _ in range(12):
        fx, fy = rng.uniform(2, 24, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        tex += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    for _ in range(40):
        cx, cy = rng.uniform(0, 1, size=2)
        s = rng.uniform(0.01, 0.05)
        tex += rng.uniform(-2, 2) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    tex -= tex.min()
    return tex / max(tex.max(), 1e-12)


def bilinear_sample(tex: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``tex`` at continuous (u, v) = (column, row), clamping at the border."""
    h, w = tex.shape
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    u0 = np.minimum(np.floor(u).astype(int), w - 2)
    v0 = np.minimum(np.floor(v).astype(int), h - 2)
    a = u - u0
    b = v - v0
    return ((1 - a) * (1 - b) * tex[v0, u0] + a * (1 - b) * tex[v0, u0 + 1]
            + (1 - a) * b * tex[v0 + 1, u0] + a * b * tex[v0 + 1, u0 + 1])


class _Plane:
    """Textured plane n.X = dist in camera-A coordinates with an in-plane basis."""

    def __init__(self, rng, dist: float, extent: float):
        tilt = rotation_from_axis_angle(rng.normal(size=3), math.radians(rng.uniform(0, 20)))
        self.normal = tilt @ np.array([0.0, 0.0, 1.0])
        self.e1 = tilt @ np.array([1.0, 0.0, 0.0])
        self.e2 = tilt @ np.array([0.0, 1.0, 0.0])
        self.origin = dist * self.normal
        self.dist = dist
        self.extent = extent

    def to_texture(self, X, tex_size):
        rel = X - self.origin
        s = rel @ self.e1
        t = rel @ self.e2
        scale = (tex_size - 1) / (2 * self.extent)
        return (s + self.extent) * scale, (t + self.extent) * scale

    def point(self, s, t):
        return self.origin + s[..., None] * self.e1 + t[..., None] * self.e2


def _render(K: CameraIntrinsics, R, t, plane: _Plane, tex, size: int) -> np.ndarray:
    # camera centre and ray directions in A's frame
    centre = -R.T @ t
    v, u = np.mgrid[0:size, 0:size] + 0.5
    rays_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], -1)
    rays = rays_cam @ R  # R^T applied row-wise
    denom = rays @ plane.normal
    lam = (plane.dist - centre @ plane.normal) / denom
    X = centre + lam[..., None] * rays
    tu, tv = plane.to_texture(X, tex.shape[0])
    return bilinear_sample(tex, tu, tv)


def _texture(seed: int, params: SceneParams) -> SyntheticPair:
    rng = np.random.default_rng(seed)
    size = params.image_size
    if size % 8:
        raise ConfigError("texture size must be a multiple of 8")
    K = default_intrinsics(size)
    pose = random_pose(rng, params.rot_deg)
    t = pose.t * params.baseline
    dist = 0.5 * (params.min_depth + params.max_depth)
    plane = _Plane(rng, dist, extent=dist * 1.5)
    tex = _texture_raster(rng, blank=params.blank)

    img_a = _render(K, np.eye(3), np.zeros(3), plane, tex, size)
    img_b = _render(K, pose.R, t, plane, tex, size)

    s, tt = rng.uniform(-0.4 * dist, 0.4 * dist, size=(2, 4 * params.n_points))
    X = plane.point(s, tt)
    Xb = X @ pose.R.T + t
    ok = (X[:, 2] > 0) & (Xb[:, 2] > 0)
    X, Xb = X[ok], Xb[ok]
    pa, pb = K.project(X), K.project(Xb)
    inside = np.all((pa >= 0) & (pa < size) & (pb >= 0) & (pb < size), axis=1)
    X, pa, pb = X[inside][: params.n_points], pa[inside][: params.n_points], pb[inside][: params.n_points]
    return SyntheticPair(
        gt_pose=pose, intrinsics=K, points3d=X, pix_a=pa, pix_b=pb, baseline=params.baseline,
        img_a=Image(img_a), img_b=Image(img_b),
    )


def gen_synthetic_pair(
    seed: int, mode: str = "injection", params: SceneParams = SceneParams(),
    mcfg: MatcherConfig = MatcherConfig(),
) -> SyntheticPair:
    if mode == "injection":
        return _injection(seed, params, mcfg)
    if mode == "texture":
        return _texture(seed, params)
    raise ConfigError(f"unknown synthetic mode {mode!r}")
