"""Two-view geometry: essential matrix estimation, RANSAC, decomposition, pose error.

Conventions: a point X in camera A's frame maps to ``R @ X + t`` in camera B's
frame, normalized image points satisfy ``x_b^T E x_a = 0`` with
``E = [t]_x R``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import (
    AmbiguousDecompositionError,
    DegenerateConfigurationError,
    InsufficientDataError,
)
from ..numgrid import sym_eigen

# relative singular-value level below which a solve is treated as rank deficient
DEGENERACY_TOL = 1e-7


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def normalize(self, px) -> np.ndarray:
        px = np.asarray(px, dtype=np.float64)
        return np.stack([(px[..., 0] - self.cx) / self.fx, (px[..., 1] - self.cy) / self.fy], -1)

    def project(self, pts) -> np.ndarray:
        """Pixel coordinates of camera-frame 3-D points."""
        pts = np.asarray(pts, dtype=np.float64)
        return np.stack([self.fx * pts[..., 0] / pts[..., 2] + self.cx,
                         self.fy * pts[..., 1] / pts[..., 2] + self.cy], -1)


@dataclass(frozen=True, eq=False)
class RelPose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        n = np.linalg.norm(t)
        if n == 0:
            raise ValueError("translation direction must be non-zero")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t / n)

    def inverse(self) -> "RelPose":
        return RelPose(self.R.T, -self.R.T @ self.t)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = skew(axis)
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def essential_from_pose(R, t) -> np.ndarray:
    return skew(t) @ R


def rotation_angle(R) -> float:
    """Rotation angle of R in radians, accurate near 0 and pi."""
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return math.atan2(0.5 * np.linalg.norm(v), 0.5 * (np.trace(R) - 1.0))


def _hartley(x):
    """Similarity transforms taking each point set to zero mean, mean norm sqrt(2)."""
    mean = x.mean(axis=-2, keepdims=True)
    d = np.linalg.norm(x - mean, axis=-1).mean(axis=-1)
    s = np.where(d > 0, math.sqrt(2.0) / np.where(d > 0, d, 1.0), 1.0)
    T = np.zeros(x.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * mean[..., 0, 0]
    T[..., 1, 2] = -s * mean[..., 0, 1]
    T[..., 2, 2] = 1.0
    xn = (x - mean) * s[..., None, None]
    return xn, T


def svd3(E):
    """SVD of (stacks of) 3x3 matrices built on the symmetric eigensolver.

    Returns U, S, V with singular values descending and det(U) = det(V) = +1;
    the third singular vectors are fixed by cross products, which is exact
    only for the rank-2 matrices this module produces. Going through E^T E
    resolves the smallest singular value only to about sqrt(eps) * S[0];
    callers here use just the leading two singular pairs.
    """
    w, vecs = sym_eigen(np.swapaxes(E, -1, -2) @ E)
    V = vecs[..., ::-1]
    S = np.sqrt(np.maximum(w[..., ::-1], 0.0))
    v1, v2 = V[..., :, 0], V[..., :, 1]
    V = np.stack([v1, v2, np.cross(v1, v2)], axis=-1)
    Ev = E @ V
    safe = np.where(S[..., :2] > 0, S[..., :2], 1.0)
    u1 = Ev[..., :, 0] / safe[..., 0, None]
    u2 = Ev[..., :, 1] / safe[..., 1, None]
    # re-orthonormalize u2 against u1 (both are unit up to round-off)
    u2 = u2 - (u1 * u2).sum(-1, keepdims=True) * u1
    u2 = u2 / np.maximum(np.linalg.norm(u2, axis=-1, keepdims=True), 1e-300)
    U = np.stack([u1, u2, np.cross(u1, u2)], axis=-1)
    return U, S, V


def project_to_essential(E):
    """Closest matrix with singular values (1, 1, 0); also returns a rank-2 flag."""
    U, S, V = svd3(E)
    ok = S[..., 1] > DEGENERACY_TOL * np.maximum(S[..., 0], 1e-300)
    Ep = U[..., :, :2] @ np.swapaxes(V[..., :, :2], -1, -2)
    return Ep, ok


def _eight_point_batch(xa, xb, weights=None):
    """Least-squares E for stacks of normalized correspondences (..., M, 2).

    Optional per-correspondence ``weights`` scale the rows of the linear system.
    """
    na, Ta = _hartley(xa)
    nb, Tb = _hartley(xb)
    ha = np.concatenate([na, np.ones(na.shape[:-1] + (1,))], axis=-1)
    hb = np.concatenate([nb, np.ones(nb.shape[:-1] + (1,))], axis=-1)
    rows = (hb[..., :, :, None] * ha[..., :, None, :]).reshape(ha.shape[:-1] + (9,))
    if weights is not None:
        rows = rows * weights[..., None]
    normal = np.swapaxes(rows, -1, -2) @ rows
    w, vecs = sym_eigen(normal)
    top = np.maximum(w[..., -1], 1e-300)
    # a second near-zero direction means the solution is not unique
    ok = np.sqrt(np.maximum(w[..., 1], 0.0) / top) > DEGENERACY_TOL
    E_n = vecs[..., :, 0].reshape(w.shape[:-1] + (3, 3))
    E = np.swapaxes(Tb, -1, -2) @ E_n @ Ta
    E, rank_ok = project_to_essential(E)
    return E, ok & rank_ok


def essential_8point(xa, xb, weights=None) -> np.ndarray:
    """Normalized 8-point essential matrix from >= 8 normalized correspondences.

    The result is projected onto the essential manifold (singular values 1, 1, 0).
    """
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    if xa.shape != xb.shape or xa.ndim != 2 or xa.shape[1] != 2:
        raise ValueError("correspondences must be two (M, 2) arrays")
    if len(xa) < 8:
        raise InsufficientDataError(f"8-point solve needs >= 8 correspondences, got {len(xa)}")
    E, ok = _eight_point_batch(xa, xb, weights)
    if not ok:
        raise DegenerateConfigurationError("correspondences do not determine a unique essential matrix")
    return E


def sampson_distance(F, pa, pb) -> np.ndarray:
    """First-order geometric epipolar error (pixels) of pixel pairs under F.

    ``F`` may be a stack (..., 3, 3); the result has shape (..., M).
    """
    ha = np.concatenate([pa, np.ones((len(pa), 1))], axis=1)
    hb = np.concatenate([pb, np.ones((len(pb), 1))], axis=1)
    Fx = ha @ np.swapaxes(F, -1, -2)  # rows: F x_a
    Ftx = hb @ F  # rows: F^T x_b
    num = (hb * Fx).sum(-1)
    den = Fx[..., 0] ** 2 + Fx[..., 1] ** 2 + Ftx[..., 0] ** 2 + Ftx[..., 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def fundamental_from_essential(E, K: CameraIntrinsics) -> np.ndarray:
    Kinv = np.linalg.inv(K.matrix)
    return Kinv.T @ E @ Kinv


def _sampson_weights(E, xa, xb):
    ha = np.concatenate([xa, np.ones((len(xa), 1))], axis=1)
    hb = np.concatenate([xb, np.ones((len(xb), 1))], axis=1)
    Ex = ha @ E.T
    Etx = hb @ E
    den = Ex[:, 0] ** 2 + Ex[:, 1] ** 2 + Etx[:, 0] ** 2 + Etx[:, 1] ** 2
    return 1.0 / np.sqrt(np.maximum(den, 1e-300))


def refine_essential(E, xa, xb, rounds: int = 3) -> np.ndarray:
    """Re-solve with rows weighted by the Sampson denominator of the previous estimate."""
    for _ in range(rounds):
        E = essential_8point(xa, xb, _sampson_weights(E, xa, xb))
    return E


def ransac_essential(
    pa, pb, K: CameraIntrinsics, iters: int = 1000, px_thresh: float = 1.0, seed: int = 0,
    sample_size: int = 8, refit_rounds: int = 10,
):
    """Robust E from pixel matches: 8-point hypotheses scored by Sampson distance.

    Inliers are matches with Sampson distance below ``px_thresh``. Hypotheses
    are ranked by the truncated cost sum(min(d^2, px_thresh^2)), lowest index
    winning ties. The winner is refit on its inliers with Sampson-weighted
    8-point solves for as long as the cost keeps dropping. Returns
    ``(E, inlier_mask)``, the mask always recomputed from the returned E.
    """
    pa = np.asarray(pa, dtype=np.float64)
    pb = np.asarray(pb, dtype=np.float64)
    m = len(pa)
    if m < 8:
        raise InsufficientDataError(f"RANSAC needs >= 8 matches, got {m}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    sample_size = min(max(sample_size, 8), m)
    xa, xb = K.normalize(pa), K.normalize(pb)
    rng = np.random.default_rng(seed)
    samples = np.argsort(rng.random((iters, m)), axis=1)[:, :sample_size]
    th2 = px_thresh * px_thresh

    def cost(dist):
        return np.minimum(dist * dist, th2).sum(axis=-1)

    E_all, ok = _eight_point_batch(xa[samples], xb[samples])
    if not ok.any():
        raise DegenerateConfigurationError("every RANSAC sample was degenerate")
    dist_all = sampson_distance(fundamental_from_essential(E_all, K), pa, pb)
    costs = np.where(ok, cost(dist_all), np.inf)
    best = int(np.argmin(costs))
    E, dist, best_cost = E_all[best], dist_all[best], costs[best]

    for _ in range(refit_rounds):
        mask = dist < px_thresh
        if mask.sum() < 8:
            break
        try:
            E_fit = refine_essential(E, xa[mask], xb[mask])
        except DegenerateConfigurationError:
            break
        dist_fit = sampson_distance(fundamental_from_essential(E_fit, K), pa, pb)
        c = cost(dist_fit)
        if not c < best_cost:
            break
        E, dist, best_cost = E_fit, dist_fit, c
    return E, dist < px_thresh


def triangulate(R, t, xa, xb) -> np.ndarray:
    """Linear (DLT) triangulation; returns homogeneous points (M, 4)."""
    P_a = np.hstack([np.eye(3), np.zeros((3, 1))])
    P_b = np.hstack([R, np.reshape(t, (3, 1))])
    A = np.stack([
        xa[:, 0, None] * P_a[2] - P_a[0],
        xa[:, 1, None] * P_a[2] - P_a[1],
        xb[:, 0, None] * P_b[2] - P_b[0],
        xb[:, 1, None] * P_b[2] - P_b[1],
    ], axis=1)
    _, vecs = sym_eigen(np.swapaxes(A, -1, -2) @ A)
    return vecs[..., :, 0]


def _cheirality(R, t, xa, xb) -> int:
    X = triangulate(R, t, xa, xb)
    w = X[:, 3]
    finite = np.abs(w) > 1e-12
    w = np.where(finite, w, 1.0)
    pts = X[:, :3] / w[:, None]
    z_a = pts[:, 2]
    z_b = (pts @ R.T + t)[:, 2]
    return int((finite & (z_a > 0) & (z_b > 0)).sum())


def decompose_essential(E, xa, xb) -> RelPose:
    """Pick the (R, t) among the four factorizations of E with the most points in front.

    ``xa``/``xb`` are normalized image coordinates. Raises
    AmbiguousDecompositionError when no candidate is strictly best.
    """
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    U, _, V = svd3(np.asarray(E, dtype=np.float64))
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    u3 = U[:, 2]
    cands = []
    for Rc in (U @ W @ V.T, U @ W.T @ V.T):
        for tc in (u3, -u3):
            cands.append((Rc, tc, _cheirality(Rc, tc, xa, xb)))
    counts = sorted((c[2] for c in cands), reverse=True)
    if counts[0] == 0 or counts[0] == counts[1]:
        raise AmbiguousDecompositionError(f"cheirality does not single out a pose (counts {counts})")
    Rb, tb, _ = max(cands, key=lambda c: c[2])
    return RelPose(Rb, tb)


def angle_between(a, b, fold_sign: bool = False) -> float:
    """Angle in degrees between two vectors; with ``fold_sign`` the result is in [0, 90]."""
    dot = float(np.dot(a, b))
    if fold_sign:
        dot = abs(dot)
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), dot))
