"""Dense float64 building blocks: feature grids, softmax, depth-wise convolution
and a batched cyclic-Jacobi symmetric eigensolver.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Feature grids
store their tokens row-major, so token ``y * width + x`` lives at cell (x, y).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class GridShape:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.height}x{self.width}")

    @property
    def n(self) -> int:
        return self.height * self.width


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """H x W grid of d-dimensional descriptors, tokens stored as an (H*W, d) matrix."""

    height: int
    width: int
    tokens: np.ndarray

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] != self.height * self.width:
            raise ShapeError(
                f"tokens of shape {tokens.shape} do not fit a {self.height}x{self.width} grid"
            )
        object.__setattr__(self, "tokens", tokens)

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    @property
    def shape(self) -> GridShape:
        return GridShape(self.height, self.width)

    def index(self, x: int, y: int) -> int:
        return y * self.width + x

    def coords(self, idx: int) -> tuple[int, int]:
        return idx % self.width, idx // self.width

    def to_hwc(self) -> np.ndarray:
        return self.tokens.reshape(self.height, self.width, self.dim)

    @classmethod
    def from_hwc(cls, arr: np.ndarray) -> "FeatureGrid":
        h, w, c = arr.shape
        return cls(h, w, np.ascontiguousarray(arr, dtype=np.float64).reshape(h * w, c))


def as_mat(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_mat(a), as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_softmax(a, scale: float = 1.0) -> np.ndarray:
    """Softmax of ``scale * a`` along the last axis, max-subtracted for stability."""
    z = scale * np.asarray(a, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_kernel(kernel: np.ndarray, channels: int) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 3 or kernel.shape[1] != kernel.shape[2]:
        raise ShapeError(f"kernel must have shape (channels, k, k), got {kernel.shape}")
    if kernel.shape[1] % 2 == 0:
        raise ConfigError(f"depth-wise kernel size must be odd, got {kernel.shape[1]}")
    if kernel.shape[0] != channels:
        raise ShapeError(f"kernel has {kernel.shape[0]} channel slices, grid has {channels}")
    return kernel


def dwconv_hwc(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Depth-wise cross-correlation of an (H, W, C) array, zero padded, stride 1."""
    kernel = _check_kernel(kernel, x.shape[2])
    k = kernel.shape[1]
    r = k // 2
    h, w, _ = x.shape
    padded = np.pad(x, ((r, r), (r, r), (0, 0)))
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out += kernel[:, i, j] * padded[i : i + h, j : j + w, :]
    return out


def depthwise_conv2d(grid: FeatureGrid, kernel) -> FeatureGrid:
    """Per-channel k x k convolution of a feature grid (odd k, zero padding)."""
    return FeatureGrid.from_hwc(dwconv_hwc(grid.to_hwc(), kernel))


def sym_eigen(a, tol: float = 1e-15, max_sweeps: int = 60):
    """Eigen-decomposition of symmetric matrices by cyclic Jacobi rotations.

    Accepts a single (n, n) matrix or a stack (..., n, n); every matrix in the
    stack is rotated in lock-step. Returns ``(eigenvalues, eigenvectors)`` with
    eigenvalues ascending and eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"sym_eigen needs square matrices, got shape {a.shape}")
    scale = np.abs(a).max() if a.size else 0.0
    if np.abs(a - np.swapaxes(a, -1, -2)).max(initial=0.0) > 1e-9 * max(1.0, scale):
        raise ValueError("sym_eigen input is not symmetric")

    n = a.shape[-1]
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    v = np.broadcast_to(np.eye(n), a.shape).copy()
    norm = np.sqrt((a * a).sum(axis=(-2, -1)))
    off_mask = ~np.eye(n, dtype=bool)

    for _ in range(max_sweeps):
        off = np.sqrt((a[..., off_mask] ** 2).sum(axis=-1))
        if np.all(off <= tol * np.maximum(norm, np.finfo(float).tiny)):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[..., p, q]
                nz = apq != 0.0
                if not np.any(nz):
                    continue
                app = a[..., p, p]
                aqq = a[..., q, q]
                with np.errstate(divide="ignore", invalid="ignore"):
                    theta = np.where(nz, (aqq - app) / (2.0 * apq), 0.0)
                sgn = np.where(theta >= 0.0, 1.0, -1.0)
                t = np.where(nz, sgn / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                cc = c[..., None]
                ss = s[..., None]

                rp = a[..., p, :].copy()
                rq = a[..., q, :]
                a[..., p, :] = cc * rp - ss * rq
                a[..., q, :] = ss * rp + cc * rq
                cp = a[..., :, p].copy()
                cq = a[..., :, q]
                a[..., :, p] = cc * cp - ss * cq
                a[..., :, q] = ss * cp + cc * cq
                vp = v[..., :, p].copy()
                vq = v[..., :, q]
                v[..., :, p] = cc * vp - ss * vq
                v[..., :, q] = ss * vp + cc * vq

    w = np.diagonal(a, axis1=-2, axis2=-1).copy()
    order = np.argsort(w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    v = np.take_along_axis(v, order[..., None, :], axis=-1)
    return w, v
