"""Softmax, linear and focused linear attention with analytic gradients.

All kernels take an :class:`AttentionInputs` triple of row-major token
matrices (one token per row) and return an (N_q, d_v) matrix. Gradients are
vector-Jacobian products: given the upstream gradient of a scalar loss with
respect to the output, :func:`attention_grads` returns the gradients with
respect to Q, K, V and, for the focused variant, the depth-wise kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from .errors import ConfigError, ShapeError
from .numgrid import GridShape, dwconv_hwc, row_softmax


@dataclass(frozen=True, eq=False)
class AttentionInputs:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q, k, v = (np.asarray(m, dtype=np.float64) for m in (self.q, self.k, self.v))
        if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
            raise ShapeError("Q, K and V must be 2-D matrices")
        if q.shape[1] != k.shape[1]:
            raise ShapeError(f"Q has {q.shape[1]} columns but K has {k.shape[1]}")
        if k.shape[0] != v.shape[0]:
            raise ShapeError(f"K has {k.shape[0]} rows but V has {v.shape[0]}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)


@dataclass(frozen=True, eq=False)
class FocusParams:
    """Focusing exponent ``p``, division guard ``eps`` and the optional DWConv branch.

    ``dw_kernel`` has shape (d_v, 3, 3) and ``v_grid`` gives the grid V is laid
    out on. Leaving ``dw_kernel`` as None disables the convolution branch.
    """

    p: float = 3.0
    eps: float = 1e-6
    dw_kernel: Optional[np.ndarray] = None
    v_grid: Optional[GridShape] = None

    def __post_init__(self):
        if self.p < 1:
            raise ConfigError(f"focusing exponent p must be >= 1, got {self.p}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")


@dataclass(frozen=True)
class Softmax:
    # None means 1/sqrt(d); 1.0 reproduces the unscaled textbook form
    scale: Optional[float] = None


@dataclass(frozen=True)
class Linear:
    kernel: str = "relu"
    normalized: bool = True
    eps: float = 1e-6

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown linear-attention kernel {self.kernel!r}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")


@dataclass(frozen=True)
class FocusedLinear:
    params: FocusParams = field(default_factory=FocusParams)


AttentionVariant = Union[Softmax, Linear, FocusedLinear]


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x):
    return (x > 0.0).astype(np.float64)


def _elu1(x):
    return np.where(x > 0.0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def _elu1_grad(x):
    return np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


KERNELS = {
    "relu": (_relu, _relu_grad),
    "elu1": (_elu1, _elu1_grad),
}


def _softmax_scale(scale, d):
    return 1.0 / math.sqrt(d) if scale is None else float(scale)


def softmax_attention(inp: AttentionInputs, scale: Optional[float] = None) -> np.ndarray:
    weights = row_softmax(inp.q @ inp.k.T, _softmax_scale(scale, inp.q.shape[1]))
    return weights @ inp.v


def _linear_core(fq, fk, v, normalized, eps):
    kv = fk.T @ v
    num = fq @ kv
    if not normalized:
        return num
    den = fq @ fk.sum(axis=0) + eps
    return num / den[:, None]


def _linear_core_vjp(fq, fk, v, normalized, eps, g):
    kv = fk.T @ v
    if not normalized:
        return g @ kv.T, v @ (fq.T @ g).T, fk @ (fq.T @ g)
    ksum = fk.sum(axis=0)
    den = fq @ ksum + eps
    out = (fq @ kv) / den[:, None]
    g_num = g / den[:, None]
    g_den = -(g * out).sum(axis=1) / den
    d_fq = g_num @ kv.T + np.outer(g_den, ksum)
    d_kv = fq.T @ g_num
    d_fk = v @ d_kv.T + (fq.T @ g_den)[None, :]
    d_v = fk @ d_kv
    return d_fq, d_fk, d_v


def linear_attention(
    inp: AttentionInputs, kernel: str = "relu", normalized: bool = True, eps: float = 1e-6
) -> np.ndarray:
    """phi(Q) (phi(K)^T V), optionally divided row-wise by phi(Q) phi(K)^T 1 + eps."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    phi, _ = KERNELS[kernel]
    return _linear_core(phi(inp.q), phi(inp.k), inp.v, normalized, eps)


def focused_map(x, p: float = 3.0, eps: float = 1e-6) -> np.ndarray:
    """Row-wise ReLU, element-wise power p, rescaled back to the ReLU norm.

    Rows whose powered norm is at most ``eps`` map to zero.
    """
    if p < 1:
        raise ConfigError(f"focusing exponent p must be >= 1, got {p}")
    r = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    u = r**p
    r_norm = np.linalg.norm(r, axis=-1, keepdims=True)
    u_norm = np.linalg.norm(u, axis=-1, keepdims=True)
    ok = u_norm > eps
    ratio = np.divide(r_norm, u_norm, out=np.zeros_like(u_norm), where=ok)
    return ratio * u


def _focused_map_vjp(x, p, eps, g):
    r = np.maximum(x, 0.0)
    u = r**p
    a = np.linalg.norm(r, axis=-1, keepdims=True)
    b = np.linalg.norm(u, axis=-1, keepdims=True)
    ok = b > eps
    a_s = np.where(ok, a, 1.0)
    b_s = np.where(ok, b, 1.0)
    gu = (g * u).sum(axis=-1, keepdims=True)
    # f = (a / b) u with a = |r|, b = |r^p|
    d_r = gu / b_s * r / a_s + (a_s / b_s * g - a_s * gu / b_s**3 * u) * p * r ** (p - 1.0)
    d_r = np.where(ok, d_r, 0.0)
    return d_r * (x > 0.0)


def _conv_inputs(inp: AttentionInputs, fp: FocusParams):
    grid = fp.v_grid
    if grid is None:
        raise ConfigError("the DWConv branch needs v_grid to lay V out spatially")
    if grid.n != inp.v.shape[0]:
        raise ShapeError(f"V has {inp.v.shape[0]} tokens, grid {grid.height}x{grid.width} has {grid.n}")
    if inp.q.shape[0] != inp.k.shape[0]:
        raise ShapeError("the DWConv branch requires equal query and key token counts")
    return inp.v.reshape(grid.height, grid.width, inp.v.shape[1])


def focused_linear_attention(inp: AttentionInputs, fp: FocusParams) -> np.ndarray:
    """Normalized linear attention under the focused map, plus DWConv(V) when configured."""
    fq = focused_map(inp.q, fp.p, fp.eps)
    fk = focused_map(inp.k, fp.p, fp.eps)
    out = _linear_core(fq, fk, inp.v, True, fp.eps)
    if fp.dw_kernel is not None:
        v_hwc = _conv_inputs(inp, fp)
        out = out + dwconv_hwc(v_hwc, fp.dw_kernel).reshape(out.shape)
    return out


def attend(variant: AttentionVariant, inp: AttentionInputs, heads: int = 1) -> np.ndarray:
    """Dispatch on the variant; ``heads > 1`` splits the channels into equal slices."""
    if heads > 1:
        d, dv = inp.q.shape[1], inp.v.shape[1]
        if d % heads or dv % heads:
            raise ConfigError(f"{heads} heads do not divide dims {d}/{dv}")
        hd, hv = d // heads, dv // heads
        parts = []
        for h in range(heads):
            sub = AttentionInputs(
                inp.q[:, h * hd : (h + 1) * hd],
                inp.k[:, h * hd : (h + 1) * hd],
                inp.v[:, h * hv : (h + 1) * hv],
            )
            if isinstance(variant, FocusedLinear) and variant.params.dw_kernel is not None:
                sub_params = replace(
                    variant.params, dw_kernel=variant.params.dw_kernel[h * hv : (h + 1) * hv]
                )
                parts.append(focused_linear_attention(sub, sub_params))
            else:
                parts.append(attend(variant, sub))
        return np.concatenate(parts, axis=1)
    if isinstance(variant, Softmax):
        return softmax_attention(inp, variant.scale)
    if isinstance(variant, Linear):
        return linear_attention(inp, variant.kernel, variant.normalized, variant.eps)
    if isinstance(variant, FocusedLinear):
        return focused_linear_attention(inp, variant.params)
    raise ConfigError(f"unsupported attention variant {variant!r}")


def attention_grads(variant: AttentionVariant, inp: AttentionInputs, upstream) -> dict:
    """Gradients of ``sum(upstream * attend(variant, inp))``.

    Returns a dict with keys ``q``, ``k``, ``v`` and, when the focused variant
    has a DWConv kernel, ``dw_kernel``. ReLU is given subgradient 0 at 0.
    """
    g = np.asarray(upstream, dtype=np.float64)
    out_shape = (inp.q.shape[0], inp.v.shape[1])
    if g.shape != out_shape:
        raise ShapeError(f"upstream shape {g.shape} != output shape {out_shape}")
    q, k, v = inp.q, inp.k, inp.v

    if isinstance(variant, Softmax):
        s = _softmax_scale(variant.scale, q.shape[1])
        a = row_softmax(q @ k.T, s)
        d_a = g @ v.T
        d_z = a * (d_a - (d_a * a).sum(axis=1, keepdims=True))
        return {"q": s * d_z @ k, "k": s * d_z.T @ q, "v": a.T @ g}

    if isinstance(variant, Linear):
        phi, dphi = KERNELS[variant.kernel]
        d_fq, d_fk, d_v = _linear_core_vjp(phi(q), phi(k), v, variant.normalized, variant.eps, g)
        return {"q": d_fq * dphi(q), "k": d_fk * dphi(k), "v": d_v}

    if isinstance(variant, FocusedLinear):
        fp = variant.params
        fq = focused_map(q, fp.p, fp.eps)
        fk = focused_map(k, fp.p, fp.eps)
        d_fq, d_fk, d_v = _linear_core_vjp(fq, fk, v, True, fp.eps, g)
        grads = {
            "q": _focused_map_vjp(q, fp.p, fp.eps, d_fq),
            "k": _focused_map_vjp(k, fp.p, fp.eps, d_fk),
        }
        if fp.dw_kernel is not None:
            v_hwc = _conv_inputs(inp, fp)
            d_conv_v, d_w = _dwconv_vjp(v_hwc, fp.dw_kernel, g.reshape(v_hwc.shape))
            d_v = d_v + d_conv_v.reshape(d_v.shape)
            grads["dw_kernel"] = d_w
        grads["v"] = d_v
        return grads

    raise ConfigError(f"unsupported attention variant {variant!r}")


def _dwconv_vjp(x, kernel, g):
    kernel = np.asarray(kernel, dtype=np.float64)
    ksz = kernel.shape[1]
    r = ksz // 2
    h, w, _ = x.shape
    padded = np.pad(x, ((r, r), (r, r), (0, 0)))
    d_pad = np.zeros_like(padded)
    d_w = np.zeros_like(kernel)
    for i in range(ksz):
        for j in range(ksz):
            d_w[:, i, j] = (g * padded[i : i + h, j : j + w, :]).sum(axis=(0, 1))
            d_pad[i : i + h, j : j + w, :] += kernel[:, i, j] * g
    return d_pad[r : r + h, r : r + w, :], d_w


def finite_diff_grad(
    loss: Callable[[dict], float], arrays: dict, h: float = 1e-5
) -> dict:
    """Central-difference gradient of ``loss`` with respect to every array in ``arrays``."""
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    base = {name: np.array(a, dtype=np.float64) for name, a in arrays.items()}
    grads = {}
    for name, a in base.items():
        grad = np.zeros_like(a)
        flat = a.reshape(-1)
        for idx in range(flat.size):
            x0 = flat[idx]
            flat[idx] = x0 + h
            f_plus = loss(base)
            flat[idx] = x0 - h
            f_minus = loss(base)
            flat[idx] = x0
            grad.reshape(-1)[idx] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = grad
    return grads
