"""Finite-difference verification of the analytic attention gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionInputs,
    FocusedLinear,
    FocusParams,
    Linear,
    Softmax,
    attend,
    attention_grads,
    finite_diff_grad,
)
from .numgrid import GridShape

VARIANTS = ("softmax", "linear", "focused", "linear-elu1", "linear-unnormalized")


@dataclass
class GradCheckRow:
    variant: str
    seed: int
    max_rel_err: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(err < self.tol for err in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values())


def relative_error(analytic, numeric, floor_frac: float = 1e-3) -> float:
    """Largest entry-wise relative error.

    Entries much smaller than the tensor's largest entry are compared against
    ``floor_frac`` times that maximum, since central differences cannot
    resolve them below the round-off level of the loss.
    """
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor_frac * scale)
    return float((np.abs(a - n) / den).max())


def _push_from_zero(x, margin):
    sign = np.where(x >= 0.0, 1.0, -1.0)
    return np.where(np.abs(x) < margin, sign * (margin + np.abs(x)), x)


def make_variant(name: str, d_v: int, grid: GridShape, rng, p: float = 3.0):
    if name == "softmax":
        return Softmax()
    if name == "linear":
        return Linear("relu")
    if name == "linear-elu1":
        return Linear("elu1")
    if name == "linear-unnormalized":
        return Linear("relu", normalized=False)
    if name == "focused":
        kernel = rng.uniform(-0.5, 0.5, size=(d_v, 3, 3))
        return FocusedLinear(FocusParams(p=p, eps=1e-6, dw_kernel=kernel, v_grid=grid))
    raise ValueError(f"unknown variant {name!r}")


def check_variant(
    name: str, seed: int, side: int = 4, d: int = 8, h: float = 1e-5, tol: float = 1e-6,
    margin: float = 1e-3,
) -> GradCheckRow:
    """Compare analytic gradients with central differences on one random instance.

    Inputs are kept at least ``margin`` away from every ReLU kink.
    """
    rng = np.random.default_rng(seed)
    grid = GridShape(side, side)
    n = grid.n
    q = _push_from_zero(rng.normal(size=(n, d)), margin)
    k = _push_from_zero(rng.normal(size=(n, d)), margin)
    v = rng.normal(size=(n, d))
    upstream = rng.normal(size=(n, d))
    variant = make_variant(name, d, grid, rng)

    arrays = {"q": q, "k": k, "v": v}
    if isinstance(variant, FocusedLinear):
        arrays["dw_kernel"] = variant.params.dw_kernel

    def loss(arrs):
        var = variant
        if "dw_kernel" in arrs:
            var = FocusedLinear(
                FocusParams(variant.params.p, variant.params.eps, arrs["dw_kernel"], grid)
            )
        out = attend(var, AttentionInputs(arrs["q"], arrs["k"], arrs["v"]))
        return float((upstream * out).sum())

    analytic = attention_grads(variant, AttentionInputs(q, k, v), upstream)
    numeric = finite_diff_grad(loss, arrays, h)
    errs = {key: relative_error(analytic[key], numeric[key]) for key in arrays}
    return GradCheckRow(name, seed, errs, tol)


def run_gradcheck(variants=VARIANTS, seeds=range(5), h: float = 1e-5, tol: float = 1e-6, **kw):
    return [check_variant(name, s, h=h, tol=tol, **kw) for name in variants for s in seeds]
