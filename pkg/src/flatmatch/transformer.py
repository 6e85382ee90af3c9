"""Interleaved self/cross attention stacks for the coarse and fine levels."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .attention import AttentionInputs, AttentionVariant, FocusedLinear, attend
from .errors import ConfigError, ShapeError
from .numgrid import FeatureGrid, GridShape

# Token sets are feature grids: an (N, d) matrix plus the grid it lives on.
TokenSet = FeatureGrid

LN_EPS = 1e-12
LAYER_KEYS = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b", "dw_kernel")


@dataclass(frozen=True)
class TransformerConfig:
    num_coarse_blocks: int = 4
    num_fine_blocks: int = 1
    dim: int = 64
    fine_dim: int = 32
    variant: AttentionVariant = field(default_factory=FocusedLinear)
    seed: int = 0
    heads: int = 1
    dwconv: bool = True
    positional: bool = True

    def __post_init__(self):
        if self.num_coarse_blocks < 1:
            raise ConfigError("num_coarse_blocks must be >= 1")
        if self.num_fine_blocks < 0:
            raise ConfigError("num_fine_blocks must be >= 0")
        for d in (self.dim, self.fine_dim):
            if d % 4:
                raise ConfigError(f"feature dim {d} must be divisible by 4")
            if d % self.heads:
                raise ConfigError(f"{self.heads} heads do not divide dim {d}")


@dataclass(eq=False)
class EncoderLayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    dw_kernel: np.ndarray

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "EncoderLayerParams":
        def uni(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            wq=uni((dim, dim), dim),
            wk=uni((dim, dim), dim),
            wv=uni((dim, dim), dim),
            wo=uni((dim, dim), dim),
            w1=uni((dim, 2 * dim), dim),
            b1=np.zeros(2 * dim),
            w2=uni((2 * dim, dim), 2 * dim),
            b2=np.zeros(dim),
            ln1_g=np.ones(dim),
            ln1_b=np.zeros(dim),
            ln2_g=np.ones(dim),
            ln2_b=np.zeros(dim),
            dw_kernel=uni((dim, 3, 3), 9),
        )


@dataclass(eq=False)
class StackWeights:
    """One (self, cross) parameter pair per block; both images share them."""

    blocks: list

    @property
    def dim(self) -> int:
        return self.blocks[0][0].dim if self.blocks else 0

    @classmethod
    def init(cls, dim: int, n_blocks: int, rng: np.random.Generator) -> "StackWeights":
        return cls([(EncoderLayerParams.init(dim, rng), EncoderLayerParams.init(dim, rng))
                    for _ in range(n_blocks)])

    def to_sections(self, prefix: str) -> dict:
        out = {}
        for b, (self_p, cross_p) in enumerate(self.blocks):
            for kind, params in (("self", self_p), ("cross", cross_p)):
                for key in LAYER_KEYS:
                    out[f"{prefix}.{b}.{kind}.{key}"] = getattr(params, key)
        return out

    @classmethod
    def from_sections(cls, sections: dict, prefix: str) -> "StackWeights":
        blocks = []
        b = 0
        while f"{prefix}.{b}.self.wq" in sections:
            pair = []
            for kind in ("self", "cross"):
                try:
                    pair.append(EncoderLayerParams(
                        **{key: sections[f"{prefix}.{b}.{kind}.{key}"] for key in LAYER_KEYS}
                    ))
                except KeyError as exc:
                    raise ConfigError(f"weight section {exc.args[0]} missing") from None
            blocks.append(tuple(pair))
            b += 1
        return cls(blocks)


@dataclass(eq=False)
class TransformerWeights:
    coarse: StackWeights
    fine: StackWeights

    @classmethod
    def init(cls, cfg: TransformerConfig) -> "TransformerWeights":
        rng = np.random.default_rng(cfg.seed)
        coarse = StackWeights.init(cfg.dim, cfg.num_coarse_blocks, rng)
        fine = StackWeights.init(cfg.fine_dim, cfg.num_fine_blocks, rng)
        return cls(coarse, fine)

    def to_sections(self) -> dict:
        return {**self.coarse.to_sections("coarse_xf"), **self.fine.to_sections("fine_xf")}

    @classmethod
    def from_sections(cls, sections: dict) -> "TransformerWeights":
        return cls(StackWeights.from_sections(sections, "coarse_xf"),
                   StackWeights.from_sections(sections, "fine_xf"))


def positional_encoding(grid: GridShape, dim: int) -> np.ndarray:
    """2-D sinusoidal encoding: channels 4k..4k+3 hold sin/cos of x and y at frequency k."""
    if dim % 4:
        raise ConfigError(f"positional encoding dim must be divisible by 4, got {dim}")
    freqs = np.exp(-math.log(10000.0) * 4.0 * np.arange(dim // 4) / dim)
    ys, xs = np.divmod(np.arange(grid.n), grid.width)
    pe = np.empty((grid.n, dim))
    pe[:, 0::4] = np.sin(xs[:, None] * freqs)
    pe[:, 1::4] = np.cos(xs[:, None] * freqs)
    pe[:, 2::4] = np.sin(ys[:, None] * freqs)
    pe[:, 3::4] = np.cos(ys[:, None] * freqs)
    return pe


def layer_norm(x: np.ndarray, gain=None, bias=None) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + LN_EPS)
    if gain is not None:
        y = y * gain + bias
    return y


def _layer_variant(variant, x: TokenSet, source: TokenSet, params, dwconv, diag):
    if not isinstance(variant, FocusedLinear):
        return variant
    fp = variant.params
    if dwconv and x.tokens.shape[0] == source.tokens.shape[0]:
        return FocusedLinear(replace(fp, dw_kernel=params.dw_kernel, v_grid=source.shape))
    if dwconv and diag is not None:
        diag["dwconv_skipped"] += 1
    return FocusedLinear(replace(fp, dw_kernel=None, v_grid=None))


def encoder_layer(
    x: TokenSet,
    source: TokenSet,
    params: EncoderLayerParams,
    variant: AttentionVariant,
    heads: int = 1,
    dwconv: bool = True,
    diag: Optional[Counter] = None,
) -> TokenSet:
    """Attention, residual, LayerNorm, then a ReLU MLP (hidden 2d), residual, LayerNorm.

    Pass ``source is x`` for self-attention. With the focused variant the
    layer's DWConv kernel is used only when x and source hold equally many
    tokens; otherwise the branch is dropped and ``diag["dwconv_skipped"]``
    is incremented.
    """
    d = params.dim
    if x.dim != d or source.dim != d:
        raise ShapeError(f"layer dim {d} does not match token dims {x.dim}/{source.dim}")
    var = _layer_variant(variant, x, source, params, dwconv, diag)
    inp = AttentionInputs(x.tokens @ params.wq, source.tokens @ params.wk, source.tokens @ params.wv)
    message = attend(var, inp, heads) @ params.wo
    y = layer_norm(x.tokens + message, params.ln1_g, params.ln1_b)
    hidden = np.maximum(y @ params.w1 + params.b1, 0.0)
    out = layer_norm(y + hidden @ params.w2 + params.b2, params.ln2_g, params.ln2_b)
    return FeatureGrid(x.height, x.width, out)


def run_stack(
    fa: TokenSet,
    fb: TokenSet,
    weights: StackWeights,
    variant: AttentionVariant,
    heads: int = 1,
    dwconv: bool = True,
    positional: bool = True,
    diag: Optional[Counter] = None,
):
    if fa.dim != fb.dim:
        raise ShapeError(f"token dims differ: {fa.dim} vs {fb.dim}")
    if not weights.blocks:
        return fa, fb
    if fa.dim != weights.dim:
        raise ShapeError(f"tokens have dim {fa.dim}, weights expect {weights.dim}")
    if positional:
        fa = FeatureGrid(fa.height, fa.width, fa.tokens + positional_encoding(fa.shape, fa.dim))
        fb = FeatureGrid(fb.height, fb.width, fb.tokens + positional_encoding(fb.shape, fb.dim))
    for self_p, cross_p in weights.blocks:
        fa = encoder_layer(fa, fa, self_p, variant, heads, dwconv, diag)
        fb = encoder_layer(fb, fb, self_p, variant, heads, dwconv, diag)
        # both cross updates read the pre-cross states so swapping A and B swaps the outputs
        fa, fb = (encoder_layer(fa, fb, cross_p, variant, heads, dwconv, diag),
                  encoder_layer(fb, fa, cross_p, variant, heads, dwconv, diag))
    return fa, fb


def feature_transformer(
    fa: TokenSet, fb: TokenSet, cfg: TransformerConfig, weights: TransformerWeights,
    diag: Optional[Counter] = None,
):
    """Map the coarse grids of both images to their transformed counterparts."""
    if fa.dim != cfg.dim or fb.dim != cfg.dim:
        raise ShapeError(f"coarse tokens must have dim {cfg.dim}")
    return run_stack(fa, fb, weights.coarse, cfg.variant, cfg.heads, cfg.dwconv,
                     cfg.positional, diag)


def fine_transformer(
    windows_a: list, windows_b: list, cfg: TransformerConfig, weights: TransformerWeights,
    diag: Optional[Counter] = None,
):
    """Run the small fine-level stack independently on each (A, B) window pair."""
    if len(windows_a) != len(windows_b):
        raise ShapeError("window lists differ in length")
    out_a, out_b = [], []
    for wa, wb in zip(windows_a, windows_b):
        if (wa.height, wa.width) != (wb.height, wb.width) or wa.height != wa.width:
            raise ShapeError(f"window shapes differ: {wa.height}x{wa.width} vs {wb.height}x{wb.width}")
        ra, rb = run_stack(wa, wb, weights.fine, cfg.variant, cfg.heads, cfg.dwconv,
                           cfg.positional, diag)
        out_a.append(ra)
        out_b.append(rb)
    return out_a, out_b
