"""Small strided conv pyramid producing coarse (1/8) and fine (1/2) feature grids.

Layout (HWC arrays, 3x3 convs with zero padding, ReLU between stages)::

    stem   1/2  in -> 16
    stage1 1/4  16 -> 32
    stage2 1/8  32 -> 64
    head   1/8  64 -> 64                      -> coarse
    smooth(lat_fine(stem) + up4(lat_coarse(head)))  1/2, 32 -> fine
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .fileformats import Image, read_sections, write_sections
from .numgrid import FeatureGrid

COARSE_DIM = 64
FINE_DIM = 32
# (name, kernel size, stride); shapes are (out, in, k, k)
STAGES = (("stem", 3, 2), ("stage1", 3, 2), ("stage2", 3, 2), ("head", 3, 1))
WEIGHT_NAMES = ("stem", "stage1", "stage2", "head", "lat_coarse", "lat_fine", "smooth")


@dataclass(eq=False)
class BackboneWeights:
    stem: np.ndarray
    stage1: np.ndarray
    stage2: np.ndarray
    head: np.ndarray
    lat_coarse: np.ndarray
    lat_fine: np.ndarray
    smooth: np.ndarray

    @property
    def in_channels(self) -> int:
        return self.stem.shape[1]

    def to_sections(self) -> dict:
        return {f"backbone.{name}": getattr(self, name) for name in WEIGHT_NAMES}

    @classmethod
    def from_sections(cls, sections: dict) -> "BackboneWeights":
        missing = [n for n in WEIGHT_NAMES if f"backbone.{n}" not in sections]
        if missing:
            raise ConfigError(f"weight file lacks backbone sections: {', '.join(missing)}")
        w = cls(**{n: sections[f"backbone.{n}"] for n in WEIGHT_NAMES})
        w.validate()
        return w

    def validate(self) -> None:
        chain = [self.stem, self.stage1, self.stage2, self.head]
        for prev, cur in zip(chain, chain[1:]):
            if cur.shape[1] != prev.shape[0]:
                raise ConfigError(f"conv stage expects {cur.shape[1]} inputs, gets {prev.shape[0]}")
        if self.head.shape[0] != COARSE_DIM or self.smooth.shape[0] != FINE_DIM:
            raise ConfigError("backbone must emit 64 coarse and 32 fine channels")
        if self.lat_coarse.shape[:2] != (FINE_DIM, COARSE_DIM):
            raise ConfigError(f"coarse lateral has shape {self.lat_coarse.shape}")
        if self.lat_fine.shape[:2] != (FINE_DIM, self.stem.shape[0]):
            raise ConfigError(f"fine lateral has shape {self.lat_fine.shape}")


def init_seeded(seed: int, in_channels: int = 1) -> BackboneWeights:
    """Uniform weights with variance 1/fan_in, i.e. bound sqrt(3/fan_in)."""
    rng = np.random.default_rng(seed)

    def conv(out_c, in_c, k):
        bound = math.sqrt(3.0 / (in_c * k * k))
        return rng.uniform(-bound, bound, size=(out_c, in_c, k, k))

    return BackboneWeights(
        stem=conv(16, in_channels, 3),
        stage1=conv(32, 16, 3),
        stage2=conv(64, 32, 3),
        head=conv(COARSE_DIM, 64, 3),
        lat_coarse=conv(FINE_DIM, COARSE_DIM, 1),
        lat_fine=conv(FINE_DIM, 16, 1),
        smooth=conv(FINE_DIM, FINE_DIM, 3),
    )


def save_weights(path, w: BackboneWeights, extra: dict | None = None) -> None:
    write_sections(path, {**w.to_sections(), **(extra or {})})


def load_weights(path) -> BackboneWeights:
    return BackboneWeights.from_sections(read_sections(path))


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """Zero-padded cross-correlation of an (H, W, C) array with (O, C, k, k) weights."""
    k = w.shape[2]
    r = k // 2
    padded = np.pad(x, ((r, r), (r, r), (0, 0))) if r else x
    patches = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    patches = patches[::stride, ::stride]  # (H', W', C, k, k)
    return np.tensordot(patches, w, axes=([2, 3, 4], [1, 2, 3]))


def _pad_to_multiple(px: np.ndarray, m: int = 8) -> np.ndarray:
    h, w = px.shape[:2]
    ph, pw = (-h) % m, (-w) % m
    if not (ph or pw):
        return px
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(px, ((0, ph), (0, pw), (0, 0)), mode=mode)


def extract_pyramid(img: Image, w: BackboneWeights):
    """Return ``(coarse, fine)`` feature grids at 1/8 and 1/2 resolution."""
    if img.channels != w.in_channels:
        if w.in_channels == 1:
            img = img.to_gray()
        else:
            raise ConfigError(f"backbone expects {w.in_channels} channels, image has {img.channels}")
    h, wd = img.height, img.width
    x = _pad_to_multiple(img.pixels)

    s0 = np.maximum(conv2d(x, w.stem, 2), 0.0)
    s1 = np.maximum(conv2d(s0, w.stage1, 2), 0.0)
    s2 = np.maximum(conv2d(s1, w.stage2, 2), 0.0)
    coarse = conv2d(s2, w.head, 1)

    top_down = np.repeat(np.repeat(conv2d(coarse, w.lat_coarse), 4, axis=0), 4, axis=1)
    fine = conv2d(conv2d(s0, w.lat_fine) + top_down, w.smooth, 1)

    ch, cw = -(-h // 8), -(-wd // 8)
    fh, fw = -(-h // 2), -(-wd // 2)
    return (FeatureGrid.from_hwc(coarse[:ch, :cw]), FeatureGrid.from_hwc(fine[:fh, :fw]))
