"""Coarse-to-fine matching: dual-softmax + mutual nearest neighbours on the
coarse grids, then sub-pixel refinement by heatmap expectation in fine windows.
"""

from __future__ import annotations

import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .backbone import BackboneWeights, extract_pyramid, init_seeded
from .errors import ConfigError, ShapeError
from .fileformats import Image, read_sections, write_sections
from .numgrid import FeatureGrid, row_softmax
from .transformer import TransformerConfig, TransformerWeights, feature_transformer, fine_transformer

COARSE_STRIDE = 8
FINE_STRIDE = 2


@dataclass(frozen=True)
class MatcherConfig:
    tau: float = 0.1
    conf_threshold: float = 0.2
    window: int = 5
    tau_fine: float = 0.1
    border_margin: int = 1
    # "sqrt_dim" divides descriptors by sqrt(d) before similarity; "none" uses them raw
    feature_scale: str = "sqrt_dim"

    def __post_init__(self):
        if self.tau <= 0 or self.tau_fine <= 0:
            raise ConfigError("temperatures must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError(f"window must be odd and >= 3, got {self.window}")
        if self.border_margin < 0:
            raise ConfigError("border_margin must be >= 0")
        if self.feature_scale not in ("sqrt_dim", "none"):
            raise ConfigError(f"unknown feature_scale {self.feature_scale!r}")

    def descriptor_scale(self, dim: int) -> float:
        return 1.0 / np.sqrt(dim) if self.feature_scale == "sqrt_dim" else 1.0


@dataclass(frozen=True)
class CoarseMatch:
    i: int
    j: int
    conf: float


@dataclass(frozen=True)
class RefinedMatch:
    xa: float
    ya: float
    xb: float
    yb: float
    conf: float


@dataclass
class MatchSet:
    coarse: list = field(default_factory=list)
    refined: list = field(default_factory=list)
    diagnostics: Counter = field(default_factory=Counter)

    def points(self):
        """Refined matches as two (M, 2) pixel arrays."""
        if not self.refined:
            return np.zeros((0, 2)), np.zeros((0, 2))
        arr = np.array([(m.xa, m.ya, m.xb, m.yb) for m in self.refined])
        return arr[:, :2], arr[:, 2:]


@dataclass(eq=False)
class MatchingModel:
    backbone: BackboneWeights
    transformer: TransformerWeights
    cfg: TransformerConfig

    @classmethod
    def init(cls, cfg: TransformerConfig) -> "MatchingModel":
        return cls(init_seeded(cfg.seed), TransformerWeights.init(cfg), cfg)

    def save(self, path) -> None:
        write_sections(path, {**self.backbone.to_sections(), **self.transformer.to_sections()})

    @classmethod
    def load(cls, path, cfg: TransformerConfig) -> "MatchingModel":
        sections = read_sections(path)
        backbone = BackboneWeights.from_sections(sections)
        if any(k.startswith("coarse_xf.") for k in sections):
            transformer = TransformerWeights.from_sections(sections)
        else:
            transformer = TransformerWeights.init(cfg)
        return cls(backbone, transformer, cfg)


def _tokens(x) -> np.ndarray:
    return x.tokens if isinstance(x, FeatureGrid) else np.asarray(x, dtype=np.float64)


def similarity_matrix(fa, fb, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    a, b = _tokens(fa), _tokens(fb)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"descriptor dims differ: {a.shape[1]} vs {b.shape[1]}")
    return (a @ b.T) / tau


def dual_softmax_factors(s):
    s = np.asarray(s, dtype=np.float64)
    return row_softmax(s), row_softmax(s.T).T


def dual_softmax(s) -> np.ndarray:
    rows, cols = dual_softmax_factors(s)
    return rows * cols


def _mutual_pairs(p: np.ndarray):
    # np.argmax returns the first maximum, so ties go to the lowest index
    best_j = np.argmax(p, axis=1)
    best_i = np.argmax(p, axis=0)
    i = np.flatnonzero(best_i[best_j] == np.arange(p.shape[0]))
    return i, best_j[i]


def mnn_filter(p, conf_threshold: float) -> list:
    """Mutual-argmax pairs of ``p`` with probability at least ``conf_threshold``."""
    p = np.asarray(p, dtype=np.float64)
    i, j = _mutual_pairs(p)
    keep = p[i, j] >= conf_threshold
    return [CoarseMatch(int(a), int(b), float(p[a, b])) for a, b in zip(i[keep], j[keep])]


def border_mask(height: int, width: int, margin: int) -> np.ndarray:
    """Boolean per token: True when the cell is at least ``margin`` cells from every edge."""
    ys, xs = np.divmod(np.arange(height * width), width)
    return (xs >= margin) & (xs < width - margin) & (ys >= margin) & (ys < height - margin)


def coarse_to_fine_center(idx: int, coarse_width: int):
    """Fine-grid coordinates of a coarse cell's centre (scale 4, half-cell offset)."""
    cy, cx = divmod(idx, coarse_width)
    scale = COARSE_STRIDE // FINE_STRIDE
    return cx * scale + scale // 2, cy * scale + scale // 2


def crop_windows(fine: FeatureGrid, centers, w: int, diag: Optional[Counter] = None):
    """Cut a w x w window of fine tokens around each (x, y) centre.

    Returns ``(windows, kept)``, where ``kept`` lists the indices of centres
    whose window fits inside the grid. Dropped centres are counted in
    ``diag["window_dropped"]``.
    """
    if w < 1 or w % 2 == 0:
        raise ConfigError(f"window must be odd, got {w}")
    r = w // 2
    hwc = fine.to_hwc()
    windows, kept = [], []
    for n, (x, y) in enumerate(centers):
        if x - r < 0 or y - r < 0 or x + r >= fine.width or y + r >= fine.height:
            if diag is not None:
                diag["window_dropped"] += 1
            continue
        windows.append(FeatureGrid.from_hwc(hwc[y - r : y + r + 1, x - r : x + r + 1]))
        kept.append(n)
    return windows, kept


def heatmap_expectation(heatmap) -> tuple:
    """Expected (dx, dy) of a w x w probability map relative to its centre cell."""
    h = np.asarray(heatmap, dtype=np.float64)
    r = h.shape[0] // 2
    k = np.arange(1, r + 1)

    def centred(m):
        # pairing +k with -k keeps mirror-symmetric marginals at exactly zero
        return float((k * (m[r + k] - m[r - k])).sum())

    return centred(h.sum(axis=0)), centred(h.sum(axis=1))


def correlation_heatmap(center, wb: FeatureGrid, tau_fine: float, scale: float = 1.0) -> np.ndarray:
    """Softmax over the window of ``scale**2 * <center, token> / tau_fine``."""
    logits = (wb.tokens @ np.asarray(center, dtype=np.float64)) * (scale * scale / tau_fine)
    return row_softmax(logits).reshape(wb.height, wb.width)


def refine_match(wa: FeatureGrid, wb: FeatureGrid, tau_fine: float = 0.1, scale: float = 1.0) -> tuple:
    """Sub-pixel offset (fine-grid units) of A's window centre inside B's window."""
    if (wa.height, wa.width) != (wb.height, wb.width):
        raise ShapeError("refinement windows must have equal shapes")
    r = wa.height // 2
    center = wa.tokens[wa.index(r, r)]
    return heatmap_expectation(correlation_heatmap(center, wb, tau_fine, scale))


def _coarse_stage(fa_t: FeatureGrid, fb_t: FeatureGrid, mcfg: MatcherConfig, diag: Counter):
    scale = mcfg.descriptor_scale(fa_t.dim)
    p = dual_softmax(similarity_matrix(fa_t.tokens * scale, fb_t.tokens * scale, mcfg.tau))
    i, j = _mutual_pairs(p)
    diag["candidates"] += len(i)
    keep = p[i, j] >= mcfg.conf_threshold
    if mcfg.border_margin:
        keep &= border_mask(fa_t.height, fa_t.width, mcfg.border_margin)[i]
        keep &= border_mask(fb_t.height, fb_t.width, mcfg.border_margin)[j]
    diag["filtered"] += int((~keep).sum())
    return [CoarseMatch(int(a), int(b), float(p[a, b])) for a, b in zip(i[keep], j[keep])]


def _to_refined(m: CoarseMatch, wa_width: int, wb_width: int, offset) -> RefinedMatch:
    ya, xa = divmod(m.i, wa_width)
    bx, by = coarse_to_fine_center(m.j, wb_width)
    half = COARSE_STRIDE // 2
    return RefinedMatch(
        xa=float(xa * COARSE_STRIDE + half),
        ya=float(ya * COARSE_STRIDE + half),
        xb=float((bx + offset[0]) * FINE_STRIDE),
        yb=float((by + offset[1]) * FINE_STRIDE),
        conf=m.conf,
    )


def _finish(ms: MatchSet) -> MatchSet:
    order = sorted(range(len(ms.coarse)), key=lambda n: (ms.coarse[n].i, ms.coarse[n].j))
    ms.coarse = [ms.coarse[n] for n in order]
    if len(ms.refined) == len(order):
        ms.refined = [ms.refined[n] for n in order]
    ms.diagnostics["coarse"] = len(ms.coarse)
    ms.diagnostics["refined"] = len(ms.refined)
    return ms


def match_features(
    coarse_a: FeatureGrid,
    fine_a: FeatureGrid,
    coarse_b: FeatureGrid,
    fine_b: FeatureGrid,
    model: MatchingModel,
    mcfg: MatcherConfig,
    workers: int = 1,
) -> MatchSet:
    diag: Counter = Counter()
    fa_t, fb_t = feature_transformer(coarse_a, coarse_b, model.cfg, model.transformer, diag)
    coarse = _coarse_stage(fa_t, fb_t, mcfg, diag)

    centers_a = [coarse_to_fine_center(m.i, coarse_a.width) for m in coarse]
    centers_b = [coarse_to_fine_center(m.j, coarse_b.width) for m in coarse]
    wins_a, kept_a = crop_windows(fine_a, centers_a, mcfg.window, diag)
    wins_b, kept_b = crop_windows(fine_b, centers_b, mcfg.window, diag)
    both = sorted(set(kept_a) & set(kept_b))
    pos_a = {n: k for k, n in enumerate(kept_a)}
    pos_b = {n: k for k, n in enumerate(kept_b)}
    wins_a = [wins_a[pos_a[n]] for n in both]
    wins_b = [wins_b[pos_b[n]] for n in both]
    coarse = [coarse[n] for n in both]

    wins_a, wins_b = fine_transformer(wins_a, wins_b, model.cfg, model.transformer, diag)

    fine_scale = mcfg.descriptor_scale(fine_a.dim)

    def refine(k):
        return refine_match(wins_a[k], wins_b[k], mcfg.tau_fine, fine_scale)

    if workers > 1 and len(coarse) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            offsets = list(pool.map(refine, range(len(coarse))))
    else:
        offsets = [refine(k) for k in range(len(coarse))]

    refined = [_to_refined(m, coarse_a.width, coarse_b.width, off) for m, off in zip(coarse, offsets)]
    return _finish(MatchSet(coarse, refined, diag))


def match_pipeline(
    img_a: Image, img_b: Image, model: MatchingModel, mcfg: MatcherConfig = MatcherConfig(),
    workers: int = 1,
) -> MatchSet:
    """Backbone on both images, coarse transformer and matching, fine refinement."""
    coarse_a, fine_a = extract_pyramid(img_a, model.backbone)
    coarse_b, fine_b = extract_pyramid(img_b, model.backbone)
    return match_features(coarse_a, fine_a, coarse_b, fine_b, model, mcfg, workers)


def match_injected(
    coarse_a: FeatureGrid,
    coarse_b: FeatureGrid,
    centers_a: np.ndarray,
    windows_b: np.ndarray,
    mcfg: MatcherConfig,
) -> MatchSet:
    """Matching on descriptors placed directly on the coarse grids.

    ``centers_a`` holds one fine descriptor per A cell (N_A, d_f);
    ``windows_b`` holds one w x w fine window per B cell (N_B, w, w, d_f).
    Backbone, transformers and window cropping are bypassed.
    """
    diag: Counter = Counter()
    coarse = _coarse_stage(coarse_a, coarse_b, mcfg, diag)
    w = windows_b.shape[1]
    if w != mcfg.window:
        raise ShapeError(f"injected windows are {w}x{w}, config expects {mcfg.window}")
    fine_scale = mcfg.descriptor_scale(windows_b.shape[-1])
    refined = []
    for m in coarse:
        wb = FeatureGrid.from_hwc(windows_b[m.j])
        off = heatmap_expectation(correlation_heatmap(centers_a[m.i], wb, mcfg.tau_fine, fine_scale))
        refined.append(_to_refined(m, coarse_a.width, coarse_b.width, off))
    return _finish(MatchSet(coarse, refined, diag))


MATCH_KEYS = ("xa", "ya", "xb", "yb", "conf")


def format_matches(ms: MatchSet, fmt: str = "tsv") -> str:
    if fmt == "tsv":
        lines = ["# " + "\t".join(MATCH_KEYS)]
        lines += ["\t".join(repr(getattr(m, k)) for k in MATCH_KEYS) for m in ms.refined]
        return "\n".join(lines) + "\n"
    if fmt == "jsonl":
        return "".join(json.dumps(asdict(m)) + "\n" for m in ms.refined)
    raise ConfigError(f"unknown match format {fmt!r}")


def parse_matches(text: str) -> list:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("{"):
            rec = json.loads(line)
            out.append(RefinedMatch(**{k: float(rec[k]) for k in MATCH_KEYS}))
        else:
            out.append(RefinedMatch(*map(float, line.split("\t"))))
    return out
