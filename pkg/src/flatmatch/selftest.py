"""Fast invariant checks per module, run by ``flatmatch selftest``.

Each suite is a list of small check functions that raise on violation.
Timing-based properties live in ``flatmatch bench`` instead.
"""

from __future__ import annotations

import math
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import attention as att
from . import backbone, matcher, numgrid, transformer
from .fileformats import Image
from .geoeval import geometry, metrics, synthetic
from .gradcheck import run_gradcheck


def _check(cond, msg):
    if not cond:
        raise AssertionError(msg)


# numgrid

def _softmax_rows(rng):
    a = rng.normal(scale=5.0, size=(20, 30))
    s = numgrid.row_softmax(a)
    _check(np.abs(s.sum(1) - 1).max() <= 1e-12, "softmax rows do not sum to 1")
    _check(np.all((s > 0) & (s <= 1)), "softmax entries outside (0, 1]")
    shifted = numgrid.row_softmax(a + rng.normal(size=(20, 1)) * 50)
    _check(np.abs(shifted - s).max() <= 1e-12, "softmax not shift invariant")


def _delta_conv(rng):
    g = numgrid.FeatureGrid(5, 6, rng.normal(size=(30, 4)))
    k = np.zeros((4, 3, 3))
    k[:, 1, 1] = 1.0
    _check(np.array_equal(numgrid.depthwise_conv2d(g, k).tokens, g.tokens), "delta kernel is not identity")


def _matmul_oracle(rng):
    a, b = rng.normal(size=(64, 40)), rng.normal(size=(40, 64))
    naive = np.array([[sum(a[i, k] * b[k, j] for k in range(40)) for j in range(64)] for i in range(64)])
    rel = np.abs(numgrid.matmul(a, b) - naive).max() / np.abs(naive).max()
    _check(rel <= 1e-12, f"matmul relative error {rel:.2e}")


def _eigen_residual(rng):
    for n in range(1, 10):
        m = rng.normal(size=(n, n))
        a = m + m.T
        vals, vecs = numgrid.sym_eigen(a)
        res = np.abs(a @ vecs - vecs * vals).max()
        _check(res <= 1e-8 * max(np.linalg.norm(a), 1e-300), f"eigen residual {res:.2e} at n={n}")


# attention

def _norm_preservation(rng):
    x = rng.normal(size=(200, 16))
    for p in (1, 2, 3, 4):
        phi = att.focused_map(x, p)
        r = np.linalg.norm(np.maximum(x, 0), axis=1)
        live = r > 0
        err = np.abs(np.linalg.norm(phi, axis=1)[live] - r[live]).max()
        _check(err <= 1e-12, f"norm drift {err:.2e} at p={p}")


def _reduction(rng):
    inp = att.AttentionInputs(*(rng.normal(size=(12, 8)) for _ in range(3)))
    grid = numgrid.GridShape(3, 4)
    fp = att.FocusParams(p=1, dw_kernel=np.zeros((8, 3, 3)), v_grid=grid)
    diff = np.abs(att.focused_linear_attention(inp, fp) - att.linear_attention(inp, "relu", True)).max()
    _check(diff <= 1e-12, f"p=1 reduction off by {diff:.2e}")


def _convex_hull(rng):
    inp = att.AttentionInputs(*(rng.normal(scale=3, size=(15, 6)) for _ in range(3)))
    out = att.softmax_attention(inp)
    _check(np.all(out >= inp.v.min(0) - 1e-12) and np.all(out <= inp.v.max(0) + 1e-12),
           "softmax output leaves the convex hull of V")


def _sharpening(rng):
    # one-hot alignment rises with p on every row; cosine between rows with
    # different peaks drops in most, not all, trials (shared secondary peaks)
    drops = trials = 0
    while trials < 200:
        u, v = np.abs(rng.normal(size=(2, 8)))
        if u.argmax() == v.argmax():
            continue
        trials += 1
        cos, peak = [], []
        for p in (1, 2, 3, 4):
            a, b = att.focused_map(np.stack([u, v]), p)
            cos.append(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
            peak.append(a[u.argmax()] / np.linalg.norm(a))
        _check(all(x <= y + 1e-12 for x, y in zip(peak, peak[1:])), "focusing moved a row off its peak")
        drops += all(x >= y - 1e-12 for x, y in zip(cos, cos[1:]))
    _check(drops >= 0.95 * trials, f"cosine fell monotonically in only {drops}/{trials} trials")


def _gradients(rng):
    rows = run_gradcheck(seeds=[int(rng.integers(1 << 16))])
    bad = [r for r in rows if not r.passed]
    _check(not bad, "gradient mismatch: " + ", ".join(f"{r.variant} {r.worst:.2e}" for r in bad))


# transformer

def _layer_props(rng):
    cfg = transformer.TransformerConfig(num_coarse_blocks=1, dim=16, fine_dim=8, seed=int(rng.integers(1000)))
    p = transformer.EncoderLayerParams.init(16, rng)
    x = numgrid.FeatureGrid(4, 4, rng.uniform(-10, 10, size=(16, 16)))
    y = transformer.encoder_layer(x, x, p, cfg.variant)
    _check(y.tokens.shape == x.tokens.shape and np.isfinite(y.tokens).all(), "layer shape or finiteness")
    again = transformer.encoder_layer(x, x, p, cfg.variant)
    _check(np.array_equal(y.tokens, again.tokens), "layer not deterministic")
    perm = rng.permutation(16)
    xp = numgrid.FeatureGrid(4, 4, x.tokens[perm])
    yp = transformer.encoder_layer(xp, xp, p, att.Linear(), dwconv=False)
    y0 = transformer.encoder_layer(x, x, p, att.Linear(), dwconv=False)
    _check(np.abs(yp.tokens - y0.tokens[perm]).max() <= 1e-10, "not permutation equivariant")


def _layer_norm(rng):
    z = transformer.layer_norm(rng.normal(scale=7, size=(50, 32)))
    _check(np.abs(z.mean(1)).max() <= 1e-10 and np.abs(z.var(1) - 1).max() <= 1e-10, "layer norm moments")


# backbone

def _backbone_props(rng, weights_path: Optional[str] = None):
    w = backbone.load_weights(weights_path) if weights_path else backbone.init_seeded(int(rng.integers(1000)))
    img = Image(rng.uniform(size=(40, 48, 1)))
    c, f = backbone.extract_pyramid(img, w)
    _check((c.height, c.width, c.dim) == (5, 6, 64) and (f.height, f.width, f.dim) == (20, 24, 32),
           "pyramid shapes")
    c2, _ = backbone.extract_pyramid(img, w)
    _check(np.array_equal(c.tokens, c2.tokens), "extraction not deterministic")
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "w.bin"
        backbone.save_weights(path, w)
        back = backbone.load_weights(path)
    _check(all(np.array_equal(a, b) for a, b in zip(w.to_sections().values(), back.to_sections().values())),
           "weight round-trip changed values")


# matcher

def _matcher_props(rng):
    s = rng.normal(scale=4, size=(12, 15))
    r, c = matcher.dual_softmax_factors(s)
    _check(np.abs(r.sum(1) - 1).max() <= 1e-12 and np.abs(c.sum(0) - 1).max() <= 1e-12, "factor sums")
    p = matcher.dual_softmax(s)
    _check(np.all((p > 0) & (p < 1)), "dual softmax entries outside (0, 1)")
    pairs = matcher.mnn_filter(p, 0.0)
    _check(len({m.i for m in pairs}) == len(pairs) == len({m.j for m in pairs}), "MNN not injective")
    # sharper temperature concentrates each row factor; the product itself need not be monotone
    for _ in range(100):
        s = rng.normal(size=(6, 7))
        tau = rng.uniform(0.1, 1.0)
        hi = matcher.dual_softmax_factors(s / (tau * 0.5))[0].max(1)
        lo = matcher.dual_softmax_factors(s / tau)[0].max(1)
        _check(np.all(hi >= lo - 1e-12), "row factor lost mass at lower temperature")
    wa = numgrid.FeatureGrid(5, 5, rng.normal(size=(25, 8)))
    wb = numgrid.FeatureGrid(5, 5, rng.normal(scale=10, size=(25, 8)))
    off = matcher.refine_match(wa, wb)
    _check(all(abs(o) <= 2 for o in off), "offset left the window")


def _injection_oracle(rng):
    pair = synthetic.gen_synthetic_pair(int(rng.integers(1000)))
    ms = matcher.match_injected(pair.coarse_a, pair.coarse_b, pair.centers_a, pair.windows_b,
                                matcher.MatcherConfig())
    _check({(m.i, m.j) for m in ms.coarse} == set(pair.cells.items()), "injected cells not recovered")


# geoeval

def _geoeval_props(rng):
    pair = synthetic.gen_synthetic_pair(int(rng.integers(1000)))
    K = pair.intrinsics
    E, inl = geometry.ransac_essential(pair.pix_a, pair.pix_b, K, iters=200)
    F = geometry.fundamental_from_essential(E, K)
    _check(np.all(geometry.sampson_distance(F, pair.pix_a[inl], pair.pix_b[inl]) <= 1.0), "inlier residual")
    pose = geometry.decompose_essential(E, K.normalize(pair.pix_a[inl]), K.normalize(pair.pix_b[inl]))
    R = pose.R
    _check(np.abs(R @ R.T - np.eye(3)).max() <= 1e-10 and abs(np.linalg.det(R) - 1) <= 1e-10
           and abs(np.linalg.norm(pose.t) - 1) <= 1e-10, "pose invariants")
    e1 = metrics.pose_error(pose, pair.gt_pose)
    e2 = metrics.pose_error(pose.inverse(), pair.gt_pose.inverse())
    _check(abs(e1.rot_err_deg - e2.rot_err_deg) <= 1e-9, "pose error not inversion symmetric")
    errs = rng.exponential(10, size=30)
    a = metrics.auc(errs)
    _check(a[5.0] <= a[10.0] <= a[20.0], "AUC not monotone")
    _check(math.isclose(metrics.auc([2.5])[5.0], 0.5), "AUC closed form")


@dataclass
class SuiteResult:
    module: str
    passed: int = 0
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        total = self.passed + len(self.failures)
        state = "ok" if self.ok else "FAIL"
        line = f"{self.module:<12} {self.passed}/{total} {state}"
        return "\n".join([line] + [f"  {name}: {msg}" for name, msg in self.failures])


SUITES: dict = {
    "numgrid": [_softmax_rows, _delta_conv, _matmul_oracle, _eigen_residual],
    "attention": [_norm_preservation, _reduction, _convex_hull, _sharpening, _gradients],
    "transformer": [_layer_props, _layer_norm],
    "backbone": [_backbone_props],
    "matcher": [_matcher_props, _injection_oracle],
    "geoeval": [_geoeval_props],
}


def run_selftest(modules=None, seed: int = 0, weights: Optional[str] = None,
                 emit: Callable[[str], None] = print) -> list:
    unknown = set(modules or ()) - set(SUITES)
    if unknown:
        raise KeyError(f"unknown selftest module(s): {', '.join(sorted(unknown))}")
    results = []
    for name, checks in SUITES.items():
        if modules and name not in modules:
            continue
        res = SuiteResult(name)
        for check in checks:
            rng = np.random.default_rng(seed)
            try:
                if check is _backbone_props:
                    check(rng, weights)
                else:
                    check(rng)
                res.passed += 1
            except Exception as exc:  # noqa: BLE001 - every failure is reported, the run continues
                res.failures.append((check.__name__.lstrip("_"), f"{type(exc).__name__}: {exc}"))
        emit(res.summary())
        results.append(res)
    return results
