"""Command-line entry point: ``flatmatch {match,bench,eval,gradcheck,selftest}``.

Every option can also come from a ``key=value`` file passed with
``--config``; flags given on the command line win over file values.
Exit codes: 0 success, 1 check failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import attention as att
from .errors import ConfigError, FlatMatchError, FormatError
from .fileformats import atomic_write, read_image
from .gradcheck import VARIANTS, run_gradcheck
from .matcher import MatcherConfig, MatchingModel, format_matches, match_pipeline
from .numgrid import GridShape
from .selftest import SUITES, run_selftest
from .transformer import TransformerConfig

log = logging.getLogger("flatmatch")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

FOCUSED_SIZES = (2048, 4096, 8192, 16384)
SOFTMAX_SIZES = (512, 1024, 2048, 4096)


class UsageError(Exception):
    pass


def _csv_ints(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _csv_words(text: str) -> tuple:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def make_variant(name: str, p: float = 3.0) -> att.AttentionVariant:
    if name == "softmax":
        return att.Softmax()
    if name == "linear":
        return att.Linear()
    if name == "focused":
        return att.FocusedLinear(att.FocusParams(p=p))
    raise ConfigError(f"unknown attention variant {name!r}")


# match

def _add_match(sub):
    p = sub.add_parser("match", help="match two images and write match records")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("-o", "--output", help="match file (stdout when omitted)")
    p.add_argument("--weights", help="weight file; seeded random weights when omitted")
    p.add_argument("--variant", choices=("softmax", "linear", "focused"), default="focused")
    p.add_argument("--p", type=float, default=3.0, help="focusing exponent")
    p.add_argument("--format", choices=("tsv", "jsonl"), default="tsv")
    p.add_argument("--conf-threshold", type=float, default=0.2)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--tau-fine", type=float, default=0.1)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--border-margin", type=int, default=1)
    p.add_argument("--coarse-blocks", type=int, default=4)
    p.add_argument("--fine-blocks", type=int, default=1)
    p.add_argument("--threads", type=int, default=1, help="workers for fine refinement")
    p.set_defaults(func=cmd_match)


def cmd_match(args) -> int:
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    tcfg = TransformerConfig(
        num_coarse_blocks=args.coarse_blocks, num_fine_blocks=args.fine_blocks,
        variant=make_variant(args.variant, args.p), seed=args.seed,
    )
    mcfg = MatcherConfig(tau=args.tau, conf_threshold=args.conf_threshold, window=args.window,
                         tau_fine=args.tau_fine, border_margin=args.border_margin)
    img_a, img_b = read_image(args.image_a), read_image(args.image_b)
    model = MatchingModel.load(args.weights, tcfg) if args.weights else MatchingModel.init(tcfg)
    # BLAS stays single-threaded so results do not depend on --threads
    with threadpool_limits(limits=1):
        ms = match_pipeline(img_a, img_b, model, mcfg, workers=args.threads)
    _emit(args.output, format_matches(ms, args.format))
    diag = " ".join(f"{k}={v}" for k, v in sorted(ms.diagnostics.items()))
    print(f"matches={len(ms.refined)} {diag}", file=sys.stderr)
    return EXIT_OK


# bench

def _add_bench(sub):
    p = sub.add_parser("bench", help="time attention variants and fit log-log slopes")
    p.add_argument("--variants", type=_csv_words, default=("focused", "softmax"))
    p.add_argument("--sizes", type=_csv_ints, help="token counts for every variant")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("-o", "--output", help="CSV file (stdout when omitted)")
    p.set_defaults(func=cmd_bench)


def bench_inputs(n: int, d: int, rng):
    h = 2 ** (int(math.log2(n)) // 2)
    grid = GridShape(h, n // h) if n % h == 0 else GridShape(1, n)
    inp = att.AttentionInputs(*(rng.normal(size=(n, d)) for _ in range(3)))
    return inp, grid


def time_variant(name: str, n: int, d: int, reps: int, seed: int = 0) -> float:
    """Median wall time of one attention call after a discarded warm-up."""
    rng = np.random.default_rng(seed)
    inp, grid = bench_inputs(n, d, rng)
    if name == "focused":
        fp = att.FocusParams(dw_kernel=rng.uniform(-0.5, 0.5, size=(d, 3, 3)), v_grid=grid)

        def run():
            return att.focused_linear_attention(inp, fp)
    elif name == "softmax":
        def run():
            return att.softmax_attention(inp)
    elif name == "linear":
        def run():
            return att.linear_attention(inp)
    else:
        raise ConfigError(f"unknown bench variant {name!r}")
    run()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def loglog_slope(sizes, seconds) -> float:
    slope, _ = np.polyfit(np.log(sizes), np.log(seconds), 1)
    return float(slope)


def run_bench(variants, sizes=None, dim: int = 64, reps: int = 3, seed: int = 0):
    """Returns (rows, slopes); rows are (variant, N, d, median_seconds)."""
    rows, slopes = [], {}
    with threadpool_limits(limits=1):
        for name in variants:
            ns = sizes or (SOFTMAX_SIZES if name == "softmax" else FOCUSED_SIZES)
            secs = [time_variant(name, n, dim, reps, seed) for n in ns]
            rows += [(name, n, dim, s) for n, s in zip(ns, secs)]
            slopes[name] = loglog_slope(ns, secs)
    return rows, slopes


def cmd_bench(args) -> int:
    if args.reps < 3:
        raise UsageError("--reps must be >= 3")
    if args.sizes and (len(args.sizes) < 2 or list(args.sizes) != sorted(set(args.sizes))):
        raise UsageError("--sizes must hold at least two strictly ascending values")
    rows, slopes = run_bench(args.variants, args.sizes, args.dim, args.reps, args.seed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("variant", "N", "d", "median_seconds"))
    writer.writerows((v, n, d, f"{s:.6e}") for v, n, d, s in rows)
    _emit(args.output, buf.getvalue())
    for name, s in slopes.items():
        print(f"slope {name} {s:.3f}", file=sys.stderr)
    return EXIT_OK


# eval

def _add_eval(sub):
    p = sub.add_parser("eval", help="relative-pose evaluation on synthetic pairs")
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--mode", choices=("injection", "texture"), default="injection")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--baseline", type=float, default=1.0)
    p.add_argument("--ransac-iters", type=int, default=1000)
    p.add_argument("--px-thresh", type=float, default=1.0)
    p.add_argument("--variant", choices=("softmax", "linear", "focused"), default="focused")
    p.add_argument("--conf-threshold", type=float, default=0.2)
    p.add_argument("-o", "--output", help="report JSON (stdout when omitted)")
    p.set_defaults(func=cmd_eval)


def cmd_eval(args) -> int:
    from .geoeval.evaluate import EvalConfig, evaluate
    from .geoeval.synthetic import SceneParams

    if args.pairs < 1:
        raise UsageError("--pairs must be >= 1")
    cfg = EvalConfig(
        mode=args.mode,
        scene=SceneParams(noise=args.noise, baseline=args.baseline),
        matcher=MatcherConfig(conf_threshold=args.conf_threshold),
        transformer=TransformerConfig(variant=make_variant(args.variant), seed=args.seed),
        ransac_iters=args.ransac_iters,
        px_thresh=args.px_thresh,
    )
    with threadpool_limits(limits=1):
        report = evaluate(cfg, args.pairs, args.seed)
    _emit(args.output, report.dumps())
    summary = " ".join(f"AUC@{k}={v:.4f}" for k, v in report.to_json()["auc"].items())
    print(summary, file=sys.stderr)
    return EXIT_OK


# gradcheck

def _add_gradcheck(sub):
    p = sub.add_parser("gradcheck", help="analytic vs finite-difference attention gradients")
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds starting at --seed")
    p.add_argument("--variants", type=_csv_words, default=VARIANTS)
    p.set_defaults(func=cmd_gradcheck)


def cmd_gradcheck(args) -> int:
    unknown = set(args.variants) - set(VARIANTS)
    if unknown:
        raise UsageError(f"unknown gradcheck variant(s): {', '.join(sorted(unknown))}")
    if args.h <= 0 or args.seeds < 1:
        raise UsageError("--h must be positive and --seeds >= 1")
    seeds = range(args.seed, args.seed + args.seeds)
    rows = run_gradcheck(args.variants, seeds, h=args.h, tol=args.tol)
    print(f"{'variant':<20} {'seed':>4} {'worst':>10}  status  per-input")
    for r in rows:
        per = " ".join(f"{k}={v:.1e}" for k, v in r.max_rel_err.items())
        print(f"{r.variant:<20} {r.seed:>4} {r.worst:>10.2e}  {'pass' if r.passed else 'FAIL':<6}  {per}")
    failed = sum(not r.passed for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} passed at tol {args.tol:g}")
    return EXIT_FAIL if failed else EXIT_OK


# selftest

def _add_selftest(sub):
    p = sub.add_parser("selftest", help="run the per-module invariant checks")
    p.add_argument("--module", action="append", choices=sorted(SUITES), help="repeatable")
    p.add_argument("--weights", help="weight file to load in the backbone suite")
    p.set_defaults(func=cmd_selftest)


def cmd_selftest(args) -> int:
    results = run_selftest(args.module, seed=args.seed, weights=args.weights)
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


# plumbing

def _emit(path, text: str) -> None:
    if path:
        atomic_write(path, text.encode())
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flatmatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_match, _add_bench, _add_eval, _add_gradcheck, _add_selftest):
        add(sub)
    for p in sub.choices.values():
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="key=value file; command-line flags take precedence")
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(name)
    return None


def read_config(path) -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def apply_config(sub: argparse.ArgumentParser, values: dict, source) -> None:
    """Type-convert file values through the subcommand's own options and install them as defaults."""
    actions = {a.dest: a for a in sub._actions if a.option_strings and a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"{source}: unknown key(s) for {sub.prog}: {', '.join(unknown)}")
    defaults = {}
    for key, text in values.items():
        action = actions[key]
        try:
            value = action.type(text) if action.type else text
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{source}: bad value for {key}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{source}: {key} must be one of {sorted(action.choices)}")
        defaults[key] = value
    sub.set_defaults(**defaults)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.config:
            sub = _subparser(parser, args.command)
            apply_config(sub, read_config(args.config), args.config)
            args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"flatmatch {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, ConfigError) as exc:
        where = getattr(exc, "filename", None)
        msg = f"{exc}" if not where or str(where) in str(exc) else f"{where}: {exc}"
        print(f"flatmatch {args.command}: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except FlatMatchError as exc:
        print(f"flatmatch {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
