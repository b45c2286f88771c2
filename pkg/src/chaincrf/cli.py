"""Command-line entry point: ``chaincrf {train,gradcheck,bench,decode,synth}``.

Exit codes: 0 success, 1 check failure (gradcheck tolerance breach),
2 usage error (bad flags, missing or malformed input files).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from importlib import resources

import numpy as np

from . import bench
from .corpus import CorpusError, format_corpus, parse_corpus, read_corpus, synth_corpus
from .fb import viterbi_decode
from .model import START_MODES, CrfModel, ModelError, ModelFormatError, load_model, save_model
from .training import (ENGINES, DivergedError, TrainConfig, TrainingError, fd_gradient,
                       likelihood_gradient, train)

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
TOY_CORPUS = "toy.tsv"


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0 or not np.isfinite(value):
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return value


def _nonneg_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value >= 0 or not np.isfinite(value):
        raise argparse.ArgumentTypeError(f"must be nonnegative: {text!r}")
    return value


def _int_list(text: str) -> list:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"lengths must be positive: {text!r}")
    return values


def _load_corpus(path, **kwargs):
    try:
        if path is None:
            text = resources.files("chaincrf.data").joinpath(TOY_CORPUS).read_text("utf-8")
            return parse_corpus(text, **kwargs)
        return read_corpus(path, **kwargs)
    except OSError as exc:
        raise UsageError(f"cannot read corpus: {exc}") from None
    except (CorpusError, UnicodeDecodeError) as exc:
        raise UsageError(f"malformed corpus {path}: {exc}") from None


def cmd_train(args) -> int:
    corpus = _load_corpus(args.corpus)
    model = CrfModel.from_corpus(corpus, start_mode=args.start)
    config = TrainConfig(engine=args.engine, step_size=args.step, iterations=args.iters,
                         l2=args.l2, workers=args.workers)
    try:
        result = train(model, corpus, config)
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    save_model(result.model, args.out)
    trace_path = args.trace or f"{args.out}.trace.csv"
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "log_likelihood"])
        for it, value in enumerate(result.trace):
            writer.writerow([it, repr(float(value))])
    print(f"log-likelihood {result.trace[0]:.6f} -> {result.trace[-1]:.6f} "
          f"after {args.iters} iterations")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    corpus = _load_corpus(args.corpus)
    model = CrfModel.from_corpus(corpus, start_mode=args.start)
    rng = np.random.default_rng(args.seed)
    model = model.with_weights(rng.normal(scale=args.scale, size=model.num_features))
    fd = fd_gradient(model, corpus, h=args.h)
    grads = {e: likelihood_gradient(model, corpus, e) for e in ENGINES}
    worst_fd = 0.0
    for engine, g in grads.items():
        err = float(np.max(np.abs(g - fd)))
        worst_fd = max(worst_fd, err)
        print(f"{engine:14s} max |engine - fd| = {err:.3e}")
    fb_emp = max(float(np.max(np.abs(grads[e] - grads["emp"]))) for e in ENGINES if e != "emp")
    print(f"max |engine - fd| = {worst_fd:.3e}")
    print(f"max |fb - emp|    = {fb_emp:.3e}")
    ok = worst_fd < args.tol and fb_emp < args.tol
    print("PASS" if ok else f"FAIL (tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_bench(args) -> int:
    records = bench.run_bench(args.engine, args.lengths, args.labels, vocab=args.vocab,
                              seed=args.seed, oov_rate=args.oov, timing=not args.no_timing)
    header = {"seed": args.seed, "engine": args.engine, "labels": args.labels,
              "vocab": args.vocab, "oov": args.oov}
    text = bench.format_csv(records, header=header)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    return EXIT_OK


def cmd_decode(args) -> int:
    try:
        model = load_model(args.model)
    except OSError as exc:
        raise UsageError(f"cannot read model: {exc}") from None
    except ModelFormatError as exc:
        raise UsageError(f"malformed model {args.model}: {exc}") from None
    corpus = _load_corpus(args.input, labeled=False)
    lines = []
    for inst in corpus.instances:
        path = viterbi_decode(model, inst.observations)
        for tok, y in zip(inst.observations, path):
            lines.append(f"{tok}\t{model.alphabet.labels[y]}\n")
        lines.append("\n")
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.writelines(lines)
    return EXIT_OK


def cmd_synth(args) -> int:
    corpus = synth_corpus(args.seed, args.labels, args.length, args.count, args.vocab)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_corpus(corpus))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chaincrf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="batch gradient ascent on a labeled corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--engine", choices=ENGINES, default="emp")
    p.add_argument("--iters", type=_positive_int, default=50)
    p.add_argument("--step", type=_positive_float, default=0.05)
    p.add_argument("--l2", type=_nonneg_float, default=0.0)
    p.add_argument("--start", choices=START_MODES, default="fixed")
    p.add_argument("--trace", help="trace CSV path (default: MODEL.trace.csv)")
    p.add_argument("--workers", type=_positive_int, default=None,
                   help="threads for the per-sequence gradient map (default: 1)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="compare engine gradients with finite differences")
    p.add_argument("--corpus", default=None, help="labeled corpus (default: bundled toy corpus)")
    p.add_argument("--tol", type=_positive_float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=_positive_float, default=0.5, help="std of random weights")
    p.add_argument("--h", type=_positive_float, default=1e-5, help="finite-difference step")
    p.add_argument("--start", choices=START_MODES, default="fixed")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time, peak cells and op counts per sequence length")
    p.add_argument("--engine", choices=ENGINES, required=True)
    p.add_argument("--lengths", type=_int_list, required=True, help="e.g. 1000,2000,4000")
    p.add_argument("--labels", type=_positive_int, required=True)
    p.add_argument("--out", required=True, help="CSV path, or - for stdout")
    p.add_argument("--vocab", type=_positive_int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oov", type=float, default=0.0, help="fraction of unseen tokens")
    p.add_argument("--no-timing", action="store_true",
                   help="write zero wall times so output is byte-stable")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("decode", help="Viterbi labels for a token file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("synth", help="write a seeded synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labels", type=_positive_int, default=3)
    p.add_argument("--length", type=_positive_int, default=20)
    p.add_argument("--count", type=_positive_int, default=50)
    p.add_argument("--vocab", type=_positive_int, default=10)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "oov", 0.0) and not 0.0 <= args.oov <= 1.0:
        print("error: --oov must lie in [0, 1]", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
