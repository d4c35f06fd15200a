"""Command-line entry point: ``vqspk <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import codebook as cbk
from . import features, pipeline, synth
from .errors import RetrievalError
from .stats import DEFAULT_LAMBDA, DEFAULT_RIDGE, SO_METRICS, SoMetric
from .vsm import VsmMetric


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _non_negative_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _non_negative_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def _n_list(text: str) -> List[int]:
    try:
        vals = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text}")
    if not vals or vals[0] < 1:
        raise argparse.ArgumentTypeError("n-best values must be positive")
    return vals


def _metric2_list(text: str) -> List[str]:
    names = list(SO_METRICS) if text == "all" else [x.strip() for x in text.split(",") if x.strip()]
    bad = [x for x in names if x not in SO_METRICS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"--metric2 takes {'|'.join(SO_METRICS)} (comma list) or all")
    return names


def _add_retrieval_flags(p: argparse.ArgumentParser, n_default):
    p.add_argument("--k1", type=_positive_int, default=pipeline.DEFAULT_K1,
                   help="first-level candidates kept (default 50)")
    p.add_argument("--metric1", choices=[m.value for m in VsmMetric], default="intersect")
    p.add_argument("--metric2", type=_metric2_list, default=["bic"],
                   help="bic|ds|ahs|t2, a comma list, or 'all' (default bic)")
    p.add_argument("--lambda", dest="lam", type=_positive_float, default=DEFAULT_LAMBDA)
    p.add_argument("--ridge", type=_non_negative_float, default=DEFAULT_RIDGE,
                   help="covariance ridge; 0 disables regularisation")
    p.add_argument("--ahs-literal", action="store_true",
                   help="evaluate the degenerate literal AHS trace (always d/2)")
    p.add_argument("--n", type=n_default[0], default=n_default[1])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqspk", description="Two-level query-by-example speaker retrieval")
    parser.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
    parser.add_argument("--seed", type=_non_negative_int, default=0)
    parser.add_argument("--allow-skip", action="store_true",
                        help="exit 0 even when some segments had to be skipped")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="WAV files -> feature files")
    p.add_argument("inputs", nargs="+", type=Path, help="WAV files or directories")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--drop-db", type=_positive_float, default=features.DROP_DB)

    p = sub.add_parser("train-codebook", help="feature files -> codebook")
    p.add_argument("features", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--K", type=_positive_int, default=cbk.DEFAULT_K)
    p.add_argument("--per-segment", type=_positive_int, default=cbk.DEFAULT_PER_SEGMENT)
    p.add_argument("--max-iters", type=_positive_int, default=50)
    p.add_argument("--tol", type=_positive_float, default=1e-4)

    p = sub.add_parser("build-index", help="feature files + codebook -> index")
    p.add_argument("features", nargs="+", type=Path)
    p.add_argument("--codebook", type=Path, required=True)
    p.add_argument("--labels", type=Path, help="TSV: segment_id<TAB>speaker_id")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("query", help="two-level retrieval for one query")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--codebook", type=Path, help="needed for --features queries")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--id", help="segment id already in the index")
    g.add_argument("--features", type=Path, help="external feature file")
    _add_retrieval_flags(p, (_positive_int, 5))

    p = sub.add_parser("evaluate", help="n-best evaluation over the whole index")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--brute-force", action="store_true",
                   help="also time the unpruned second-order search")
    p.add_argument("--csv", type=Path, help="also write the results as CSV")
    _add_retrieval_flags(p, (_n_list, list(pipeline.N_BEST)))

    p = sub.add_parser("synth", help="write a synthetic labelled corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--speakers", type=_positive_int, default=20)
    p.add_argument("--segments", type=_positive_int, default=10)
    p.add_argument("--frames-min", type=_positive_int, default=150)
    p.add_argument("--frames-max", type=_positive_int, default=400)
    p.add_argument("--dim", type=_positive_int, default=features.FEATURE_DIM)
    p.add_argument("--mean-spread", type=_positive_float, default=10.0)
    p.add_argument("--cov-scale", type=_positive_float, default=1.0)
    return parser


def _expand(paths: Sequence[Path], suffix: str) -> List[Path]:
    out = []
    for p in paths:
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() == suffix))
        else:
            out.append(p)
    return out


def _load_features(paths: Sequence[Path]):
    files = _expand(paths, ".ftr")
    if not files:
        raise RetrievalError("no feature files given")
    return [features.read_features(f) for f in files]


def _metrics(args) -> List[SoMetric]:
    return [SoMetric(name, args.lam, args.ridge, args.ahs_literal) for name in args.metric2]


def cmd_extract(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    skipped = 0
    for wav in _expand(args.inputs, ".wav"):
        try:
            buf = features.load_wav(wav)
            fm = features.extract(buf, wav.stem, args.drop_db)
        except features.TooShort as exc:
            print(f"skipped\t{wav}\t{exc}", file=sys.stderr)
            skipped += 1
            continue
        features.write_features(args.out / f"{wav.stem}.ftr", fm)
        print(f"{wav.stem}\t{fm.n_frames} frames")
    return skipped


def cmd_train(args) -> int:
    segs = _load_features(args.features)
    frames = cbk.sample_frames(segs, args.per_segment, args.seed)
    print(f"training on {len(frames)} frames from {len(segs)} segments")
    cb = cbk.train_kmeans(frames, args.K, args.max_iters, args.tol, args.seed)
    cbk.write_codebook(args.out, cb)
    print(f"codebook K={cb.K} D={cb.D} iterations={cb.iterations} inertia={cb.inertia:.6g}")
    return 0


def cmd_build(args) -> int:
    segs = _load_features(args.features)
    cb = cbk.read_codebook(args.codebook)
    labels = pipeline.read_labels(args.labels) if args.labels else None
    index = pipeline.build_index(segs, cb, labels, {"codebook": str(args.codebook)})
    pipeline.write_index(args.out, index)
    under = sum(s.underdetermined for s in index.stats)
    print(f"indexed {len(index)} segments (K={index.K}, D={index.D}); "
          f"{under} with fewer than D+1 frames; {len(index.skipped)} skipped")
    for sid, why in index.skipped:
        print(f"skipped\t{sid}\t{why}", file=sys.stderr)
    return len(index.skipped)


def cmd_query(args) -> int:
    cb = cbk.read_codebook(args.codebook) if args.codebook else None
    index = pipeline.read_index(args.index, cb)
    query = args.id if args.id is not None else features.read_features(args.features)
    for m2 in _metrics(args):
        res = pipeline.retrieve(query, index, args.k1, VsmMetric.parse(args.metric1), m2, args.n)
        print(f"# {m2.label}")
        for rank, c in enumerate(res, 1):
            lab = index.labels[index.pos[c.segment_id]] or ""
            flag = "\tsingular" if c.flagged else ""
            print(f"{rank}\t{c.segment_id}\t{lab}\t{c.score:.6f}{flag}")
    return 0


def cmd_evaluate(args) -> int:
    index = pipeline.read_index(args.index)
    m1 = VsmMetric.parse(args.metric1)
    reports = []
    for m2 in _metrics(args):
        if args.brute_force:
            rep = pipeline.timing_report(index, args.k1, m1, m2, args.n, args.threads)
        else:
            rep = pipeline.evaluate(index, args.k1, m1, m2, args.n, args.threads)
        reports.append(rep)
    print(pipeline.format_table(reports))
    print()
    print(pipeline.format_csv(reports))
    if args.csv:
        args.csv.write_text(pipeline.format_csv(reports) + "\n")
    return 0


def cmd_synth(args) -> int:
    spec = synth.SynthSpec(args.speakers, args.segments, args.frames_min, args.frames_max, args.dim,
                           args.mean_spread, args.cov_scale, args.seed)
    segs, labels, _ = synth.generate(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    for seg in segs:
        features.write_features(args.out / f"{seg.segment_id}.ftr", seg)
    pipeline.write_labels(args.out / "labels.tsv", labels)
    print(f"wrote {len(segs)} segments from {spec.num_speakers} speakers to {args.out}")
    return 0


COMMANDS = {
    "extract": cmd_extract,
    "train-codebook": cmd_train,
    "build-index": cmd_build,
    "query": cmd_query,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
}


def resolved_config(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else [str(x) for x in v] if isinstance(v, list) and v
                and isinstance(v[0], Path) else v)
            for k, v in sorted(vars(args).items())}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    print("# config: " + json.dumps(resolved_config(args), sort_keys=True))
    try:
        skipped = COMMANDS[args.command](args)
    except (RetrievalError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if skipped:
        print(f"warning: {skipped} segment(s) skipped", file=sys.stderr)
        return 0 if args.allow_skip else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
