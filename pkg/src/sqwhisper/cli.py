"""Command-line entry point: simulate, train, decode, score, sweep, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, cache_dir, parse_overrides, read_config_file
from .mixsim import CorpusConfig, DataError, Manifest, build_corpus

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _load_config(args) -> ExperimentConfig:
    cfg = read_config_file(args.config) if getattr(args, "config", None) else ExperimentConfig()
    pairs = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k] = v
    if getattr(args, "data", None):
        pairs["data_dir"] = args.data
    return parse_overrides(pairs, base=cfg) if pairs else cfg


def cmd_simulate(args) -> int:
    cfg = CorpusConfig(n_speakers=args.speakers, utts_per_speaker=args.utts, vocab=args.vocab,
                       min_tokens=args.min_tokens, max_tokens=args.max_tokens, seed=args.seed,
                       condition=args.condition, mode=args.mode, n_mixtures=args.mixtures,
                       n_mels=args.n_mels)
    out = args.out or cache_dir() / (f"corpus-{args.speakers}x{args.utts}-v{args.vocab}-{args.condition}-"
                                     f"{args.mode}-seed{args.seed}")
    corpus = build_corpus(cfg, out)
    counts = {s: len(corpus.manifest.split(s)) for s in ("train", "dev", "test")}
    print(json.dumps({"manifest": str(Path(out) / "manifest.tsv"), **counts}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import run_experiment

    cfg = _load_config(args).replace(checkpoint_dir=args.out)
    summary = run_experiment(cfg, args.out, verbose=not args.quiet)
    print(json.dumps({"ter": summary["ter"], "ter_mismatched": summary["ter_mismatched"],
                      "prompt_separation": summary["prompt_separation"], "out": args.out}))
    return EXIT_OK


def cmd_decode(args) -> int:
    from .mixsim import mismatched_enrollment_variant
    from .train import load_trained, transcribe

    model = load_trained(args.run, args.checkpoint)
    manifest = Manifest.read(Path(args.data) / "manifest.tsv")
    recs = manifest.split(args.split)
    if not recs:
        raise DataError(f"split {args.split!r} is empty")
    if args.mismatched:
        subset = Manifest(recs, manifest.root, manifest.speakers_disjoint, manifest._cache)
        manifest = mismatched_enrollment_variant(subset, np.random.default_rng(args.seed), pool_from=manifest)
        recs = manifest.records
    hyps = transcribe(model, recs, manifest.features)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for r, h in zip(recs, hyps):
            out.write(f"{r.mixture_id}\t{' '.join(map(str, h))}\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def _read_hyps(path) -> dict[str, list[int]]:
    hyps = {}
    for line in Path(path).read_text().splitlines():
        mid, _, toks = line.partition("\t")
        hyps[mid] = [int(t) for t in toks.split()]
    return hyps


def cmd_score(args) -> int:
    from .scoring import corpus_wer

    manifest = Manifest.read(Path(args.data) / "manifest.tsv")
    hyps = _read_hyps(args.hyp)
    recs = [r for r in manifest.records if r.mixture_id in hyps]
    if not recs:
        raise DataError("no hypothesis matches a manifest mixture id")
    res = corpus_wer([r.transcript for r in recs], [hyps[r.mixture_id] for r in recs])
    print(json.dumps({"ter": res.rate, "sub": res.substitutions, "del": res.deletions,
                      "ins": res.insertions, "ref_tokens": res.ref_len, "utterances": len(recs),
                      "empty_reference": res.empty_reference}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .ablation import ablation_suite, format_table

    cfg = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    report = ablation_suite(args.suite, cfg, seeds, args.out, verbose=not args.quiet)
    print(format_table(report))
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for d in args.runs:
        path = Path(d) / "summary.json"
        if not path.exists():
            raise DataError(f"{path} not found")
        s = json.loads(path.read_text())
        rows.append((d, s["ter"], s.get("ter_mismatched"), s.get("prompt_separation"), s["params"]["trainable"]))
    print(f"{'run':<40} {'TER':>8} {'TER-mm':>8} {'sep':>8} {'trainable':>10}")
    for d, ter, mm, sep, n in rows:
        fmt = lambda v: f"{v:8.4f}" if v is not None else f"{'-':>8}"  # noqa: E731
        print(f"{d:<40} {fmt(ter)} {fmt(mm)} {fmt(sep)} {n:>10}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sqwhisper", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic mixture corpus")
    s.add_argument("--speakers", type=int, default=4)
    s.add_argument("--utts", type=int, default=60)
    s.add_argument("--vocab", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="corpus directory (default: under $SQWHISPER_CACHE)")
    s.add_argument("--condition", choices=("clean", "noisy"), default="clean")
    s.add_argument("--mode", choices=("min", "max"), default="max")
    s.add_argument("--min-tokens", type=int, default=2)
    s.add_argument("--max-tokens", type=int, default=4)
    s.add_argument("--mixtures", type=int, default=0)
    s.add_argument("--n-mels", type=int, default=40)
    s.set_defaults(func=cmd_simulate)

    def config_args(q):
        q.add_argument("--config", help="key = value config file")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        q.add_argument("--data", help="corpus directory written by simulate (default: build in memory)")
        q.add_argument("--quiet", action="store_true")

    t = sub.add_parser("train", help="train, decode the test split and write a report")
    config_args(t)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="greedy-decode a split with a trained run")
    d.add_argument("--run", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="test")
    d.add_argument("--checkpoint", default="averaged", choices=("averaged", "last"))
    d.add_argument("--mismatched", action="store_true", help="swap in enrollments of absent speakers")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_decode)

    c = sub.add_parser("score", help="token error rate of a hypothesis file")
    c.add_argument("--data", required=True)
    c.add_argument("--hyp", required=True)
    c.set_defaults(func=cmd_score)

    w = sub.add_parser("sweep", help="run an ablation grid")
    config_args(w)
    w.add_argument("--suite", required=True, choices=("queries", "contrastive", "prompt_scheme", "mismatch"))
    w.add_argument("--seeds", default="0")
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="tabulate finished runs")
    r.add_argument("runs", nargs="+")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    from .train import CheckpointMismatch, NumericalError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, CheckpointMismatch) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
