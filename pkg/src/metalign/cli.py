"""``metalign`` command line.

Every command writes into ``--run-dir`` and refuses a non-empty one
unless ``--force`` is given. Exit codes: 0 ok, 2 config, 3 data,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .config import ConfigError, dump_config, load_config, resolve_config
from .data import CorpusError, SyntheticSpec, generate_synthetic_corpus, load_corpus, write_corpus
from .evaluation import MetricReport, PoolError
from .model import LayoutMismatch, ValidationError, load_checkpoint
from .tasks import TaskSamplingError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
WORKERS_ENV = "METALIGN_WORKERS"

log = logging.getLogger("metalign")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _prepare_run_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(f"run directory {path} is not empty (use --force to reuse it)",
                       EXIT_CONFIG)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_synth(args) -> int:
    try:
        data = yaml.safe_load(Path(args.spec).read_text(encoding="utf-8")) or {}
        spec = SyntheticSpec.from_dict(data)
        syn = generate_synthetic_corpus(spec)
    except (OSError, yaml.YAMLError, TypeError, CorpusError) as exc:
        raise CliError(f"synthetic spec: {exc}", EXIT_CONFIG) from None
    run = _prepare_run_dir(Path(args.run_dir), args.force)
    write_corpus(run / "retrieval.jsonl", syn.retrieval)
    write_corpus(run / "pairs.jsonl", syn.pairs)
    (run / "spec.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=True))
    print(f"languages: {', '.join(syn.retrieval.languages)}")
    print(f"retrieval records: {len(syn.retrieval)}  pair records: {len(syn.pairs)}  "
          f"vocab: {len(syn.vocab)}")
    for key, counts in syn.retrieval.report().items():
        print(f"  {key}: {counts['questions']} questions, {counts['candidates']} candidates")
    return EXIT_OK


def _load_run_inputs(args):
    config, base = load_config(args.config)
    from .pipeline import load_corpus_from_config
    corpus = load_corpus_from_config(config, base)
    return config, corpus


def cmd_train(args) -> int:
    from .pipeline import run_training
    config, corpus = _load_run_inputs(args)
    run = _prepare_run_dir(Path(args.run_dir), args.force or args.resume)
    out = run_training(config, corpus, run, resume=args.resume)
    r = out.result
    print(f"meta-batches: {len(r.history)}  early stop: {r.stopped_early}")
    print(f"dev criterion: untrained {r.initial_criterion:.6f}  best {r.best_criterion:.6f}")
    for rep in out.reports.values():
        print(rep.to_table())
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import evaluate_checkpoint, write_reports
    params, cfg = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    split = corpus.split(args.split)
    if not len(split):
        raise CliError(f"corpus has no {args.split} split", EXIT_DATA)
    langs = args.languages or split.languages
    if corpus.kind == "retrieval" and args.query_language:
        # explicit single-pool request, e.g. --variant bi --query-language AR --candidate-language EN
        from .evaluation import build_pool, map_by_query_language
        pool = build_pool(split, args.variant[0], [args.query_language],
                          args.candidate_language or [args.query_language])
        rep = MetricReport("mAP@20", args.variant[0])
        rep.add_fold({pool.arrangement.label: v
                      for v in map_by_query_language(params, pool, cfg).values()})
        reports = {args.variant[0]: rep}
    else:
        reports = evaluate_checkpoint(params, cfg, split, args.variant, langs)
    run = _prepare_run_dir(Path(args.run_dir), args.force)
    write_reports(reports, run)
    for rep in reports.values():
        print(rep.to_table())
    return EXIT_OK


def cmd_crossval(args) -> int:
    from .pipeline import run_crossval
    config, corpus = _load_run_inputs(args)
    folds = args.folds if args.folds is not None else config["crossval"]["folds"]
    if folds < 2:
        raise CliError("--folds must be at least 2", EXIT_CONFIG)
    run = _prepare_run_dir(Path(args.run_dir), args.force)
    (run / "config.yaml").write_text(dump_config(config), encoding="utf-8")
    reports = run_crossval(config, corpus, folds, run, args.workers)
    for rep in reports.values():
        print(rep.to_table())
    return EXIT_OK


def cmd_print_config(args) -> int:
    config = load_config(args.config)[0] if args.config else resolve_config({})
    sys.stdout.write(dump_config(config))
    return EXIT_OK


def cmd_report(args) -> int:
    for path in args.reports:
        rep = MetricReport.from_jsonl(Path(path).read_text(encoding="utf-8"))
        print(rep.to_table())
    return EXIT_OK


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metalign", description=__doc__.splitlines()[0])
    p.add_argument("--run-dir", default="run", help="output directory for this command")
    p.add_argument("--force", action="store_true", help="reuse a non-empty run directory")
    p.add_argument("--workers", type=int, default=_default_workers(),
                   help=f"parallel fold workers (default from ${WORKERS_ENV}, else 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic parallel corpus")
    s.add_argument("spec", help="YAML synthetic spec")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="meta-train from a config file")
    t.add_argument("config")
    t.add_argument("--resume", action="store_true", help="continue an interrupted run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--variant", nargs="+", default=["mono", "bi", "multi"],
                   choices=["mono", "bi", "multi"])
    e.add_argument("--languages", nargs="+")
    e.add_argument("--query-language")
    e.add_argument("--candidate-language", nargs="+")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("crossval", help="k-fold train/evaluate with mean ± std")
    c.add_argument("config")
    c.add_argument("--folds", type=int)
    c.set_defaults(func=cmd_crossval)

    pc = sub.add_parser("print-config", help="print the fully resolved configuration")
    pc.add_argument("config", nargs="?")
    pc.set_defaults(func=cmd_print_config)

    r = sub.add_parser("report", help="render metric JSONL files as tables")
    r.add_argument("reports", nargs="+")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, PoolError, TaskSamplingError, LayoutMismatch, OSError,
            ValidationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
