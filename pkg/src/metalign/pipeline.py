"""End-to-end runs built from a resolved config: train, evaluate, cross-validate."""
from __future__ import annotations

import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, dump_config
from .data import SyntheticSpec, generate_synthetic_corpus, load_corpus
from .evaluation import MetricReport, check_folds, evaluate_variant, fold_splits
from .learners import MetaHyper, TrainConfig, TrainResult, train
from .model import EncoderConfig, ParameterVector, ValidationError, save_checkpoint
from .tasks import TransferMode, build_meta_dataset, parse_roster

log = logging.getLogger(__name__)


def load_corpus_from_config(config: dict, base_dir=".") -> object:
    c = config["corpus"]
    if (c["path"] is None) == (c["synthetic"] is None):
        raise ConfigError("set exactly one of corpus.path and corpus.synthetic")
    if c["path"] is not None:
        path = Path(c["path"])
        if not path.is_absolute():
            path = Path(base_dir) / path
        return load_corpus(path)
    spec = SyntheticSpec.from_dict(dict(c["synthetic"]))
    syn = generate_synthetic_corpus(spec)
    return syn.pairs if c["kind"] == "pairs" else syn.retrieval


def encoder_config(config: dict, corpus) -> EncoderConfig:
    if not corpus.vocab:
        raise ConfigError("corpus has no vocabulary; cannot size the embedding table")
    try:
        return EncoderConfig(vocab_size=len(corpus.vocab), **config["encoder"])
    except (TypeError, ValidationError) as exc:
        raise ConfigError(f"encoder: {exc}") from None


def train_config(config: dict) -> TrainConfig:
    lc, oc, tc = config["learner"], config["optimizer"], config["train"]
    try:
        hyper = MetaHyper(**{k: v for k, v in lc.items() if k != "kind"})
        return TrainConfig(
            learner=lc["kind"], hyper=hyper, finetune_lr=oc["lr"], adam_betas=tuple(oc["betas"]),
            adam_eps=oc["eps"], weight_decay=oc["weight_decay"], max_epochs=tc["max_epochs"],
            patience=tc["patience"], max_meta_batches=tc["max_meta_batches"],
            meta_validation=tc["meta_validation"],
            criterion_languages=(tuple(tc["criterion_languages"])
                                 if tc["criterion_languages"] else None),
            mining=tc["mining"], negatives_per_anchor=tc["negatives_per_anchor"],
            margin=tc["margin"], distance_mode=tc["distance_mode"], seed=config["seed"])
    except (TypeError, ValidationError) as exc:
        raise ConfigError(str(exc)) from None


def environment_record(config: dict) -> dict:
    return {"seed": config["seed"], "version": __version__, "python": sys.version.split()[0],
            "numpy": np.__version__, "platform": platform.platform(),
            "float": {"dtype": "float64", "eps": float(np.finfo(np.float64).eps)},
            "errstate": np.geterr()}


@dataclass
class RunOutput:
    result: TrainResult
    cfg: EncoderConfig
    corpus: object
    reports: dict[str, MetricReport]


def initial_params(config: dict, cfg: EncoderConfig) -> ParameterVector:
    return ParameterVector.initialize(cfg, np.random.default_rng([config["seed"], 99]))


def _meta_datasets(config, corpus, cfg, base_params):
    m = config["meta"]
    roster = parse_roster(m["roster"]) if m["roster"] else None
    return build_meta_dataset(corpus, TransferMode.parse(m["mode"]), tuple(m["counts"]),
                              m["k_shot"], m["q_query"], m["query_sampling"], base_params,
                              cfg, config["seed"], roster)


def eval_languages(config: dict, split) -> list[str]:
    return list(config["eval"]["languages"] or split.languages)


def evaluate_checkpoint(params, cfg, split, variants, languages) -> dict[str, MetricReport]:
    """One-fold reports, one per variant (a single Pearson report for sentence pairs)."""
    if split.kind == "pairs":
        rep = MetricReport("pearson_r_x100", "pairs")
        rep.add_fold(evaluate_variant(params, split, cfg, "pairs", languages))
        return {"pairs": rep}
    out = {}
    for v in variants:
        rep = MetricReport("mAP@20", v)
        rep.add_fold(evaluate_variant(params, split, cfg, v, languages))
        out[v] = rep
    return out


def write_reports(reports: dict[str, MetricReport], out_dir: Path, stem: str = "metrics") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for v, rep in reports.items():
        (out_dir / f"{stem}-{v}.txt").write_text(rep.to_table(), encoding="utf-8")
        (out_dir / f"{stem}-{v}.jsonl").write_text(rep.to_jsonl(), encoding="utf-8")
        (out_dir / f"{stem}-{v}.csv").write_text(rep.to_csv(), encoding="utf-8")


def run_training(config: dict, corpus, run_dir=None, evaluate: bool = True,
                 resume: bool = False) -> RunOutput:
    """Build meta-datasets, train, and (optionally) evaluate the best checkpoint."""
    cfg = encoder_config(config, corpus)
    params = initial_params(config, cfg)
    tconf = train_config(config)
    datasets = _meta_datasets(config, corpus, cfg, params)
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        (run / "config.yaml").write_text(dump_config(config), encoding="utf-8")
        (run / "environment.json").write_text(
            json.dumps(environment_record(config), sort_keys=True, indent=1), encoding="utf-8")
        for phase, ds in datasets.items():
            ds.save(run / f"{phase}.jsonl")
        save_checkpoint(run / "init.ckpt", params, cfg)
    result = train(tconf, datasets, corpus, params, cfg, run_dir=run, resume=resume)
    reports = {}
    if evaluate:
        split = corpus.split(config["eval"]["split"])
        reports = evaluate_checkpoint(result.best_params, cfg, split, config["eval"]["variants"],
                                      eval_languages(config, split))
        if run is not None:
            write_reports(reports, run)
    return RunOutput(result, cfg, corpus, reports)


def _run_fold(args):
    config, corpus, folds, fold, run_dir = args
    fold_corpus = corpus.with_splits(fold_splits(corpus, folds, fold))
    fold_dir = Path(run_dir) / f"fold-{fold}" if run_dir is not None else None
    cfg_f = dict(config, seed=config["seed"] * 1000 + fold)
    out = run_training(cfg_f, fold_corpus, fold_dir)
    return {v: rep.fold_values for v, rep in out.reports.items()}


def run_crossval(config: dict, corpus, folds: int | None = None, run_dir=None,
                 workers: int = 1) -> dict[str, MetricReport]:
    folds = config["crossval"]["folds"] if folds is None else folds
    if folds < 2:
        raise ConfigError("cross-validation needs at least 2 folds")
    check_folds(corpus, folds)
    jobs = [(config, corpus, folds, f, run_dir) for f in range(folds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_fold = list(pool.map(_run_fold, jobs))
    else:
        per_fold = [_run_fold(j) for j in jobs]
    reports: dict[str, MetricReport] = {}
    for fv in per_fold:
        for v, values in fv.items():
            rep = reports.setdefault(v, MetricReport(
                "pearson_r_x100" if v == "pairs" else "mAP@20", v))
            rep.add_fold({k: vals[0] for k, vals in values.items()})
    if run_dir is not None:
        write_reports(reports, Path(run_dir), stem="aggregate")
    return reports
