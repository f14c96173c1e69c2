"""Run configuration: defaults, YAML loading and resolution."""
from __future__ import annotations

import copy
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "corpus": {
        "path": None,           # JSONL corpus file; relative to the config file
        "synthetic": None,      # or a synthetic spec mapping
        "kind": "retrieval",    # which synthetic corpus to use: retrieval | pairs
    },
    "encoder": {
        "embed_dim": 32,
        "max_question_len": 96,
        "max_candidate_len": 256,
        "max_sentence_len": 100,
        "use_projection": True,
        "normalize_output": False,
    },
    "meta": {
        "mode": "trans",
        "counts": [7000, 2000, 1000],
        "k_shot": 8,
        "q_query": 4,
        "query_sampling": "random",
        "roster": None,
    },
    "learner": {
        "kind": "maml",
        "inner_lr": 1e-3,
        "outer_lr": 1e-5,
        "inner_steps": 5,
        "student_inner_steps": 1,
        "meta_batch": 4,
        "kd_weight": 0.5,
        "order": "first",
    },
    "optimizer": {
        "lr": 5e-5,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "weight_decay": 0.0,
    },
    "train": {
        "max_epochs": 20,
        "patience": 50,
        "max_meta_batches": None,
        "meta_validation": True,
        "criterion_languages": None,
        "mining": "random",
        "negatives_per_anchor": 3,
        "margin": 1.0,
        "distance_mode": "cosine",
    },
    "eval": {
        "variants": ["mono", "bi", "multi"],
        "languages": None,
        "split": "test",
    },
    "crossval": {
        "folds": 5,
    },
}

# mappings whose contents are free-form
_OPAQUE = {("corpus", "synthetic"), ("meta", "roster")}


def _merge(base: dict, user: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        here = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(here)}")
        if isinstance(base[key], dict) and here not in _OPAQUE:
            if not isinstance(value, dict):
                raise ConfigError(f"{'.'.join(here)} must be a mapping")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(user: dict | None = None) -> dict:
    """Defaults overlaid with ``user``; every key materialized."""
    user = user or {}
    if not isinstance(user, dict):
        raise ConfigError("config document must be a mapping")
    cfg = _merge(DEFAULTS, user)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    from .learners import LEARNERS
    from .tasks import TransferMode
    try:
        TransferMode.parse(cfg["meta"]["mode"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["learner"]["kind"] not in LEARNERS:
        raise ConfigError(f"learner.kind must be one of {LEARNERS}")
    counts = cfg["meta"]["counts"]
    if not (isinstance(counts, list) and len(counts) == 3
            and all(isinstance(c, int) and c >= 0 for c in counts)):
        raise ConfigError("meta.counts must be three non-negative integers")
    if cfg["meta"]["query_sampling"] not in ("random", "similar"):
        raise ConfigError("meta.query_sampling must be random or similar")
    if cfg["train"]["mining"] not in ("random", "hard", "semi-hard"):
        raise ConfigError("train.mining must be random, hard or semi-hard")
    if not isinstance(cfg["crossval"]["folds"], int) or cfg["crossval"]["folds"] < 2:
        raise ConfigError("crossval.folds must be an integer >= 2")
    if cfg["corpus"]["kind"] not in ("retrieval", "pairs"):
        raise ConfigError("corpus.kind must be retrieval or pairs")
    bad = [v for v in cfg["eval"]["variants"] if v not in ("mono", "bi", "multi")]
    if bad:
        raise ConfigError(f"unknown eval variants {bad}")
    if cfg["train"]["patience"] is None or cfg["train"]["patience"] <= 0:
        raise ConfigError("train.patience must be positive")
    from .pipeline import train_config
    train_config(cfg)      # learner hyper-parameter checks, raised as ConfigError


def load_config(path) -> tuple[dict, Path]:
    """Resolved config and the directory relative paths are taken from."""
    p = Path(path)
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML: {exc}") from None
    return resolve_config(data), p.parent


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)
