"""Evaluation pools, ranking metrics and fold-level reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import EncoderConfig, ParameterVector, TokenBatch, ValidationError, forward
from .tasks import LanguageArrangement

log = logging.getLogger(__name__)

VARIANTS = ("mono", "bi", "multi")


class PoolError(ValueError):
    pass


@dataclass(frozen=True)
class PoolQuery:
    tokens: tuple[int, ...]
    language: str
    relevant: frozenset[int]
    key: str


@dataclass(frozen=True)
class PoolCandidate:
    tokens: tuple[int, ...]
    language: str
    id: int
    key: str


@dataclass
class EvalPool:
    queries: list[PoolQuery]
    candidates: list[PoolCandidate]
    variant: str
    arrangement: LanguageArrangement

    def __post_init__(self):
        ids = {c.id for c in self.candidates}
        for q in self.queries:
            if not q.relevant <= ids:
                raise PoolError(f"query {q.key}: relevant ids missing from the candidate pool")


def _check_variant(variant, q_langs, r_langs):
    if variant not in VARIANTS:
        raise PoolError(f"unknown variant {variant!r}")
    if not q_langs or not r_langs:
        raise PoolError("query and candidate languages must be non-empty")
    if variant == "mono" and not (len(q_langs) == len(r_langs) == 1 and q_langs == r_langs):
        raise PoolError(f"mono needs one shared language, got {q_langs} / {r_langs}")
    if variant == "bi" and not (len(q_langs) == len(r_langs) == 1 and q_langs != r_langs):
        raise PoolError(f"bi needs two different languages, got {q_langs} / {r_langs}")
    if variant == "multi" and len(r_langs) < 2:
        raise PoolError("multi needs at least two candidate languages")


def build_pool(split, variant: str, query_langs: Sequence[str],
               candidate_langs: Sequence[str] | None = None) -> EvalPool:
    """Query and candidate pools for one task-language variant.

    Candidates are de-duplicated per language by answer key and numbered
    in pool order. A query's relevant set holds its own answer in every
    candidate language.
    """
    q_langs = tuple(sorted(query_langs))
    r_langs = tuple(sorted(candidate_langs if candidate_langs is not None else query_langs))
    _check_variant(variant, q_langs, r_langs)
    present = set(split.languages)
    missing = [x for x in q_langs + r_langs if x not in present]
    if missing:
        raise PoolError(f"split lacks languages {sorted(set(missing))}")
    if variant == "multi":
        base = set(split.question_ids([r_langs[0]]))
        for lang in r_langs[1:] + q_langs:
            if set(split.question_ids([lang])) != base:
                raise PoolError(f"corpus is not parallel across {sorted(set(r_langs + q_langs))}")

    candidates: list[PoolCandidate] = []
    index: dict[tuple[str, str], int] = {}
    for lang in r_langs:
        for rec in split.by_language(lang):
            ck = (lang, rec.candidate_key)
            if ck not in index:
                index[ck] = len(candidates)
                candidates.append(PoolCandidate(rec.candidate, lang, len(candidates), rec.candidate_key))

    queries: list[PoolQuery] = []
    for lang in q_langs:
        for rec in split.by_language(lang):
            rel = set()
            for rl in r_langs:
                if split.has(rec.question_id, rl):
                    ck = (rl, split.get(rec.question_id, rl).candidate_key)
                    rel.add(index[ck])
            queries.append(PoolQuery(rec.question, lang, frozenset(rel), rec.question_id))
    return EvalPool(queries, candidates, variant, LanguageArrangement(q_langs, r_langs))


def _encode(params, seqs, max_len, cfg, chunk=512):
    out = []
    for i in range(0, len(seqs), chunk):
        b = TokenBatch.from_sequences(seqs[i:i + chunk], max_len)
        b.validate(cfg.vocab_size)
        out.append(forward(params.values, b, cfg)[0])
    return np.concatenate(out) if out else np.zeros((0, cfg.embed_dim))


def _unit(X):
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(n == 0, 1.0, n)


def score_matrix(params: ParameterVector, pool: EvalPool, cfg: EncoderConfig,
                 similarity: str = "cosine") -> np.ndarray:
    """(queries x candidates) similarity matrix."""
    if not pool.candidates:
        raise PoolError("empty candidate pool")
    Q = _encode(params, [q.tokens for q in pool.queries], cfg.max_question_len, cfg)
    C = _encode(params, [c.tokens for c in pool.candidates], cfg.max_candidate_len, cfg)
    if similarity == "cosine":
        return _unit(Q) @ _unit(C).T
    if similarity == "dot":
        return Q @ C.T
    raise ValidationError(f"unknown similarity {similarity!r}")


def rank_from_scores(scores: np.ndarray, ids: np.ndarray | None = None) -> np.ndarray:
    """Candidate ids by descending score; ties go to the lower id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids)
    return ids[np.lexsort((ids, -scores))]


def rank_candidates(params: ParameterVector, pool: EvalPool, query_index: int,
                    cfg: EncoderConfig, similarity: str = "cosine") -> np.ndarray:
    sub = EvalPool([pool.queries[query_index]], pool.candidates, pool.variant, pool.arrangement)
    S = score_matrix(params, sub, cfg, similarity)
    return rank_from_scores(S[0], np.array([c.id for c in pool.candidates]))


def average_precision_at_k(flags, R: int, k: int = 20) -> float:
    """(1/min(R,k)) * sum over relevant ranks i <= k of precision@i."""
    if R < 1:
        raise ValidationError("average precision needs at least one relevant item")
    f = np.asarray(flags, dtype=bool)[:k]
    if not f.any():
        return 0.0
    hits = np.cumsum(f)
    ranks = np.arange(1, len(f) + 1)
    return float(np.sum(hits[f] / ranks[f]) / min(R, k))


def per_query_ap(scores: np.ndarray, pool: EvalPool, k: int = 20) -> list[float | None]:
    ids = np.array([c.id for c in pool.candidates])
    out = []
    for qi, q in enumerate(pool.queries):
        if not q.relevant:
            log.warning("query %s (%s) has no relevant candidate; excluded", q.key, q.language)
            out.append(None)
            continue
        order = rank_from_scores(scores[qi], ids)[:k]
        flags = np.fromiter((i in q.relevant for i in order), dtype=bool, count=len(order))
        out.append(average_precision_at_k(flags, len(q.relevant), k))
    return out


def map_at_20(params: ParameterVector, pool: EvalPool, cfg: EncoderConfig,
              k: int = 20, similarity: str = "cosine") -> float:
    if not pool.queries or not pool.candidates:
        raise PoolError("empty evaluation pool")
    aps = [a for a in per_query_ap(score_matrix(params, pool, cfg, similarity), pool, k)
           if a is not None]
    if not aps:
        raise PoolError("no query has a relevant candidate")
    return float(np.mean(aps))


def map_by_query_language(params, pool, cfg, k=20, similarity="cosine") -> dict[str, float]:
    aps = per_query_ap(score_matrix(params, pool, cfg, similarity), pool, k)
    out: dict[str, list[float]] = {}
    for q, a in zip(pool.queries, aps):
        if a is not None:
            out.setdefault(q.language, []).append(a)
    return {lang: float(np.mean(v)) for lang, v in sorted(out.items())}


def pearson_r_times_100(predictions, golds) -> float:
    x = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(golds, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("predictions and golds must be equal-length vectors")
    if len(x) < 2:
        raise ValidationError("Pearson correlation needs at least two points")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.dot(xc, xc)), np.sqrt(np.dot(yc, yc))
    if sx == 0 or sy == 0:
        raise ValidationError("Pearson correlation undefined for zero variance")
    return float(100.0 * np.dot(xc, yc) / (sx * sy))


def pair_similarities(params, records, cfg) -> np.ndarray:
    A = _encode(params, [r.sentence1 for r in records], cfg.max_sentence_len, cfg)
    B = _encode(params, [r.sentence2 for r in records], cfg.max_sentence_len, cfg)
    return np.sum(_unit(A) * _unit(B), axis=1)


def pearson_by_language_pair(params, split, cfg, language_pairs=None) -> dict[str, float]:
    pairs = language_pairs or split.language_pairs
    out = {}
    for lp in pairs:
        recs = split.by_language_pair(lp)
        if not recs:
            raise PoolError(f"no sentence pairs for {lp}")
        out[lp] = pearson_r_times_100(pair_similarities(params, recs, cfg), [r.gold for r in recs])
    return out


def evaluate_variant(params, split, cfg, variant: str, languages: Sequence[str],
                     similarity: str = "cosine") -> dict[str, float]:
    """Scores keyed by query language (retrieval) or language pair (sentence pairs).

    Retrieval: ``mono`` pools each language with itself, ``bi`` pairs each
    language with each other one (key ``XX_YY``), ``multi`` pools all
    ``languages`` as candidates and scores queries per language.
    """
    if split.kind == "pairs":
        return pearson_by_language_pair(params, split, cfg, list(languages) or None)
    langs = sorted(languages)
    if variant == "mono":
        return {lq: map_at_20(params, build_pool(split, "mono", [lq]), cfg, similarity=similarity)
                for lq in langs}
    if variant == "bi":
        return {f"{lq}_{lr}": map_at_20(params, build_pool(split, "bi", [lq], [lr]), cfg,
                                        similarity=similarity)
                for lq in langs for lr in langs if lq != lr}
    pool = build_pool(split, "multi", langs, langs)
    return map_by_query_language(params, pool, cfg, similarity=similarity)


def dev_criterion(split, cfg, languages: Sequence[str] | None = None) -> Callable:
    """Default early-stopping signal: multilingual dev score averaged over query languages."""
    if split.kind == "pairs":
        langs = list(languages) if languages else split.language_pairs
        return lambda params: float(np.mean(list(
            pearson_by_language_pair(params, split, cfg, langs).values())))
    langs = sorted(languages) if languages else split.languages
    pool = build_pool(split, "multi", langs, langs)

    def criterion(params):
        return float(np.mean(list(map_by_query_language(params, pool, cfg).values())))
    return criterion


# --------------------------------------------------------------------------
# reports

@dataclass
class MetricReport:
    metric: str                                  # "mAP@20" | "pearson_r_x100"
    variant: str
    fold_values: dict[str, list[float]] = field(default_factory=dict)

    @property
    def folds(self) -> int:
        return max((len(v) for v in self.fold_values.values()), default=0)

    @property
    def scale(self) -> float:
        return 100.0 if self.metric == "mAP@20" else 1.0

    def add_fold(self, scores: dict[str, float]) -> None:
        if self.fold_values and set(scores) != set(self.fold_values):
            raise ValidationError("fold scores must cover the same keys")
        for key, v in scores.items():
            self.fold_values.setdefault(key, []).append(float(v))

    def fold_means(self) -> list[float]:
        keys = sorted(self.fold_values)
        return [float(np.mean([self.fold_values[k][f] for k in keys])) for f in range(self.folds)]

    def summary(self) -> dict[str, tuple[float, float]]:
        """(mean, population std) per key plus the across-key ``mean`` row, display scale."""
        out = {k: (float(np.mean(v)) * self.scale, float(np.std(v)) * self.scale)
               for k, v in sorted(self.fold_values.items())}
        fm = self.fold_means()
        out["mean"] = (float(np.mean(fm)) * self.scale, float(np.std(fm)) * self.scale)
        return out

    def to_table(self) -> str:
        s = self.summary()
        keys = list(s)
        cells = [f"{s[k][0]:.1f} ± {s[k][1]:.1f}" for k in keys]
        widths = [max(len(k), len(c)) for k, c in zip(keys, cells)]
        head = " | ".join(k.ljust(w) for k, w in zip(keys, widths))
        row = " | ".join(c.ljust(w) for c, w in zip(cells, widths))
        title = f"{self.metric} ({self.variant}, {self.folds} fold{'s' if self.folds != 1 else ''})"
        return f"{title}\n{head}\n{'-' * len(head)}\n{row}\n"

    def to_jsonl(self) -> str:
        lines = []
        for k, (m, sd) in self.summary().items():
            values = self.fold_means() if k == "mean" else self.fold_values[k]
            lines.append(json.dumps({"metric": self.metric, "variant": self.variant, "key": k,
                                     "mean": m, "std": sd, "folds": values},
                                    sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "variant", "key", "fold", "value"])
        for k in sorted(self.fold_values):
            for f, v in enumerate(self.fold_values[k]):
                w.writerow([self.metric, self.variant, k, f, repr(v)])
        return buf.getvalue()

    @classmethod
    def from_jsonl(cls, text: str) -> "MetricReport":
        rows = [json.loads(x) for x in text.splitlines() if x.strip()]
        if not rows:
            raise ValidationError("empty report")
        rep = cls(rows[0]["metric"], rows[0]["variant"])
        for r in rows:
            if r["key"] != "mean":
                rep.fold_values[r["key"]] = list(r["folds"])
        return rep


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


# --------------------------------------------------------------------------
# cross-validation

def fold_of(key: str, folds: int) -> int:
    return int(hashlib.sha256(key.encode("utf-8")).hexdigest(), 16) % folds


def fold_splits(corpus, folds: int, fold: int) -> dict[str, str]:
    """Split assignment for one fold: test = fold, dev = next fold, train = rest."""
    dev = (fold + 1) % folds
    out = {}
    for key in corpus.item_keys():
        f = fold_of(key, folds)
        out[key] = "test" if f == fold else "dev" if f == dev else "train"
    return out


def check_folds(corpus, folds: int) -> None:
    if folds < 2:
        raise ValidationError("cross-validation needs at least 2 folds")
    counts = np.bincount([fold_of(k, folds) for k in corpus.item_keys()], minlength=folds)
    if np.any(counts == 0):
        raise ValidationError(f"corpus too small for {folds} non-empty folds (sizes {counts.tolist()})")


def cross_validate(config: dict, corpus, folds: int = 5, run_dir=None, workers: int = 1):
    """Train and evaluate once per fold; returns {variant: MetricReport}."""
    from .pipeline import run_crossval     # late import: pipeline depends on this module
    return run_crossval(config, corpus, folds=folds, run_dir=run_dir, workers=workers)
