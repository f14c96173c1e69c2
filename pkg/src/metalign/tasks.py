"""Episodic meta-task curation over language arrangements.

A task item is ``(key, query_lang, candidate_lang)``: for retrieval
corpora ``key`` is a question id and the item pairs the question in
``query_lang`` with its answer in ``candidate_lang``; for sentence-pair
corpora it names the pair ``key`` in language pair
``query_lang-candidate_lang``. Tasks store ids only, never tokens.
"""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import EncoderConfig, ParameterVector, TokenBatch, forward

PHASES = ("meta-train", "meta-valid", "meta-test")
PHASE_SPLIT = {"meta-train": "train", "meta-valid": "dev", "meta-test": "test"}
DEFAULT_COUNTS = (7000, 2000, 1000)


class TaskSamplingError(ValueError):
    pass


class TransferMode(str, enum.Enum):
    MONO_MONO = "mono-mono"
    MONO_BI = "mono-bi"
    MONO_MULTI = "mono-multi"
    BI_MULTI = "bi-multi"
    MIXT = "mixt"
    TRANS = "trans"
    MONO_BI_MULTI = "mono-bi-multi"

    @classmethod
    def parse(cls, value) -> "TransferMode":
        if isinstance(value, cls):
            return value
        norm = str(value).strip().lower().replace("_", "-").replace("→", "-")
        for m in cls:
            if m.value == norm:
                return m
        raise TaskSamplingError(f"unknown transfer mode {value!r}")


MIXT_CYCLE = (TransferMode.MONO_MONO, TransferMode.MONO_BI,
              TransferMode.MONO_MULTI, TransferMode.BI_MULTI)
TRANS_PHASES = {"meta-train": TransferMode.MONO_BI, "meta-valid": TransferMode.BI_MULTI,
                "meta-test": TransferMode.MONO_MULTI}


def concrete_mode(mode, phase: str, index: int = 0) -> TransferMode:
    """The single-shape mode a task of ``mode`` takes in ``phase``."""
    mode = TransferMode.parse(mode)
    if mode is TransferMode.TRANS:
        return TRANS_PHASES[phase]
    if mode is TransferMode.MIXT:
        return MIXT_CYCLE[index % len(MIXT_CYCLE)]
    return mode


@dataclass(frozen=True)
class LanguageArrangement:
    query_langs: tuple[str, ...]
    candidate_langs: tuple[str, ...]

    @property
    def variant(self) -> str:
        if len(self.candidate_langs) >= 2:
            return "multi"
        if len(self.query_langs) == 1 and self.query_langs == self.candidate_langs:
            return "mono"
        if len(self.query_langs) == 1:
            return "bi"
        return "multi"

    @property
    def label(self) -> str:
        q = self.query_langs[0] if len(self.query_langs) == 1 else "{" + ",".join(self.query_langs) + "}"
        r = (self.candidate_langs[0] if len(self.candidate_langs) == 1
             else "{" + ",".join(self.candidate_langs) + "}")
        return f"{q}_{r}"

    def __str__(self) -> str:
        return self.label


_ARR_RE = re.compile(r"^\s*(\{[A-Z,\s]+\}|[A-Z]{2})\s*_\s*(\{[A-Z,\s]+\}|[A-Z]{2})\s*$")


def parse_arrangement(text: str) -> LanguageArrangement:
    """Parse ``EL_AR`` or ``EL_{AR,EL}`` style labels."""
    if isinstance(text, LanguageArrangement):
        return text
    m = _ARR_RE.match(str(text).upper())
    if not m:
        raise TaskSamplingError(f"cannot parse language arrangement {text!r}")

    def langs(part):
        part = part.strip("{}")
        return tuple(sorted(x.strip() for x in part.split(",") if x.strip()))
    return LanguageArrangement(langs(m.group(1)), langs(m.group(2)))


def _fam(*labels):
    return tuple(parse_arrangement(x) for x in labels)


RETRIEVAL_ROSTER: dict[TransferMode, list[tuple[LanguageArrangement, ...]]] = {
    TransferMode.MONO_MONO: [_fam("EL_EL", "AR_AR"), _fam("HI_HI", "DE_DE")],
    TransferMode.MONO_BI: [_fam("EL_EL", "EL_AR"), _fam("HI_HI", "HI_DE")],
    TransferMode.MONO_MULTI: [_fam("EL_EL", "EL_{AR,EL}"), _fam("HI_HI", "HI_{DE,HI}")],
    TransferMode.BI_MULTI: [_fam("EL_AR", "EL_{AR,EL}"), _fam("HI_DE", "HI_{DE,HI}")],
    TransferMode.MONO_BI_MULTI: [_fam("EL_EL", "EL_AR", "EL_{AR,EL,HI}"),
                                 _fam("HI_HI", "HI_DE", "HI_{AR,DE,HI}")],
}

_STS_MONO = ("EN_EN", "AR_AR", "ES_ES")
_STS_BI = ("AR_EN", "ES_EN", "TR_EN")
PAIR_ROSTER: dict[TransferMode, list[tuple[LanguageArrangement, ...]]] = {
    # parentheses: a pair used for support may not reappear as query
    TransferMode.MONO_MONO: [_fam(a, b) for a in _STS_MONO for b in _STS_MONO if a != b],
    # brackets: non-exclusive
    TransferMode.MONO_BI: [_fam(a, b) for a in _STS_MONO for b in _STS_BI],
    TransferMode.MONO_BI_MULTI: [_fam("EN_EN", "AR_EN", "EN_{AR,EN,ES}"),
                                 _fam("AR_AR", "AR_ES", "AR_{AR,EN,ES}"),
                                 _fam("ES_ES", "ES_AR", "ES_{AR,EN,ES}")],
}

SHAPES = {
    TransferMode.MONO_MONO: ("mono", "mono"),
    TransferMode.MONO_BI: ("mono", "bi"),
    TransferMode.MONO_MULTI: ("mono", "multi"),
    TransferMode.BI_MULTI: ("bi", "multi"),
    TransferMode.MONO_BI_MULTI: ("mono", "bi", "multi"),
}


def parse_roster(spec: dict) -> dict[TransferMode, list[tuple[LanguageArrangement, ...]]]:
    """Roster from config: ``{"mono-bi": [["EL_EL", "EL_AR"], ...], ...}``."""
    out = {}
    for mode, fams in spec.items():
        m = TransferMode.parse(mode)
        out[m] = [tuple(parse_arrangement(x) for x in fam) for fam in fams]
        for fam in out[m]:
            if m in SHAPES and len(fam) != len(SHAPES[m]):
                raise TaskSamplingError(f"{m.value} families need {len(SHAPES[m])} arrangements")
    return out


def default_roster(corpus_kind: str):
    return PAIR_ROSTER if corpus_kind == "pairs" else RETRIEVAL_ROSTER


@dataclass(frozen=True)
class TaskSet:
    arrangement: LanguageArrangement
    items: tuple[tuple[str, str, str], ...]

    def __len__(self):
        return len(self.items)

    @property
    def keys(self) -> list[str]:
        return [k for k, _, _ in self.items]

    def to_json(self) -> dict:
        return {"arrangement": self.arrangement.label, "items": [list(i) for i in self.items]}

    @classmethod
    def from_json(cls, obj) -> "TaskSet":
        return cls(parse_arrangement(obj["arrangement"]),
                   tuple(tuple(i) for i in obj["items"]))


@dataclass(frozen=True)
class MetaTask:
    index: int
    phase: str
    mode: TransferMode              # concrete shape of this task
    support: TaskSet
    query: TaskSet
    support2: TaskSet | None = None
    dataset_mode: TransferMode | None = None
    family: int = 0

    def sets(self) -> dict[str, TaskSet]:
        out = {"support": self.support}
        if self.support2 is not None:
            out["support2"] = self.support2
        out["query"] = self.query
        return out

    def to_json(self) -> dict:
        return {"index": self.index, "phase": self.phase, "mode": self.mode.value,
                "dataset_mode": (self.dataset_mode or self.mode).value, "family": self.family,
                "sets": {k: v.to_json() for k, v in self.sets().items()}}

    @classmethod
    def from_json(cls, obj) -> "MetaTask":
        sets = obj["sets"]
        return cls(obj["index"], obj["phase"], TransferMode.parse(obj["mode"]),
                   TaskSet.from_json(sets["support"]), TaskSet.from_json(sets["query"]),
                   TaskSet.from_json(sets["support2"]) if "support2" in sets else None,
                   TransferMode.parse(obj["dataset_mode"]), obj.get("family", 0))


@dataclass
class MetaDataset:
    phase: str
    tasks: list[MetaTask]
    source_split: str
    mode: TransferMode | None = None

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def dumps(self) -> str:
        return "".join(json.dumps(t.to_json(), sort_keys=True, separators=(",", ":")) + "\n"
                       for t in self.tasks)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetaDataset":
        tasks = [MetaTask.from_json(json.loads(ln))
                 for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        phase = tasks[0].phase if tasks else "meta-train"
        mode = tasks[0].dataset_mode if tasks else None
        return cls(phase, tasks, PHASE_SPLIT[phase], mode)


# --------------------------------------------------------------------------
# item eligibility and embedding

def _item_ok(corpus, key, lq, lr) -> bool:
    if corpus.kind == "pairs":
        return corpus.has(key, f"{lq}-{lr}")
    return corpus.has(key, lq) and corpus.has(key, lr)


def eligible_keys(corpus, arrangement: LanguageArrangement) -> list[str]:
    """Keys usable for every (query, candidate) language combination of the set."""
    cache = corpus.__dict__.setdefault("_eligible_cache", {})
    if arrangement in cache:
        return cache[arrangement]
    out = []
    for key in corpus.item_keys():
        if all(_item_ok(corpus, key, lq, lr)
               for lq in arrangement.query_langs for lr in arrangement.candidate_langs):
            out.append(key)
    cache[arrangement] = out
    return out


def item_question_tokens(corpus, item) -> tuple[int, ...]:
    key, lq, lr = item
    if corpus.kind == "pairs":
        return corpus.get(key, f"{lq}-{lr}").sentence1
    return corpus.get(key, lq).question


class QuestionEmbedder:
    """Frozen-parameter question (or sentence-1) embeddings with a cache."""

    def __init__(self, corpus, params: ParameterVector, cfg: EncoderConfig):
        self.corpus, self.params, self.cfg = corpus, params, cfg
        self._cache: dict[tuple, np.ndarray] = {}

    def __call__(self, items) -> np.ndarray:
        missing = [it for it in dict.fromkeys(self._key(i) for i in items) if it not in self._cache]
        if missing:
            maxlen = self.cfg.max_sentence_len if self.corpus.kind == "pairs" else self.cfg.max_question_len
            toks = [item_question_tokens(self.corpus, (k, lq, lr)) for k, lq, lr in missing]
            batch = TokenBatch.from_sequences(toks, maxlen)
            batch.validate(self.cfg.vocab_size)
            emb, _ = forward(self.params.values, batch, self.cfg)
            for m, e in zip(missing, emb):
                self._cache[m] = e
        return np.stack([self._cache[self._key(i)] for i in items])

    def _key(self, item):
        key, lq, lr = item
        # retrieval questions depend only on the query language
        return (key, lq, lr if self.corpus.kind == "pairs" else None)


def select_queries(support: Sequence[tuple], candidate_pool: Sequence[tuple], sampling: str,
                   q: int, rng: np.random.Generator, embedder: QuestionEmbedder | None = None):
    """Pick ``q`` query items from ``candidate_pool``.

    ``random`` samples uniformly without replacement; ``similar`` keeps the
    items whose question embedding is most cosine-similar to the mean
    support-question embedding (stable pool order breaks ties).
    """
    if len(candidate_pool) < q:
        raise TaskSamplingError(f"query pool has {len(candidate_pool)} items, need {q}")
    support_keys = {s[0] for s in support}
    if any(c[0] in support_keys for c in candidate_pool):
        raise TaskSamplingError("query candidate pool overlaps the support set")
    if sampling == "random":
        idx = rng.choice(len(candidate_pool), size=q, replace=False)
        return [tuple(candidate_pool[int(i)]) for i in idx]
    if sampling != "similar":
        raise TaskSamplingError(f"unknown query sampling {sampling!r}")
    if embedder is None:
        raise TaskSamplingError("similar query sampling needs base parameters")
    centre = embedder(list(support)).mean(axis=0)
    pool = embedder(list(candidate_pool))
    cn = np.linalg.norm(centre)
    pn = np.linalg.norm(pool, axis=1)
    cos = (pool @ centre) / np.where(pn * cn == 0, 1.0, pn * cn)
    order = np.argsort(-cos, kind="stable")[:q]
    return [tuple(candidate_pool[int(i)]) for i in order]


def _assign_candidates(keys, arr: LanguageArrangement, rng) -> tuple[tuple[str, str, str], ...]:
    lq = arr.query_langs
    lr = arr.candidate_langs
    off_q = int(rng.integers(len(lq)))
    off_r = int(rng.integers(len(lr)))
    return tuple((k, lq[(off_q + i) % len(lq)], lr[(off_r + i) % len(lr)])
                 for i, k in enumerate(keys))


def sample_meta_task(corpus, mode, phase: str = "meta-train", k: int = 8, q: int = 4,
                     query_sampling: str = "random", rng: np.random.Generator | None = None,
                     embedder: QuestionEmbedder | None = None, roster=None,
                     index: int = 0, dataset_mode=None) -> MetaTask:
    """Draw one episode whose sets follow the mode's arrangement roster."""
    rng = rng if rng is not None else np.random.default_rng(0)
    dataset_mode = TransferMode.parse(dataset_mode or mode)
    shape = concrete_mode(mode, phase, index)
    roster = roster if roster is not None else default_roster(corpus.kind)
    fams = roster.get(shape)
    if not fams:
        raise TaskSamplingError(f"transfer mode {shape.value} not applicable to this corpus")
    fam_idx = int(rng.integers(len(fams)))
    fam = fams[fam_idx]
    used: set[str] = set()
    sets: list[TaskSet] = []
    for pos, arr in enumerate(fam):
        is_query = pos == len(fam) - 1
        pool = [key for key in eligible_keys(corpus, arr) if key not in used]
        need = q if is_query else k
        if len(pool) < need:
            raise TaskSamplingError(
                f"arrangement {arr.label}: {len(pool)} unused items available, need {need}")
        if is_query:
            support_items = sets[-1].items
            cand = [(key, arr.query_langs[0], arr.candidate_langs[0]) for key in pool]
            chosen = select_queries(support_items, cand, query_sampling, q, rng, embedder)
            keys = [c[0] for c in chosen]
        else:
            keys = [pool[int(i)] for i in rng.choice(len(pool), size=k, replace=False)]
        used.update(keys)
        sets.append(TaskSet(arr, _assign_candidates(keys, arr, rng)))
    if len(sets) == 3:
        return MetaTask(index, phase, shape, sets[0], sets[2], sets[1], dataset_mode, fam_idx)
    return MetaTask(index, phase, shape, sets[0], sets[1], None, dataset_mode, fam_idx)


def build_meta_dataset(corpus, mode, counts: Sequence[int] = DEFAULT_COUNTS, k: int = 8,
                       q: int = 4, query_sampling: str = "random",
                       base_params: ParameterVector | None = None,
                       cfg: EncoderConfig | None = None, seed: int = 0,
                       roster=None, phases: Sequence[str] = PHASES) -> dict[str, MetaDataset]:
    """Meta-train/valid/test datasets drawn from the train/dev/test splits."""
    mode = TransferMode.parse(mode)
    if len(counts) != 3:
        raise TaskSamplingError("counts must give (meta-train, meta-valid, meta-test) sizes")
    out = {}
    for phase in phases:
        p_idx = PHASES.index(phase)
        split = corpus.split(PHASE_SPLIT[phase])
        embedder = None
        if query_sampling == "similar":
            if base_params is None or cfg is None:
                raise TaskSamplingError("similar query sampling needs base parameters")
            embedder = QuestionEmbedder(split, base_params, cfg)
        tasks = []
        for i in range(int(counts[p_idx])):
            rng = np.random.default_rng([seed, p_idx, i])
            tasks.append(sample_meta_task(split, mode, phase, k, q, query_sampling, rng,
                                          embedder, roster, index=i, dataset_mode=mode))
        out[phase] = MetaDataset(phase, tasks, PHASE_SPLIT[phase], mode)
    return out


# --------------------------------------------------------------------------
# conformance predicates

def _set_violations(name, ts: TaskSet, expected_variant: str | None) -> list[str]:
    errs = []
    arr = ts.arrangement
    if expected_variant and arr.variant != expected_variant:
        errs.append(f"{name}: arrangement {arr.label} is {arr.variant}, expected {expected_variant}")
    for key, lq, lr in ts.items:
        if lq not in arr.query_langs or lr not in arr.candidate_langs:
            errs.append(f"{name}: item {key} ({lq}_{lr}) outside {arr.label}")
    if arr.variant == "mono" and any(lq != lr for _, lq, lr in ts.items):
        errs.append(f"{name}: monolingual set has a cross-lingual item")
    if arr.variant == "bi" and any(lq == lr for _, lq, lr in ts.items):
        errs.append(f"{name}: bilingual set has a same-language item")
    if arr.variant == "multi":
        realised = {lr for _, _, lr in ts.items}
        if len(ts) >= len(arr.candidate_langs) and realised != set(arr.candidate_langs):
            errs.append(f"{name}: multilingual set realises only {sorted(realised)}")
    return errs


def task_violations(task: MetaTask, k: int | None = None, q: int | None = None,
                    roster=None) -> list[str]:
    """Every way ``task`` breaks its mode's arrangement pattern (empty if none)."""
    errs = []
    shape = SHAPES.get(task.mode)
    if shape is None:
        return [f"task mode {task.mode.value} is not a concrete shape"]
    ds_mode = task.dataset_mode or task.mode
    if ds_mode is TransferMode.TRANS and task.mode is not TRANS_PHASES[task.phase]:
        errs.append(f"trans task in {task.phase} has shape {task.mode.value}")
    if ds_mode is TransferMode.MIXT and task.mode is not MIXT_CYCLE[task.index % 4]:
        errs.append(f"mixt task {task.index} has shape {task.mode.value}")
    has_s2 = task.support2 is not None
    if has_s2 != (task.mode is TransferMode.MONO_BI_MULTI):
        errs.append("second support set present iff mode is mono-bi-multi")
    if k is not None and len(task.support) != k:
        errs.append(f"support has {len(task.support)} items, expected {k}")
    if k is not None and has_s2 and len(task.support2) != k:
        errs.append(f"support2 has {len(task.support2)} items, expected {k}")
    if q is not None and len(task.query) != q:
        errs.append(f"query has {len(task.query)} items, expected {q}")
    sets = list(task.sets().items())
    for (name, ts), variant in zip(sets, shape):
        errs += _set_violations(name, ts, variant)
    if task.mode is TransferMode.MONO_MONO and task.support.arrangement == task.query.arrangement:
        errs.append("mono-mono support and query reuse one language pair")
    if task.mode is TransferMode.MONO_BI_MULTI and len(task.query.arrangement.candidate_langs) < 2:
        errs.append("mono-bi-multi query needs at least two candidate languages")
    if roster is not None:
        fam = tuple(ts.arrangement for _, ts in sets)
        if fam not in roster.get(task.mode, []):
            errs.append(f"arrangement {[a.label for a in fam]} not in the {task.mode.value} roster")
    seen: dict[str, str] = {}
    for name, ts in sets:
        for key in ts.keys:
            if key in seen and seen[key] != name:
                errs.append(f"item {key} leaks between {seen[key]} and {name}")
            seen.setdefault(key, name)
    return errs
