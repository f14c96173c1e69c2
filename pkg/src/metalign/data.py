"""Corpus records, line-delimited JSON loaders and the synthetic generator.

File layout (UTF-8, one JSON object per line)::

    {"schema": "retrieval", "version": 1, "vocab": "vocab.txt"}
    {"question_id": "q1", "language": "AR", "split": "train",
     "question": [4, 9], "answer": [5, 7], "context": [11]}

Pair corpora use ``"schema": "pairs"`` and records with ``pair_id``,
``language_pair`` ("AR-EN"), ``sentence1``, ``sentence2`` and ``gold``
(raw 1..5 scale). Vocabulary sidecars hold one token per line; the id of
a token is its zero-based line number.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
SCHEMA_VERSION = 1

ISO_639_1 = frozenset("""
AA AB AE AF AK AM AN AR AS AV AY AZ BA BE BG BH BI BM BN BO BR BS CA CE CH CO
CR CS CU CV CY DA DE DV DZ EE EL EN EO ES ET EU FA FF FI FJ FO FR FY GA GD GL
GN GU GV HA HE HI HO HR HT HU HY HZ IA ID IE IG II IK IO IS IT IU JA JV KA KG
KI KJ KK KL KM KN KO KR KS KU KV KW KY LA LB LG LI LN LO LT LU LV MG MH MI MK
ML MN MR MS MT MY NA NB ND NE NG NL NN NO NR NV NY OC OJ OM OR OS PA PI PL PS
PT QU RM RN RO RU RW SA SC SD SE SG SI SK SL SM SN SO SQ SR SS ST SU SV SW TA
TE TG TH TI TK TL TN TO TR TS TT TW TY UG UK UR UZ VE VI VO WA WO XH YI YO ZA
ZH ZU""".split())


class CorpusError(ValueError):
    """Schema or content violation, located by file, line and field."""

    def __init__(self, message, path=None, line=None, field_name=None):
        where = ":".join(str(x) for x in (path, line) if x is not None)
        loc = f"{where}: " if where else ""
        fld = f"[{field_name}] " if field_name else ""
        super().__init__(f"{loc}{fld}{message}")
        self.path, self.line, self.field = path, line, field_name


@dataclass(frozen=True)
class RetrievalRecord:
    question_id: str
    language: str
    split: str
    question: tuple[int, ...]
    answer: tuple[int, ...]
    context: tuple[int, ...] = ()
    answer_id: str | None = None

    @property
    def candidate_key(self) -> str:
        """Records sharing a key in one language are a single candidate."""
        return self.answer_id if self.answer_id is not None else self.question_id

    @property
    def candidate(self) -> tuple[int, ...]:
        return self.answer + self.context

    def to_json(self) -> dict:
        out = {"question_id": self.question_id, "language": self.language,
               "split": self.split, "question": list(self.question),
               "answer": list(self.answer), "context": list(self.context)}
        if self.answer_id is not None:
            out["answer_id"] = self.answer_id
        return out


@dataclass(frozen=True)
class SentencePairRecord:
    pair_id: str
    language_pair: str
    split: str
    sentence1: tuple[int, ...]
    sentence2: tuple[int, ...]
    gold: float

    @property
    def lang1(self) -> str:
        return self.language_pair.split("-")[0]

    @property
    def lang2(self) -> str:
        return self.language_pair.split("-")[1]

    def to_json(self) -> dict:
        return {"pair_id": self.pair_id, "language_pair": self.language_pair,
                "split": self.split, "sentence1": list(self.sentence1),
                "sentence2": list(self.sentence2), "gold": self.gold}


class RetrievalCorpus:
    """Language-tagged question/answer records with per-split lookups."""

    kind = "retrieval"

    def __init__(self, records: Iterable[RetrievalRecord], vocab: Sequence[str] | None = None):
        self.records = list(records)
        self.vocab = list(vocab) if vocab is not None else None
        self._by_key = {(r.question_id, r.language): r for r in self.records}
        if len(self._by_key) != len(self.records):
            raise CorpusError("duplicate (question_id, language) records")

    def __len__(self):
        return len(self.records)

    @property
    def languages(self) -> list[str]:
        return sorted({r.language for r in self.records})

    def split(self, name: str) -> "RetrievalCorpus":
        return RetrievalCorpus([r for r in self.records if r.split == name], self.vocab)

    def with_splits(self, assignment: dict[str, str]) -> "RetrievalCorpus":
        """Reassign splits by question id (used for cross-validation folds)."""
        from dataclasses import replace
        return RetrievalCorpus([replace(r, split=assignment[r.question_id])
                                for r in self.records], self.vocab)

    def get(self, question_id: str, language: str) -> RetrievalRecord:
        try:
            return self._by_key[(question_id, language)]
        except KeyError:
            raise CorpusError(f"no record for question {question_id!r} in {language}") from None

    def has(self, question_id: str, language: str) -> bool:
        return (question_id, language) in self._by_key

    def question_ids(self, languages: Iterable[str] = ()) -> list[str]:
        """Ids present in every requested language, in first-seen order."""
        langs = set(languages)
        seen: dict[str, set] = {}
        for r in self.records:
            seen.setdefault(r.question_id, set()).add(r.language)
        return [q for q, ls in seen.items() if langs <= ls]

    def by_language(self, language: str) -> list[RetrievalRecord]:
        return [r for r in self.records if r.language == language]

    def item_keys(self) -> list[str]:
        return list(dict.fromkeys(r.question_id for r in self.records))

    def report(self) -> dict:
        counts = Counter((r.split, r.language) for r in self.records)
        cands = defaultdict(set)
        for r in self.records:
            cands[(r.split, r.language)].add(r.candidate_key)
        return {f"{s}/{l}": {"questions": n, "candidates": len(cands[(s, l)])}
                for (s, l), n in sorted(counts.items())}


class PairCorpus:
    """Scored sentence pairs keyed by (pair_id, language_pair)."""

    kind = "pairs"

    def __init__(self, records: Iterable[SentencePairRecord], vocab: Sequence[str] | None = None):
        self.records = list(records)
        self.vocab = list(vocab) if vocab is not None else None
        self._by_key = {(r.pair_id, r.language_pair): r for r in self.records}
        if len(self._by_key) != len(self.records):
            raise CorpusError("duplicate (pair_id, language_pair) records")

    def __len__(self):
        return len(self.records)

    @property
    def languages(self) -> list[str]:
        return sorted({r.language_pair for r in self.records})

    @property
    def language_pairs(self) -> list[str]:
        return self.languages

    def split(self, name: str) -> "PairCorpus":
        return PairCorpus([r for r in self.records if r.split == name], self.vocab)

    def with_splits(self, assignment: dict[str, str]) -> "PairCorpus":
        from dataclasses import replace
        return PairCorpus([replace(r, split=assignment[r.pair_id]) for r in self.records],
                          self.vocab)

    def get(self, pair_id: str, language_pair: str) -> SentencePairRecord:
        try:
            return self._by_key[(pair_id, language_pair)]
        except KeyError:
            raise CorpusError(f"no pair {pair_id!r} for {language_pair}") from None

    def has(self, pair_id: str, language_pair: str) -> bool:
        return (pair_id, language_pair) in self._by_key

    def question_ids(self, language_pairs: Iterable[str] = ()) -> list[str]:
        want = set(language_pairs)
        seen: dict[str, set] = {}
        for r in self.records:
            seen.setdefault(r.pair_id, set()).add(r.language_pair)
        return [p for p, ls in seen.items() if want <= ls]

    def by_language_pair(self, language_pair: str) -> list[SentencePairRecord]:
        return [r for r in self.records if r.language_pair == language_pair]

    def item_keys(self) -> list[str]:
        return list(dict.fromkeys(r.pair_id for r in self.records))

    def report(self) -> dict:
        counts = Counter((r.split, r.language_pair) for r in self.records)
        return {f"{s}/{lp}": {"pairs": n} for (s, lp), n in sorted(counts.items())}


# --------------------------------------------------------------------------
# loading and writing

_RETRIEVAL_FIELDS = {"question_id": str, "language": str, "split": str,
                     "question": list, "answer": list}
_RETRIEVAL_OPTIONAL = {"context": list, "answer_id": str}
_PAIR_FIELDS = {"pair_id": str, "language_pair": str, "split": str,
                "sentence1": list, "sentence2": list}
_PAIR_OPTIONAL = {"gold": (int, float, type(None))}


def read_vocab(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def write_vocab(path, tokens: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{t}\n" for t in tokens), encoding="utf-8")


def _check_lang(code, path, line, field_name):
    if code not in ISO_639_1:
        raise CorpusError(f"unknown language code {code!r}", path, line, field_name)


def _check_tokens(value, path, line, field_name, vocab_size):
    if not all(isinstance(t, int) and not isinstance(t, bool) for t in value):
        raise CorpusError("token ids must be integers", path, line, field_name)
    if any(t < 0 for t in value) or (vocab_size is not None and any(t >= vocab_size for t in value)):
        raise CorpusError(f"token id outside vocabulary of size {vocab_size}", path, line, field_name)
    return tuple(value)


def _validate_fields(obj, required, optional, path, line):
    for name, typ in required.items():
        if name not in obj:
            raise CorpusError("missing required field", path, line, name)
        if not isinstance(obj[name], typ):
            raise CorpusError(f"expected {typ.__name__}", path, line, name)
    for name in obj:
        if name in required:
            continue
        if name not in optional:
            raise CorpusError("unexpected field for this record type", path, line, name)
        if not isinstance(obj[name], optional[name]):
            raise CorpusError("wrong type", path, line, name)
    if obj["split"] not in SPLITS:
        raise CorpusError(f"split must be one of {SPLITS}", path, line, "split")


def _read_lines(path, schema):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    if not lines:
        log.warning("%s: empty corpus file", path)
        return None, []
    first_no, first = lines[0]
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"invalid JSON: {exc.msg}", path, first_no) from None
    if header.get("schema") != schema:
        raise CorpusError(f"header must declare schema {schema!r}", path, first_no, "schema")
    if header.get("version") != SCHEMA_VERSION:
        raise CorpusError(f"unsupported schema version {header.get('version')!r}",
                          path, first_no, "version")
    vocab = None
    if header.get("vocab"):
        vpath = path.parent / header["vocab"]
        if not vpath.exists():
            raise CorpusError(f"vocabulary sidecar {vpath} not found", path, first_no, "vocab")
        vocab = read_vocab(vpath)
    out = []
    for no, ln in lines[1:]:
        try:
            obj = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"invalid JSON: {exc.msg}", path, no) from None
        if not isinstance(obj, dict):
            raise CorpusError("record must be a JSON object", path, no)
        out.append((no, obj))
    return vocab, out


def load_retrieval_corpus(path) -> RetrievalCorpus:
    vocab, rows = _read_lines(path, "retrieval")
    V = len(vocab) if vocab is not None else None
    records = []
    seen = set()
    for no, obj in rows:
        _validate_fields(obj, _RETRIEVAL_FIELDS, _RETRIEVAL_OPTIONAL, path, no)
        _check_lang(obj["language"], path, no, "language")
        key = (obj["question_id"], obj["language"])
        if key in seen:
            raise CorpusError("duplicate question_id for this language", path, no, "question_id")
        seen.add(key)
        q = _check_tokens(obj["question"], path, no, "question", V)
        a = _check_tokens(obj["answer"], path, no, "answer", V)
        c = _check_tokens(obj.get("context", []), path, no, "context", V)
        if not q:
            raise CorpusError("question has no tokens", path, no, "question")
        if not a and not c:
            raise CorpusError("candidate (answer + context) has no tokens", path, no, "answer")
        records.append(RetrievalRecord(obj["question_id"], obj["language"], obj["split"],
                                       q, a, c, obj.get("answer_id")))
    corpus = RetrievalCorpus(records, vocab)
    for key, n in corpus.report().items():
        log.info("%s: %s questions=%d candidates=%d", path, key, n["questions"], n["candidates"])
    return corpus


def load_pair_corpus(path) -> PairCorpus:
    vocab, rows = _read_lines(path, "pairs")
    V = len(vocab) if vocab is not None else None
    records = []
    dropped = Counter()
    for no, obj in rows:
        _validate_fields(obj, _PAIR_FIELDS, _PAIR_OPTIONAL, path, no)
        lp = obj["language_pair"]
        parts = lp.split("-")
        if len(parts) != 2:
            raise CorpusError("language_pair must look like 'AR-EN'", path, no, "language_pair")
        for code in parts:
            _check_lang(code, path, no, "language_pair")
        gold = obj.get("gold")
        if gold is None:
            dropped[lp] += 1
            continue
        if not 1.0 <= float(gold) <= 5.0:
            raise CorpusError(f"gold score {gold} outside [1, 5]", path, no, "gold")
        s1 = _check_tokens(obj["sentence1"], path, no, "sentence1", V)
        s2 = _check_tokens(obj["sentence2"], path, no, "sentence2", V)
        if not s1 or not s2:
            raise CorpusError("empty sentence", path, no, "sentence1" if not s1 else "sentence2")
        records.append(SentencePairRecord(obj["pair_id"], lp, obj["split"], s1, s2, float(gold)))
    for lp, n in dropped.items():
        log.warning("%s: %s has %d pairs without a gold score; only scored pairs retained",
                    path, lp, n)
    return PairCorpus(records, vocab)


def load_corpus(path):
    """Dispatch on the header's schema field."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    schema = json.loads(first).get("schema") if first.strip() else "retrieval"
    if schema == "pairs":
        return load_pair_corpus(path)
    return load_retrieval_corpus(path)


def write_corpus(path, corpus, vocab_name: str | None = "vocab.txt") -> None:
    path = Path(path)
    header = {"schema": corpus.kind, "version": SCHEMA_VERSION}
    if vocab_name and corpus.vocab is not None:
        header["vocab"] = vocab_name
        write_vocab(path.parent / vocab_name, corpus.vocab)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in corpus.records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# synthetic multilingual parallel corpus

@dataclass
class SyntheticSpec:
    concepts: int = 50
    languages: tuple[str, ...] = ("AR", "DE", "EL", "HI")
    tokens_per_concept: int = 2
    questions_per_language: int = 200
    question_concepts: int = 4
    answer_concepts: int = 4
    context_concepts: int = 2
    rho_pos: float = 1.0
    rho_neg: float = 0.5
    fillers_per_language: int = 4
    fillers_per_sentence: int = 1
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    pairs_per_language_pair: int = 60
    pair_languages: tuple[str, ...] | None = None
    alphabets: dict[str, str] | None = None
    seed: int = 7

    def __post_init__(self):
        self.languages = tuple(self.languages)
        self.split_fractions = tuple(self.split_fractions)
        if self.pair_languages is not None:
            self.pair_languages = tuple(self.pair_languages)

    def validate(self) -> None:
        if self.concepts < 1 or self.questions_per_language < 1:
            raise CorpusError("concept and question counts must be positive")
        if not self.languages:
            raise CorpusError("at least one language required")
        for code in self.languages:
            _check_lang(code, None, None, "languages")
        if len(set(self.languages)) != len(self.languages):
            raise CorpusError("languages listed twice would share one alphabet (overlap)")
        prefixes = [self.alphabet(l) for l in self.languages]
        if len(set(prefixes)) != len(prefixes):
            raise CorpusError("per-language alphabets overlap")
        if not self.rho_pos > self.rho_neg >= 0 or self.rho_pos > 1:
            raise CorpusError("need 1 >= rho_pos > rho_neg >= 0")
        if self.question_concepts > self.concepts:
            raise CorpusError("question_concepts exceeds concept count")
        if self.tokens_per_concept < 1:
            raise CorpusError("tokens_per_concept must be positive")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise CorpusError("split_fractions must be three values summing to 1")
        for lp in self.pair_languages or ():
            parts = lp.split("-")
            if len(parts) != 2 or any(p not in self.languages for p in parts):
                raise CorpusError(f"pair language {lp!r} not over the spec languages")

    def alphabet(self, lang: str) -> str:
        return (self.alphabets or {}).get(lang, lang.lower())

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise CorpusError(f"unknown synthetic spec keys: {sorted(extra)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class SyntheticCorpus:
    retrieval: RetrievalCorpus
    pairs: PairCorpus
    vocab: list[str]
    token_concept: np.ndarray          # token id -> concept id (-1 for fillers/pad)
    question_concepts: dict[str, list[int]] = field(default_factory=dict)
    candidate_concepts: dict[str, list[int]] = field(default_factory=dict)

    def concept_bag(self, tokens: Sequence[int]) -> Counter:
        c = self.token_concept[np.asarray(tokens, dtype=np.int64)]
        return Counter(int(x) for x in c if x >= 0)


def _build_vocab(spec: SyntheticSpec):
    vocab = ["<pad>"]
    concept_tok: dict[str, np.ndarray] = {}
    filler_tok: dict[str, list[int]] = {}
    token_concept = [-1]
    for lang in spec.languages:
        pre = spec.alphabet(lang)
        ids = np.zeros((spec.concepts, spec.tokens_per_concept), dtype=np.int64)
        for c in range(spec.concepts):
            for t in range(spec.tokens_per_concept):
                ids[c, t] = len(vocab)
                vocab.append(f"{pre}_c{c}_{t}")
                token_concept.append(c)
        concept_tok[lang] = ids
        filler_tok[lang] = []
        for f in range(spec.fillers_per_language):
            filler_tok[lang].append(len(vocab))
            vocab.append(f"{pre}_f{f}")
            token_concept.append(-1)
    if len(set(vocab)) != len(vocab):
        raise CorpusError("per-language alphabets overlap")
    return vocab, concept_tok, filler_tok, np.array(token_concept, dtype=np.int64)


def _realize(concepts, lang, rng, spec, concept_tok, filler_tok):
    order = rng.permutation(len(concepts))
    toks = [int(concept_tok[lang][concepts[i], rng.integers(spec.tokens_per_concept)])
            for i in order]
    if filler_tok[lang] and spec.fillers_per_sentence:
        for _ in range(spec.fillers_per_sentence):
            pos = int(rng.integers(len(toks) + 1))
            toks.insert(pos, int(rng.choice(filler_tok[lang])))
    return tuple(toks)


def _assign_splits(n: int, fractions, rng) -> list[str]:
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    labels = ["train"] * n_train + ["dev"] * n_dev + ["test"] * (n - n_train - n_dev)
    perm = rng.permutation(n)
    return [labels[int(i)] for i in np.argsort(perm)]


def _sample_questions(spec: SyntheticSpec, rng):
    C, m = spec.concepts, spec.question_concepts
    k_pos = math.ceil(spec.rho_pos * m - 1e-12)
    bound = math.floor(spec.rho_neg * m + 1e-12)
    n_fresh = max(spec.answer_concepts - k_pos, 0)
    N = spec.questions_per_language
    Qm = np.zeros((N, C), dtype=np.int64)
    Cm = np.zeros((N, C), dtype=np.int64)
    qs, cs = [], []
    for j in range(N):
        for _attempt in range(2000):
            q = rng.choice(C, size=m, replace=False)
            rest = np.setdiff1d(np.arange(C), q)
            need = n_fresh + spec.context_concepts
            if need > rest.size:
                raise CorpusError("not enough concepts for answer and context")
            extra = rng.choice(rest, size=need, replace=False)
            keep = rng.choice(q, size=k_pos, replace=False)
            cand = np.concatenate([keep, extra])
            qv = np.zeros(C, dtype=np.int64)
            qv[q] = 1
            cv = np.zeros(C, dtype=np.int64)
            cv[cand] = 1
            if j == 0 or (np.all(Qm[:j] @ cv <= bound) and np.all(Cm[:j] @ qv <= bound)):
                break
        else:
            raise CorpusError(
                f"could not place question {j}: rho_neg={spec.rho_neg} is infeasible for "
                f"{N} questions over {C} concepts")
        Qm[j], Cm[j] = qv, cv
        qs.append([int(x) for x in q])
        cs.append(([int(x) for x in keep] + [int(x) for x in extra[:n_fresh]],
                   [int(x) for x in extra[n_fresh:]]))
    return qs, cs


def generate_synthetic_corpus(spec: SyntheticSpec) -> SyntheticCorpus:
    """Parallel retrieval corpus (plus a scored-pair variant) from concept bags.

    Every question realises a concept set in each language's own alphabet;
    its answer keeps at least ``rho_pos`` of those concepts while every
    other question's candidate shares at most ``rho_neg`` of them.
    """
    spec.validate()
    vocab, concept_tok, filler_tok, token_concept = _build_vocab(spec)
    rng = np.random.default_rng([spec.seed, 0])
    qs, cs = _sample_questions(spec, rng)
    N = spec.questions_per_language
    splits = _assign_splits(N, spec.split_fractions, np.random.default_rng([spec.seed, 1]))

    records = []
    q_meta, c_meta = {}, {}
    for j in range(N):
        qid = f"q{j:05d}"
        q_meta[qid] = qs[j]
        c_meta[qid] = cs[j][0] + cs[j][1]
        for li, lang in enumerate(spec.languages):
            r = np.random.default_rng([spec.seed, 2, j, li])
            records.append(RetrievalRecord(
                qid, lang, splits[j],
                _realize(qs[j], lang, r, spec, concept_tok, filler_tok),
                _realize(cs[j][0], lang, r, spec, concept_tok, filler_tok),
                _realize(cs[j][1], lang, r, spec, concept_tok, filler_tok) if cs[j][1] else ()))

    pair_langs = spec.pair_languages or tuple(f"{a}-{b}" for a in spec.languages
                                              for b in spec.languages)
    P = spec.pairs_per_language_pair
    m = spec.question_concepts
    prng = np.random.default_rng([spec.seed, 3])
    psplits = _assign_splits(P, spec.split_fractions, np.random.default_rng([spec.seed, 4]))
    pairs = []
    for p in range(P):
        s1 = prng.choice(spec.concepts, size=m, replace=False)
        shared = int(prng.integers(0, m + 1))
        fresh = prng.choice(np.setdiff1d(np.arange(spec.concepts), s1), size=m - shared,
                            replace=False)
        s2 = np.concatenate([prng.choice(s1, size=shared, replace=False), fresh])
        gold = 1.0 + 4.0 * shared / m
        for li, lp in enumerate(pair_langs):
            a, b = lp.split("-")
            r = np.random.default_rng([spec.seed, 5, p, li])
            pairs.append(SentencePairRecord(
                f"p{p:05d}", lp, psplits[p],
                _realize([int(x) for x in s1], a, r, spec, concept_tok, filler_tok),
                _realize([int(x) for x in s2], b, r, spec, concept_tok, filler_tok), gold))

    return SyntheticCorpus(RetrievalCorpus(records, vocab), PairCorpus(pairs, vocab), vocab,
                           token_concept, q_meta, c_meta)
