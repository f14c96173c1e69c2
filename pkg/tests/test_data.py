import json
import logging

import numpy as np
import pytest

from metalign.data import (CorpusError, PairCorpus, RetrievalCorpus, SentencePairRecord,
                           SyntheticSpec, generate_synthetic_corpus, load_corpus,
                           load_pair_corpus, load_retrieval_corpus, write_corpus)
from metalign.evaluation import average_precision_at_k, build_pool, rank_from_scores


def _write(path, header, rows):
    lines = [json.dumps(header)] + [json.dumps(r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def _rec(**kw):
    base = {"question_id": "q1", "language": "AR", "split": "train",
            "question": [1, 2], "answer": [3]}
    base.update(kw)
    return base


def test_retrieval_loader_happy_path(tmp_path):
    (tmp_path / "v.txt").write_text("\n".join(f"t{i}" for i in range(6)) + "\n")
    p = _write(tmp_path / "c.jsonl", {"schema": "retrieval", "version": 1, "vocab": "v.txt"},
               [_rec(), _rec(language="EL", context=[4, 5]), _rec(question_id="q2", split="dev")])
    c = load_retrieval_corpus(p)
    assert len(c) == 3 and c.vocab[5] == "t5"
    assert c.get("q1", "EL").candidate == (3, 4, 5)
    assert c.report()["train/AR"] == {"questions": 1, "candidates": 1}
    assert load_corpus(p).kind == "retrieval"


@pytest.mark.parametrize("row,field", [
    (_rec(gold=3.0), "gold"),
    (_rec(language="XX"), "language"),
    ({"question_id": "q1", "language": "AR", "split": "train", "answer": [1]}, "question"),
    (_rec(split="holdout"), "split"),
    (_rec(question_id="q9", question=[1, "a"]), "question"),
    (_rec(question_id="q9", answer=[99]), "answer"),
])
def test_retrieval_schema_errors_name_file_line_field(tmp_path, row, field):
    (tmp_path / "v.txt").write_text("a\nb\nc\nd\n")
    p = _write(tmp_path / "c.jsonl", {"schema": "retrieval", "version": 1, "vocab": "v.txt"},
               [_rec(), row])
    with pytest.raises(CorpusError) as ei:
        load_retrieval_corpus(p)
    err = ei.value
    assert err.line == 3 and err.field == field
    assert "c.jsonl:3" in str(err) and field in str(err)


def test_bad_header_and_json(tmp_path):
    p = _write(tmp_path / "c.jsonl", {"schema": "pairs", "version": 1}, [])
    with pytest.raises(CorpusError):
        load_retrieval_corpus(p)
    p.write_text('{"schema": "retrieval", "version": 1}\n{not json\n')
    with pytest.raises(CorpusError) as ei:
        load_retrieval_corpus(p)
    assert ei.value.line == 2


def test_empty_file_warns(tmp_path, caplog):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    with caplog.at_level(logging.WARNING):
        c = load_retrieval_corpus(p)
    assert len(c) == 0
    assert "empty" in caplog.text


def _pair(i, gold=3.0, lp="TR-EN"):
    return {"pair_id": f"p{i}", "language_pair": lp, "split": "train",
            "sentence1": [1], "sentence2": [2], "gold": gold}


def test_pair_gold_range(tmp_path):
    p = _write(tmp_path / "p.jsonl", {"schema": "pairs", "version": 1}, [_pair(0, 6.0)])
    with pytest.raises(CorpusError) as ei:
        load_pair_corpus(p)
    assert ei.value.field == "gold"


def test_unscored_pairs_dropped_with_warning(tmp_path, caplog):
    rows = [_pair(i, 2.5) for i in range(250)] + [_pair(i, None) for i in range(250, 500)]
    rows[300].pop("gold")
    p = _write(tmp_path / "p.jsonl", {"schema": "pairs", "version": 1}, rows)
    with caplog.at_level(logging.WARNING):
        c = load_pair_corpus(p)
    assert len(c) == 250
    assert [r.pair_id for r in c.records] == [f"p{i}" for i in range(250)]
    assert "TR-EN" in caplog.text


def test_round_trip(tmp_path, small_synth):
    for corpus, name in [(small_synth.retrieval, "r.jsonl"), (small_synth.pairs, "p.jsonl")]:
        write_corpus(tmp_path / name, corpus)
        back = load_corpus(tmp_path / name)
        assert type(back) is type(corpus)
        assert back.records == corpus.records and back.vocab == corpus.vocab


def test_synthetic_deterministic(tmp_path):
    a = generate_synthetic_corpus(SyntheticSpec())
    b = generate_synthetic_corpus(SyntheticSpec())
    assert a.retrieval.records == b.retrieval.records
    assert a.pairs.records == b.pairs.records
    write_corpus(tmp_path / "a.jsonl", a.retrieval)
    write_corpus(tmp_path / "b.jsonl", b.retrieval)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    c = generate_synthetic_corpus(SyntheticSpec(seed=8))
    assert c.retrieval.records != a.retrieval.records


def test_synthetic_shape(synth):
    r = synth.retrieval
    assert r.languages == ["AR", "DE", "EL", "HI"]
    assert len(r) == 4 * 200
    assert sum(1 for x in r.records if x.language == "AR" and x.split == "train") == 120


def test_parallel_records_share_concepts(synth):
    r = synth.retrieval
    for qid in r.question_ids()[:50]:
        bags = [synth.concept_bag(r.get(qid, l).question) for l in r.languages]
        assert all(b == bags[0] for b in bags)
        assert set(bags[0]) == set(synth.question_concepts[qid])


def test_alphabets_disjoint(synth):
    toks = {}
    for rec in synth.retrieval.records:
        for t in rec.question + rec.candidate:
            toks.setdefault(t, set()).add(rec.language)
    assert all(len(v) == 1 for v in toks.values())


def test_overlap_bounds_hold(synth):
    spec = SyntheticSpec()
    m = spec.question_concepts
    r = synth.retrieval
    ids = r.question_ids()
    for i, qi in enumerate(ids[:60]):
        q = set(synth.question_concepts[qi])
        for qj in ids:
            shared = len(q & set(synth.candidate_concepts[qj]))
            if qj == qi:
                assert shared >= spec.rho_pos * m
            else:
                assert shared <= spec.rho_neg * m


@pytest.mark.parametrize("bad", [
    dict(alphabets={"AR": "x", "DE": "x"}),
    dict(languages=("AR", "AR")),
    dict(rho_pos=0.5, rho_neg=0.5),
    dict(split_fractions=(0.5, 0.5, 0.5)),
    dict(languages=("AR", "QQ")),
])
def test_spec_validation(bad):
    with pytest.raises(CorpusError):
        generate_synthetic_corpus(SyntheticSpec(**bad))


def test_infeasible_spec_reports():
    with pytest.raises(CorpusError, match="infeasible"):
        generate_synthetic_corpus(SyntheticSpec(concepts=6, rho_neg=0.0, questions_per_language=50))


def test_concept_oracle_is_perfect_with_disjoint_overlaps():
    spec = SyntheticSpec(concepts=60, question_concepts=2, answer_concepts=2, context_concepts=0,
                         rho_pos=1.0, rho_neg=0.0, questions_per_language=20, seed=5,
                         split_fractions=(0.5, 0.25, 0.25))
    syn = generate_synthetic_corpus(spec)
    r = syn.retrieval
    for split in ("train", "dev", "test"):
        sp = r.split(split)
        pools = [build_pool(sp, "mono", [l]) for l in sp.languages]
        pools += [build_pool(sp, "bi", ["AR"], ["EL"]), build_pool(sp, "multi", sp.languages)]
        for pool in pools:
            cand_bags = [syn.concept_bag(c.tokens) for c in pool.candidates]
            ids = np.array([c.id for c in pool.candidates])
            for q in pool.queries:
                qb = syn.concept_bag(q.tokens)
                scores = np.array([sum((qb & cb).values()) for cb in cand_bags], dtype=float)
                order = rank_from_scores(scores, ids)
                flags = [i in q.relevant for i in order]
                assert average_precision_at_k(flags, len(q.relevant)) == 1.0


def test_pair_gold_follows_overlap(synth):
    for rec in synth.pairs.records[:100]:
        a = synth.concept_bag(rec.sentence1)
        b = synth.concept_bag(rec.sentence2)
        shared = sum((a & b).values())
        assert rec.gold == pytest.approx(1 + 4 * shared / 4)


def test_corpus_lookups():
    recs = [SentencePairRecord("p1", "AR-EN", "train", (1,), (2,), 3.0)]
    c = PairCorpus(recs)
    assert c.has("p1", "AR-EN") and not c.has("p1", "EN-AR")
    with pytest.raises(CorpusError):
        c.get("p2", "AR-EN")
    with pytest.raises(CorpusError):
        PairCorpus(recs * 2)
    with pytest.raises(CorpusError):
        RetrievalCorpus([]).get("q", "AR")
