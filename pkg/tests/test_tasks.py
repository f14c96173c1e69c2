import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_params
from metalign.model import EncoderConfig, ParameterVector
from metalign.tasks import (MIXT_CYCLE, PAIR_ROSTER, RETRIEVAL_ROSTER, LanguageArrangement,
                            MetaDataset, MetaTask, QuestionEmbedder, TaskSamplingError, TaskSet,
                            TransferMode, build_meta_dataset, concrete_mode, eligible_keys,
                            parse_arrangement, parse_roster, sample_meta_task, select_queries,
                            task_violations)

SINGLE = [m for m in TransferMode if m not in (TransferMode.MIXT, TransferMode.TRANS)]


def test_arrangement_parsing_and_variants():
    a = parse_arrangement("EL_{EL, AR}")
    assert a == LanguageArrangement(("EL",), ("AR", "EL"))
    assert a.label == "EL_{AR,EL}" and a.variant == "multi"
    assert parse_arrangement("EL_EL").variant == "mono"
    assert parse_arrangement("EL_AR").variant == "bi"
    assert str(parse_arrangement(a.label)) == a.label
    with pytest.raises(TaskSamplingError):
        parse_arrangement("ELAR")


def test_mode_parsing():
    assert TransferMode.parse("MONO_BI") is TransferMode.MONO_BI
    assert TransferMode.parse("mono→bi→multi") is TransferMode.MONO_BI_MULTI
    with pytest.raises(TaskSamplingError):
        TransferMode.parse("bi-bi")


def test_concrete_modes():
    assert concrete_mode("trans", "meta-train") is TransferMode.MONO_BI
    assert concrete_mode("trans", "meta-valid") is TransferMode.BI_MULTI
    assert concrete_mode("trans", "meta-test") is TransferMode.MONO_MULTI
    assert [concrete_mode("mixt", "meta-train", i) for i in range(5)] == \
        list(MIXT_CYCLE) + [MIXT_CYCLE[0]]
    assert concrete_mode("mono-bi", "meta-test") is TransferMode.MONO_BI


@pytest.mark.parametrize("mode", SINGLE)
def test_every_retrieval_mode_conforms(synth, mode):
    split = synth.retrieval.split("train")
    for i in range(20):
        t = sample_meta_task(split, mode, rng=np.random.default_rng(i), index=i)
        assert task_violations(t, 8, 4, RETRIEVAL_ROSTER) == []


@pytest.mark.parametrize("mode", [TransferMode.MONO_MONO, TransferMode.MONO_BI,
                                  TransferMode.MONO_BI_MULTI])
def test_pair_modes_conform(sts_synth, mode):
    split = sts_synth.pairs.split("train")
    for i in range(20):
        t = sample_meta_task(split, mode, k=4, q=2, rng=np.random.default_rng(i))
        assert task_violations(t, 4, 2, PAIR_ROSTER) == []
        for _, ts in t.sets().items():
            for key, lq, lr in ts.items:
                assert split.has(key, f"{lq}-{lr}")


def test_pair_corpus_rejects_modes_without_roster(sts_synth):
    with pytest.raises(TaskSamplingError, match="not applicable"):
        sample_meta_task(sts_synth.pairs.split("train"), "bi-multi", k=4, q=2)


@settings(max_examples=25)
@given(st.sampled_from(["mono-mono", "mono-bi", "mono-multi", "bi-multi", "mixt", "trans",
                        "mono-bi-multi"]),
       st.sampled_from(["meta-train", "meta-valid", "meta-test"]),
       st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 5))
def test_sampled_tasks_never_violate(synth, mode, phase, seed, k, q):
    split = synth.retrieval.split({"meta-train": "train", "meta-valid": "dev",
                                   "meta-test": "test"}[phase])
    t = sample_meta_task(split, mode, phase, k, q, rng=np.random.default_rng(seed), index=seed)
    assert task_violations(t, k, q, RETRIEVAL_ROSTER) == []
    # exposure: k support + q query items per task, 2k + q for the three-set shape
    total = sum(len(s) for s in t.sets().values())
    assert total == (2 * k + q if t.mode is TransferMode.MONO_BI_MULTI else k + q)


def test_violation_detection():
    el, ar = parse_arrangement("EL_EL"), parse_arrangement("EL_AR")
    good = MetaTask(0, "meta-train", TransferMode.MONO_BI,
                    TaskSet(el, (("a", "EL", "EL"),)), TaskSet(ar, (("b", "EL", "AR"),)))
    assert task_violations(good, 1, 1) == []
    leak = MetaTask(0, "meta-train", TransferMode.MONO_BI,
                    TaskSet(el, (("a", "EL", "EL"),)), TaskSet(ar, (("a", "EL", "AR"),)))
    assert any("leaks" in e for e in task_violations(leak))
    wrong = MetaTask(0, "meta-train", TransferMode.MONO_BI,
                     TaskSet(ar, (("a", "EL", "AR"),)), TaskSet(ar, (("b", "EL", "AR"),)))
    assert any("expected mono" in e for e in task_violations(wrong))
    trans = MetaTask(0, "meta-test", TransferMode.MONO_BI, good.support, good.query,
                     dataset_mode=TransferMode.TRANS)
    assert any("trans" in e for e in task_violations(trans))
    mixed = MetaTask(1, "meta-train", TransferMode.MONO_BI, good.support,
                     TaskSet(ar, (("b", "EL", "EL"),)))
    assert any("same-language" in e for e in task_violations(mixed))
    assert any("items" in e for e in task_violations(good, 2, 1))
    assert any("roster" in e for e in task_violations(good, roster={}))


def test_roster_parsing():
    r = parse_roster({"mono-bi": [["EL_EL", "EL_AR"]]})
    assert r[TransferMode.MONO_BI][0][1].label == "EL_AR"
    with pytest.raises(TaskSamplingError):
        parse_roster({"mono-bi": [["EL_EL"]]})


def test_custom_roster_is_used(synth):
    roster = parse_roster({"mono-bi": [["HI_HI", "HI_AR"]]})
    t = sample_meta_task(synth.retrieval.split("train"), "mono-bi", roster=roster,
                         rng=np.random.default_rng(0))
    assert t.query.arrangement.label == "HI_AR"
    assert task_violations(t, 8, 4, roster) == []


def test_exhausted_pool_raises(small_synth):
    split = small_synth.retrieval.split("test")
    n = len(eligible_keys(split, parse_arrangement("EL_EL")))
    with pytest.raises(TaskSamplingError, match="need"):
        sample_meta_task(split, "mono-bi", k=n, q=4)


def test_random_query_selection():
    sup = [("s", "EL", "EL")]
    pool = [(f"c{i}", "EL", "AR") for i in range(6)]
    out = select_queries(sup, pool, "random", 4, np.random.default_rng(0))
    assert len(set(out)) == 4 and set(out) <= set(pool)
    with pytest.raises(TaskSamplingError):
        select_queries(sup, pool, "random", 7, np.random.default_rng(0))
    with pytest.raises(TaskSamplingError, match="overlaps"):
        select_queries(sup, pool + [("s", "EL", "AR")], "random", 2, np.random.default_rng(0))
    with pytest.raises(TaskSamplingError):
        select_queries(sup, pool, "similar", 2, np.random.default_rng(0))


class _ToyCorpus:
    kind = "retrieval"

    def __init__(self, questions):
        self.q = questions

    def get(self, key, lang):
        class R:
            question = self.q[key]
        return R


def test_similar_query_selection_hand_example():
    # vocabulary rows: token 0 -> (1,0), token 1 -> (0,1), token 2 -> (1,1)/sqrt2
    cfg = EncoderConfig(vocab_size=3, embed_dim=2, use_projection=False)
    p = ParameterVector(np.array([1, 0, 0, 1, 0.7071, 0.7071]), cfg.layout())
    corpus = _ToyCorpus({"s1": (0,), "s2": (0,), "a": (1,), "b": (2,), "c": (0, 0), "d": (1, 1)})
    emb = QuestionEmbedder(corpus, p, cfg)
    sup = [("s1", "EL", "EL"), ("s2", "EL", "EL")]
    pool = [(k, "EL", "AR") for k in ("a", "b", "c", "d")]
    out = select_queries(sup, pool, "similar", 2, np.random.default_rng(0), emb)
    # cosines to (1,0): a=0, b=.707, c=1, d=0
    assert [o[0] for o in out] == ["c", "b"]
    # ties keep pool order
    out = select_queries(sup, pool, "similar", 4, np.random.default_rng(0), emb)
    assert [o[0] for o in out] == ["c", "b", "a", "d"]


def test_similar_sampling_is_rng_free(synth):
    p = ParameterVector.initialize(EncoderConfig(len(synth.vocab)), np.random.default_rng(0))
    cfg = EncoderConfig(len(synth.vocab))
    a = build_meta_dataset(synth.retrieval, "mono-bi", (5, 2, 2), query_sampling="similar",
                           base_params=p, cfg=cfg)
    b = build_meta_dataset(synth.retrieval, "mono-bi", (5, 2, 2), query_sampling="similar",
                           base_params=p, cfg=cfg)
    assert all(a[ph].dumps() == b[ph].dumps() for ph in a)
    with pytest.raises(TaskSamplingError):
        build_meta_dataset(synth.retrieval, "mono-bi", (1, 1, 1), query_sampling="similar")


def test_meta_dataset_deterministic_and_round_trips(synth, tmp_path):
    a = build_meta_dataset(synth.retrieval, "trans", (30, 10, 10), seed=4)
    b = build_meta_dataset(synth.retrieval, "trans", (30, 10, 10), seed=4)
    c = build_meta_dataset(synth.retrieval, "trans", (30, 10, 10), seed=5)
    for ph in a:
        assert a[ph].dumps() == b[ph].dumps()
        a[ph].save(tmp_path / f"{ph}.jsonl")
        back = MetaDataset.load(tmp_path / f"{ph}.jsonl")
        assert back.dumps() == a[ph].dumps()
        assert back.tasks == a[ph].tasks
    assert a["meta-train"].dumps() != c["meta-train"].dumps()
    assert [t.mode for t in a["meta-valid"]] == [TransferMode.BI_MULTI] * 10


def test_phases_draw_from_their_own_split(synth):
    ds = build_meta_dataset(synth.retrieval, "mixt", (20, 8, 8), seed=1)
    ids = {ph: {key for t in ds[ph] for s in t.sets().values() for key in s.keys} for ph in ds}
    r = synth.retrieval
    for ph, split in [("meta-train", "train"), ("meta-valid", "dev"), ("meta-test", "test")]:
        allowed = set(r.split(split).question_ids())
        assert ids[ph] <= allowed
    assert not ids["meta-train"] & ids["meta-test"]
    for t in ds["meta-train"]:
        assert t.mode is MIXT_CYCLE[t.index % 4]


def test_multi_sets_realise_every_candidate_language(synth):
    split = synth.retrieval.split("train")
    t = sample_meta_task(split, "mono-bi-multi", k=8, q=6, rng=np.random.default_rng(2))
    assert {lr for _, _, lr in t.query.items} == set(t.query.arrangement.candidate_langs)


def test_uses_make_params_vocab(synth):
    # embeddings from a random model still yield a valid similar-sampled dataset
    p, cfg = make_params(vocab=len(synth.vocab), d=8)
    ds = build_meta_dataset(synth.retrieval, "mono-multi", (4, 2, 2), query_sampling="similar",
                            base_params=p, cfg=cfg)
    for t in ds["meta-test"]:
        assert task_violations(t, 8, 4, RETRIEVAL_ROSTER) == []
