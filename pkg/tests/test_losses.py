import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import hinge_margin, loss_fd_check, make_params, pair_batch, triplet_batch
from metalign.losses import (LossBatch, LossSpec, TripletClass, classify_distances,
                             classify_triplet, distance, kd_loss, loss_and_grad, merge_batches,
                             mine_triplets, normalize_gold, regression_loss, triplet_loss)
from metalign.model import TokenBatch, ValidationError, encode

floats = st.floats(-5, 5, allow_nan=False)
vec2 = st.tuples(floats, floats).filter(lambda v: math.hypot(*v) > 1e-3)


def test_distance_examples():
    assert distance([1, 0], [1, 0]) == 0
    assert distance([1, 0], [0, 1]) == pytest.approx(1)
    assert distance([1, 0], [-1, 0]) == pytest.approx(2)
    with pytest.raises(ValidationError):
        distance([0, 0], [1, 0])


@given(vec2, vec2, st.floats(0.01, 100))
def test_distance_symmetric_and_scale_free(u, v, c):
    assert distance(u, v) == pytest.approx(distance(v, u), abs=1e-12)
    assert distance(u, np.multiply(u, c)) == pytest.approx(0.0, abs=1e-12)
    assert distance(u, v) >= 0


def test_triplet_loss_examples():
    q, p, n = [1, 0], [1, 0], [0, 1]
    assert triplet_loss(q, p, n, 1.0) == 0.0
    # d(q,p) = d(q,n): hinge reduces to the margin
    assert triplet_loss([1, 0], [0, 1], [0, -1], 1.0) == pytest.approx(1.0)
    # d(q,p)=0, d(q,n)=2
    assert triplet_loss([1, 0], [2, 0], [-1, 0], 1.0) == 0.0
    with pytest.raises(ValidationError):
        triplet_loss(q, p, n, 0.0)


@given(vec2, vec2, vec2, st.floats(0.01, 3))
def test_triplet_loss_nonnegative_and_zero_iff_easy_closure(q, p, n, m):
    loss = triplet_loss(q, p, n, m)
    assert loss >= 0
    dp, dn = distance(q, p), distance(q, n)
    assert (loss == 0) == (dp - dn + m <= 0)


def test_classification_examples():
    assert classify_distances(0.1, 2.0, 1.0).item() is TripletClass.EASY
    assert classify_distances(1.5, 0.5, 1.0).item() is TripletClass.HARD
    assert classify_distances(0.5, 1.0, 1.0).item() is TripletClass.SEMI_HARD
    # boundary ties go to semi-hard
    assert classify_distances(0.5, 0.5, 1.0).item() is TripletClass.SEMI_HARD
    assert classify_distances(0.5, 1.5, 1.0).item() is TripletClass.SEMI_HARD
    assert classify_triplet([1, 0], [1, 0], [-1, 0], 1.0) is TripletClass.EASY


@given(st.floats(0, 2), st.floats(0, 2), st.floats(0.01, 2))
def test_classification_partition(dp, dn, m):
    c = classify_distances(dp, dn, m).item()
    easy, hard = dp + m < dn, dn < dp
    semi = dp < dn < dp + m
    assert [easy, hard, semi].count(True) <= 1
    if easy:
        assert c is TripletClass.EASY
    elif hard:
        assert c is TripletClass.HARD
    else:
        assert c is TripletClass.SEMI_HARD


def _mining_fixture(seed=0):
    rng = np.random.default_rng(seed)
    p, cfg = make_params(vocab=20, d=4, seed=seed)
    anchors = [(list(rng.integers(0, 20, 3)), list(rng.integers(0, 20, 4))) for _ in range(5)]
    pool = [list(rng.integers(0, 20, 4)) for _ in range(12)]
    return p, cfg, anchors, pool


def test_random_mining_exhausts_small_pool():
    p, cfg, anchors, _ = _mining_fixture()
    pool = [[1], [2], [3]]
    out = mine_triplets(anchors[:1], pool, "random", 3, rng=np.random.default_rng(0))
    assert sorted(t.negative for t in out) == [0, 1, 2]


def test_mining_respects_exclusions_and_empty_pool():
    p, cfg, anchors, pool = _mining_fixture()
    ex = [set(range(10))] * len(anchors)
    out = mine_triplets(anchors, pool, "random", 3, rng=np.random.default_rng(0), exclude=ex)
    assert all(t.negative >= 10 for t in out)
    assert len(out) == 2 * len(anchors)
    with pytest.raises(ValidationError):
        mine_triplets(anchors, [], "random")


@pytest.mark.parametrize("mode,cls", [("hard", TripletClass.HARD),
                                      ("semi-hard", TripletClass.SEMI_HARD)])
@pytest.mark.parametrize("seed", range(5))
def test_mined_triplets_classify_under_mining_params(mode, cls, seed):
    p, cfg, anchors, pool = _mining_fixture(seed)
    out = mine_triplets(anchors, pool, mode, 3, p, cfg, margin=1.0,
                        rng=np.random.default_rng(seed))
    for t in out:
        e = encode(p, TokenBatch.from_sequences([t.q, t.p, t.n]), cfg)
        assert classify_triplet(e[0], e[1], e[2], 1.0) is cls
    assert all(sum(1 for t in out if t.anchor == i) <= 3 for i in range(len(anchors)))


def test_hard_mining_never_pads():
    p, cfg, anchors, pool = _mining_fixture(1)
    q = [1, 2, 3]
    # positive identical to the anchor: d(q,p)=0, nothing can be hard
    out = mine_triplets([(q, q)], pool, "hard", 3, p, cfg, rng=np.random.default_rng(0))
    assert out == []
    with pytest.raises(ValidationError):
        mine_triplets([(q, q)], pool, "hard", 3)


def test_regression_examples():
    assert regression_loss([1, 2], [1, 2], 1.0) == pytest.approx(0.0, abs=1e-15)
    assert regression_loss([1, 0], [0, 3], 0.0) == 0.0
    e2 = [0.5, math.sqrt(3) / 2]
    assert regression_loss([1, 0], e2, 0.75) == pytest.approx(0.0625, abs=1e-15)
    with pytest.raises(ValidationError):
        regression_loss([0, 0], [1, 0], 0.5)


@given(vec2, vec2, st.floats(0.01, 50), st.floats(0, 1))
def test_regression_scale_invariant(a, b, c, g):
    assert regression_loss(a, b, g) == pytest.approx(
        regression_loss(np.multiply(a, c), np.multiply(b, c), g), abs=1e-12)


def test_gold_normalization():
    assert np.allclose(normalize_gold([1, 3, 5]), [0, 0.5, 1])
    with pytest.raises(ValidationError):
        normalize_gold(6.0)


def test_kd_examples():
    assert kd_loss([[0.3, 1.0]], [[0.3, 1.0]]) == 0.0
    # logits whose softmaxes are (0.5,0.5) and (0.25,0.75)
    t = np.array([[0.0, 0.0]])
    s = np.array([[0.0, math.log(3)]])
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert abs(expected - 0.1438410362) < 1e-9
    assert kd_loss(t, s) == pytest.approx(expected, abs=1e-15)
    with pytest.raises(ValidationError):
        kd_loss([[1.0, 2.0]], [[1.0, 2.0, 3.0]])
    with pytest.raises(ValidationError):
        kd_loss([[1.0]], [[1.0], [2.0]])


@given(st.lists(st.floats(-4, 4), min_size=2, max_size=6), st.integers(0, 1000))
def test_kd_nonnegative_and_positive_on_mismatch(t, seed):
    rng = np.random.default_rng(seed)
    t = np.array([t])
    s = t + rng.normal(0, 1, t.shape)
    val = kd_loss(t, s)
    assert val >= 0
    pt = np.exp(t - t.max())
    pt /= pt.sum()
    ps = np.exp(s - s.max())
    ps /= ps.sum()
    if 0.5 * np.abs(pt - ps).sum() > 1e-6:
        assert val > 0


def test_zero_gradient_on_easy_triplet():
    p, cfg = make_params(vocab=6, d=3)
    seqs = [[1], [1], [2]]   # q = p exactly
    b = LossBatch(TokenBatch.from_sequences(seqs), "triplet", triplets=np.array([[0, 1, 2]]),
                  anchors=np.array([0]), positives=np.array([1]))
    emb = encode(p, b.tokens, cfg)
    spec = LossSpec(margin=0.5 * distance(emb[0], emb[2]))
    loss, g = loss_and_grad(p, spec, b, cfg)
    assert loss == 0.0 and np.all(g == 0)


def test_regression_exact_fit_has_zero_gradient():
    p, cfg = make_params(vocab=6, d=3)
    b = LossBatch(TokenBatch.from_sequences([[1, 2], [2, 1]]), "regression",
                  pairs=np.array([[0, 1]]), gold=np.array([1.0]))
    loss, g = loss_and_grad(p, LossSpec(kind="regression"), b, cfg)
    assert loss == pytest.approx(0.0, abs=1e-30)
    assert np.max(np.abs(g)) < 1e-15


def test_empty_batch_and_kind_mismatch():
    p, cfg = make_params()
    empty = LossBatch(TokenBatch.from_sequences([[1]]), "triplet",
                      triplets=np.zeros((0, 3), dtype=int))
    with pytest.raises(ValidationError):
        loss_and_grad(p, LossSpec(), empty, cfg)
    b = pair_batch(np.random.default_rng(0), 12)
    with pytest.raises(ValidationError):
        loss_and_grad(p, LossSpec(kind="triplet"), b, cfg)
    with pytest.raises(ValidationError):
        loss_and_grad(p, LossSpec(kind="composite", task="regression"), b, cfg)


def test_lossspec_validation():
    with pytest.raises(ValidationError):
        LossSpec(margin=0)
    with pytest.raises(ValidationError):
        LossSpec(kd_weight=1.5)
    with pytest.raises(ValidationError):
        LossSpec(distance_mode="euclid")


@pytest.mark.parametrize("mode", ["cosine", "dot"])
def test_triplet_gradient_small_sweep(mode):
    rng = np.random.default_rng(7)
    for i in range(10):
        p, cfg = make_params(vocab=8, d=3, seed=i)
        spec = LossSpec(distance_mode=mode, margin=1.0)
        b = triplet_batch(rng, 8)
        if hinge_margin(p, cfg, b, spec) < 1e-3:
            continue
        assert loss_fd_check(p, spec, b, cfg) < 1e-4


def test_merge_batches_reindexes():
    rng = np.random.default_rng(0)
    a, b = triplet_batch(rng, 10, 2), triplet_batch(rng, 10, 3)
    m = merge_batches([a, b])
    assert len(m) == 5
    assert m.triplets[2:].min() == len(a.tokens)
    p, cfg = make_params(vocab=10)
    la, _ = loss_and_grad(p, LossSpec(), a, cfg)
    lb, _ = loss_and_grad(p, LossSpec(), b, cfg)
    lm, _ = loss_and_grad(p, LossSpec(), m, cfg)
    assert lm == pytest.approx((2 * la + 3 * lb) / 5, abs=1e-14)
