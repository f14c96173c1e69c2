"""Training objectives: triplet hinge, cosine regression and distillation KL.

Every objective is written twice: a scalar helper that works on single
embeddings (used by tests, mining and classification) and a batched
``forward/backward`` pair used by :func:`loss_and_grad`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (EncoderConfig, ParameterVector, TokenBatch, ValidationError,
                    backward, check_layout, forward, row_norm)

DISTANCE_MODES = ("cosine", "dot")


class TripletClass(enum.Enum):
    EASY = "easy"
    HARD = "hard"
    SEMI_HARD = "semi-hard"


@dataclass(frozen=True)
class LossSpec:
    kind: str = "triplet"            # triplet | regression | composite
    margin: float = 1.0
    distance_mode: str = "cosine"
    kd_weight: float = 0.5
    task: str = "triplet"            # underlying task loss of a composite

    def __post_init__(self):
        if self.kind not in ("triplet", "regression", "composite"):
            raise ValidationError(f"unknown loss kind {self.kind!r}")
        if self.task not in ("triplet", "regression"):
            raise ValidationError(f"unknown composite task loss {self.task!r}")
        if self.margin <= 0:
            raise ValidationError("margin must be positive")
        if not 0.0 <= self.kd_weight <= 1.0:
            raise ValidationError("kd_weight must lie in [0, 1]")
        if self.distance_mode not in DISTANCE_MODES:
            raise ValidationError(f"unknown distance mode {self.distance_mode!r}")

    @property
    def task_kind(self) -> str:
        return self.task if self.kind == "composite" else self.kind


@dataclass(frozen=True)
class Triplet:
    q: tuple[int, ...]
    p: tuple[int, ...]
    n: tuple[int, ...]
    anchor: int = -1
    negative: int = -1


# --------------------------------------------------------------------------
# distances

def _cos_rows(U, V):
    nu, nv = row_norm(U), row_norm(V)
    return np.sum(U * V, axis=-1) / (nu * nv), nu, nv


def distance(u, v, mode: str = "cosine") -> float:
    """``1 - cos(u, v)`` in cosine mode, ``-u.v`` in dot mode."""
    if mode not in DISTANCE_MODES:
        raise ValidationError(f"unknown distance mode {mode!r}")
    u = np.asarray(u, dtype=np.float64).reshape(1, -1)
    v = np.asarray(v, dtype=np.float64).reshape(1, -1)
    d = float(_dist_rows(u, v, mode)[0][0])
    return max(d, 0.0) if mode == "cosine" else d


def _dist_rows(U, V, mode):
    """Row-wise distances plus the pieces needed for the backward pass."""
    if mode == "cosine":
        if np.any(row_norm(U).real == 0) or np.any(row_norm(V).real == 0):
            raise ValidationError("cosine distance undefined for a zero embedding")
        cos, nu, nv = _cos_rows(U, V)
        return 1.0 - cos, (cos, nu, nv)
    return -np.sum(U * V, axis=-1), None


def _dist_rows_backward(g, U, V, mode, aux):
    """Gradient of ``sum(g * d(U, V))`` with respect to U and V."""
    if mode == "cosine":
        cos, nu, nv = aux
        # d(1 - cos)/dU = -(V/(|U||V|) - cos U/|U|^2)
        dU = -(V / (nu * nv)[:, None] - (cos / nu ** 2)[:, None] * U)
        dV = -(U / (nu * nv)[:, None] - (cos / nv ** 2)[:, None] * V)
        return g[:, None] * dU, g[:, None] * dV
    return -g[:, None] * V, -g[:, None] * U


# --------------------------------------------------------------------------
# triplet loss and difficulty classes

def triplet_loss(q, p, n, margin: float = 1.0, mode: str = "cosine") -> float:
    if margin <= 0:
        raise ValidationError("margin must be positive")
    return max(distance(q, p, mode) - distance(q, n, mode) + margin, 0.0)


def classify_distances(d_qp, d_qn, margin: float = 1.0):
    """Vectorised difficulty classes; ties fall into SEMI_HARD."""
    d_qp = np.asarray(d_qp, dtype=np.float64)
    d_qn = np.asarray(d_qn, dtype=np.float64)
    hard = d_qn < d_qp
    easy = d_qp + margin < d_qn
    out = np.full(np.broadcast(d_qp, d_qn).shape, TripletClass.SEMI_HARD, dtype=object)
    out[hard] = TripletClass.HARD
    out[easy] = TripletClass.EASY
    return out


def classify_triplet(q, p, n, margin: float = 1.0, mode: str = "cosine") -> TripletClass:
    if margin <= 0:
        raise ValidationError("margin must be positive")
    return classify_distances(distance(q, p, mode), distance(q, n, mode), margin).item()


def mine_triplets(anchors: Sequence[tuple[Sequence[int], Sequence[int]]],
                  negative_pool: Sequence[Sequence[int]],
                  mode: str = "random",
                  count_per_anchor: int = 3,
                  params: ParameterVector | None = None,
                  cfg: EncoderConfig | None = None,
                  margin: float = 1.0,
                  rng: np.random.Generator | None = None,
                  exclude: Sequence[set[int]] | None = None,
                  distance_mode: str = "cosine",
                  max_anchor_len: int | None = None,
                  max_candidate_len: int | None = None) -> list[Triplet]:
    """Pair every (question, positive) anchor with negatives from the pool.

    ``random`` draws uniformly without replacement. ``hard`` and
    ``semi-hard`` keep only pool entries of that difficulty under
    ``params`` and sample among them; an anchor with too few qualifying
    negatives gets fewer triplets (never padded).
    """
    if len(negative_pool) == 0:
        raise ValidationError("negative pool is empty")
    if mode not in ("random", "hard", "semi-hard"):
        raise ValidationError(f"unknown mining mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    pool_idx = np.arange(len(negative_pool))

    if mode != "random":
        if params is None or cfg is None:
            raise ValidationError(f"{mode} mining needs current params and config")
        check_layout(params, cfg)
        qa = TokenBatch.from_sequences([a for a, _ in anchors], max_anchor_len)
        pa = TokenBatch.from_sequences([p for _, p in anchors], max_candidate_len)
        na = TokenBatch.from_sequences(list(negative_pool), max_candidate_len)
        for b in (qa, pa, na):
            b.validate(cfg.vocab_size)
        eq, _ = forward(params.values, qa, cfg)
        ep, _ = forward(params.values, pa, cfg)
        en, _ = forward(params.values, na, cfg)
        wanted = TripletClass.HARD if mode == "hard" else TripletClass.SEMI_HARD

    out: list[Triplet] = []
    for i, (q, p) in enumerate(anchors):
        allowed = pool_idx
        if exclude is not None and exclude[i]:
            allowed = np.array([j for j in pool_idx if j not in exclude[i]], dtype=np.int64)
        if mode != "random" and allowed.size:
            d_qp = _dist_rows(eq[i:i + 1], ep[i:i + 1], distance_mode)[0][0]
            d_qn = _dist_rows(np.repeat(eq[i:i + 1], allowed.size, 0), en[allowed],
                              distance_mode)[0]
            if distance_mode == "cosine":
                d_qp, d_qn = max(d_qp, 0.0), np.maximum(d_qn, 0.0)
            cls = classify_distances(d_qp, d_qn, margin)
            allowed = allowed[cls == wanted]
        take = min(count_per_anchor, allowed.size)
        chosen = rng.choice(allowed, size=take, replace=False) if take else []
        for j in chosen:
            out.append(Triplet(tuple(q), tuple(p), tuple(negative_pool[int(j)]),
                               anchor=i, negative=int(j)))
    return out


# --------------------------------------------------------------------------
# regression and distillation

def normalize_gold(score):
    """Map raw 1..5 similarity judgements onto [0, 1]."""
    score = np.asarray(score, dtype=np.float64)
    if np.any(score < 1) or np.any(score > 5):
        raise ValidationError("gold scores must lie in [1, 5]")
    return (score - 1.0) / 4.0


def regression_loss(e1, e2, gold) -> float:
    e1 = np.atleast_2d(np.asarray(e1, dtype=np.float64))
    e2 = np.atleast_2d(np.asarray(e2, dtype=np.float64))
    gold = np.atleast_1d(np.asarray(gold, dtype=np.float64))
    if np.any(row_norm(e1) == 0) or np.any(row_norm(e2) == 0):
        raise ValidationError("regression loss undefined for a zero embedding")
    cos, _, _ = _cos_rows(e1, e2)
    return float(np.mean((cos - gold) ** 2))


def _log_softmax(x):
    m = np.max(x.real, axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def kd_forward_backward(teacher, student):
    """Mean row KL(softmax(teacher) || softmax(student)) and both gradients."""
    teacher = np.asarray(teacher)
    student = np.asarray(student)
    if teacher.shape != student.shape:
        raise ValidationError(
            f"teacher/student score shapes differ: {teacher.shape} vs {student.shape}")
    if teacher.ndim != 2 or teacher.shape[0] == 0:
        raise ValidationError("score vectors must form a non-empty 2-D array")
    n = teacher.shape[0]
    lp, lq = _log_softmax(teacher), _log_softmax(student)
    p, q = np.exp(lp), np.exp(lq)
    kl_rows = np.sum(p * (lp - lq), axis=-1)
    d_student = (q - p) / n
    d_teacher = p * (lp - lq - kl_rows[:, None]) / n
    return np.mean(kl_rows), d_teacher, d_student


def kd_loss(teacher_scores, student_scores) -> float:
    """Mean over examples of KL between softmaxed teacher and student scores."""
    if isinstance(teacher_scores, np.ndarray) and isinstance(student_scores, np.ndarray) \
            and teacher_scores.ndim == 2:
        loss, _, _ = kd_forward_backward(teacher_scores, student_scores)
        return max(float(loss), 0.0)
    if len(teacher_scores) != len(student_scores) or len(teacher_scores) == 0:
        raise ValidationError("need one teacher and one student vector per example")
    total = 0.0
    for t, s in zip(teacher_scores, student_scores):
        t = np.asarray(t, dtype=np.float64)[None]
        s = np.asarray(s, dtype=np.float64)[None]
        total += float(kd_forward_backward(t, s)[0])
    return max(total / len(teacher_scores), 0.0)


# --------------------------------------------------------------------------
# batched objectives over an encoded token batch

@dataclass
class LossBatch:
    """Rows of ``tokens`` wired into triplets or scored pairs.

    ``anchors``/``positives`` name the rows used to build in-batch score
    vectors for distillation (asymmetric search); symmetric batches use
    ``pairs``. ``kd_target`` holds fixed teacher scores for composite losses.
    """

    tokens: TokenBatch
    kind: str                                   # triplet | regression
    triplets: np.ndarray | None = None          # (m, 3) row ids
    pairs: np.ndarray | None = None             # (m, 2) row ids
    gold: np.ndarray | None = None              # (m,) in [0, 1]
    anchors: np.ndarray | None = None
    positives: np.ndarray | None = None
    kd_target: np.ndarray | None = None
    item_ids: list = field(default_factory=list)

    def __len__(self) -> int:
        if self.kind == "triplet":
            return 0 if self.triplets is None else len(self.triplets)
        return 0 if self.pairs is None else len(self.pairs)

    def with_kd_target(self, target) -> "LossBatch":
        return LossBatch(self.tokens, self.kind, self.triplets, self.pairs, self.gold,
                         self.anchors, self.positives, np.asarray(target), self.item_ids)


def merge_batches(batches: Sequence[LossBatch]) -> LossBatch:
    """Concatenate same-kind batches, re-indexing their row references."""
    batches = [b for b in batches if len(b)]
    if not batches:
        raise ValidationError("nothing to merge")
    kind = batches[0].kind
    seqs, trip, pairs, gold, anc, pos, ids = [], [], [], [], [], [], []
    offset = 0
    for b in batches:
        if b.kind != kind:
            raise ValidationError("cannot merge triplet and regression batches")
        tb = b.tokens
        seqs += [list(tb.ids[i, tb.mask[i]]) for i in range(len(tb))]
        if kind == "triplet":
            trip.append(b.triplets + offset)
            anc.append(b.anchors + offset)
            pos.append(b.positives + offset)
        else:
            pairs.append(b.pairs + offset)
            gold.append(b.gold)
        ids += list(b.item_ids)
        offset += len(tb)
    tokens = TokenBatch.from_sequences(seqs)
    if kind == "triplet":
        return LossBatch(tokens, kind, triplets=np.concatenate(trip),
                         anchors=np.concatenate(anc), positives=np.concatenate(pos), item_ids=ids)
    return LossBatch(tokens, kind, pairs=np.concatenate(pairs), gold=np.concatenate(gold),
                     item_ids=ids)


def _triplet_objective(emb, batch, spec):
    t = batch.triplets
    Q, P, N = emb[t[:, 0]], emb[t[:, 1]], emb[t[:, 2]]
    dp, aux_p = _dist_rows(Q, P, spec.distance_mode)
    dn, aux_n = _dist_rows(Q, N, spec.distance_mode)
    arg = dp - dn + spec.margin
    active = arg.real > 0
    m = len(t)
    loss = np.sum(np.where(active, arg, 0.0)) / m
    g = active.astype(np.float64) / m
    dQ1, dP = _dist_rows_backward(g, Q, P, spec.distance_mode, aux_p)
    dQ2, dN = _dist_rows_backward(-g, Q, N, spec.distance_mode, aux_n)
    d_emb = np.zeros(emb.shape, dtype=np.result_type(emb, dQ1))
    np.add.at(d_emb, t[:, 0], dQ1 + dQ2)
    np.add.at(d_emb, t[:, 1], dP)
    np.add.at(d_emb, t[:, 2], dN)
    return loss, d_emb


def _regression_objective(emb, batch, spec):
    pr = batch.pairs
    A, B = emb[pr[:, 0]], emb[pr[:, 1]]
    if np.any(row_norm(A).real == 0) or np.any(row_norm(B).real == 0):
        raise ValidationError("regression loss undefined for a zero embedding")
    cos, na, nb = _cos_rows(A, B)
    resid = cos - batch.gold
    m = len(pr)
    loss = np.sum(resid * resid) / m
    g = 2.0 * resid / m
    dA = g[:, None] * (B / (na * nb)[:, None] - (cos / na ** 2)[:, None] * A)
    dB = g[:, None] * (A / (na * nb)[:, None] - (cos / nb ** 2)[:, None] * B)
    d_emb = np.zeros(emb.shape, dtype=np.result_type(emb, dA))
    np.add.at(d_emb, pr[:, 0], dA)
    np.add.at(d_emb, pr[:, 1], dB)
    return loss, d_emb


def _unit_rows(X):
    n = row_norm(X)
    if np.any(n.real == 0):
        raise ValidationError("cannot score a zero embedding")
    return X / n[:, None], n


def _unit_rows_backward(dU, U, n):
    return (dU - U * np.sum(U * dU, axis=1, keepdims=True)) / n[:, None]


def batch_scores(emb, batch: LossBatch):
    """Per-example score vectors and a closure mapping dScores -> dEmb.

    Asymmetric batches score each anchor against every in-batch positive
    (cosine); symmetric batches give the two-element vector (cos, 1 - cos).
    """
    if batch.kind == "triplet":
        A, na = _unit_rows(emb[batch.anchors])
        P, np_ = _unit_rows(emb[batch.positives])
        S = A @ P.T

        def back(dS):
            dA = _unit_rows_backward(dS @ P, A, na)
            dP = _unit_rows_backward(dS.T @ A, P, np_)
            d_emb = np.zeros(emb.shape, dtype=np.result_type(emb, dA))
            np.add.at(d_emb, batch.anchors, dA)
            np.add.at(d_emb, batch.positives, dP)
            return d_emb
        return S, back

    A, na = _unit_rows(emb[batch.pairs[:, 0]])
    B, nb = _unit_rows(emb[batch.pairs[:, 1]])
    cos = np.sum(A * B, axis=1)
    S = np.stack([cos, 1.0 - cos], axis=1)

    def back(dS):
        dc = dS[:, 0] - dS[:, 1]
        dA = _unit_rows_backward(dc[:, None] * B, A, na)
        dB = _unit_rows_backward(dc[:, None] * A, B, nb)
        d_emb = np.zeros(emb.shape, dtype=np.result_type(emb, dA))
        np.add.at(d_emb, batch.pairs[:, 0], dA)
        np.add.at(d_emb, batch.pairs[:, 1], dB)
        return d_emb
    return S, back


def task_objective(emb, batch: LossBatch, spec: LossSpec):
    kind = spec.task_kind
    if kind != batch.kind:
        raise ValidationError(f"{kind} loss applied to a {batch.kind} batch")
    if kind == "triplet":
        return _triplet_objective(emb, batch, spec)
    return _regression_objective(emb, batch, spec)


def objective(emb, batch: LossBatch, spec: LossSpec):
    """Loss and dLoss/dEmbeddings for an already-encoded batch."""
    if len(batch) == 0:
        raise ValidationError("degenerate (empty) loss batch")
    loss, d_emb = task_objective(emb, batch, spec)
    if spec.kind == "composite":
        if batch.kd_target is None:
            raise ValidationError("composite loss needs teacher scores on the batch")
        S, back = batch_scores(emb, batch)
        kd, _, dS = kd_forward_backward(batch.kd_target, S)
        loss = loss + spec.kd_weight * kd
        d_emb = d_emb + spec.kd_weight * back(dS)
    return loss, d_emb


def loss_and_grad_values(values: np.ndarray, spec: LossSpec, batch: LossBatch,
                         cfg: EncoderConfig):
    """Dtype-generic core of :func:`loss_and_grad` on a raw value array."""
    emb, cache = forward(values, batch.tokens, cfg)
    loss, d_emb = objective(emb, batch, spec)
    return loss, backward(d_emb, cache, values, cfg)


def loss_and_grad(params: ParameterVector, spec: LossSpec, batch: LossBatch,
                  cfg: EncoderConfig) -> tuple[float, np.ndarray]:
    if len(batch) == 0:
        raise ValidationError("degenerate (empty) loss batch")
    check_layout(params, cfg)
    batch.tokens.validate(cfg.vocab_size)
    loss, grad = loss_and_grad_values(params.values, spec, batch, cfg)
    loss = float(loss)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite loss or gradient")
    return loss, grad


def scores_and_vjp(values: np.ndarray, batch: LossBatch, cfg: EncoderConfig):
    """Score vectors under ``values`` and a pullback dScores -> dParams."""
    emb, cache = forward(values, batch.tokens, cfg)
    S, back = batch_scores(emb, batch)
    return S, lambda dS: backward(back(dS), cache, values, cfg)
