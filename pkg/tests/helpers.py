"""Shared builders and finite-difference oracles for the test suite."""
import numpy as np

from metalign.losses import LossBatch, LossSpec, _dist_rows, loss_and_grad
from metalign.model import EncoderConfig, ParameterVector, TokenBatch, forward


def make_params(vocab=12, d=4, seed=0, **kw):
    cfg = EncoderConfig(vocab_size=vocab, embed_dim=d, **kw)
    p = ParameterVector.initialize(cfg, np.random.default_rng(seed))
    # spread the embeddings so cosines are far from degenerate
    v = p.values.copy()
    v[p.offsets()["embedding"]] = np.random.default_rng(seed + 1).standard_normal(vocab * d)
    return p.with_values(v), cfg


def random_seqs(rng, n, vocab, max_len=5):
    """``n`` sequences with pairwise-distinct token multisets.

    Two rows with the same multiset pool to the same embedding, which
    makes the loss locally flat in that token's direction and leaves
    finite differences measuring pure round-off.
    """
    out, seen = [], set()
    while len(out) < n:
        s = [int(x) for x in rng.integers(0, vocab, size=int(rng.integers(1, max_len + 1)))]
        if tuple(sorted(s)) not in seen:
            seen.add(tuple(sorted(s)))
            out.append(s)
    return out


def triplet_batch(rng, vocab, m=3):
    """m anchors with their positives and one negative each."""
    seqs = random_seqs(rng, 3 * m, vocab)
    trip = np.array([[i, m + i, 2 * m + i] for i in range(m)])
    return LossBatch(TokenBatch.from_sequences(seqs), "triplet", triplets=trip,
                     anchors=np.arange(m), positives=np.arange(m, 2 * m))


def pair_batch(rng, vocab, m=3):
    seqs = random_seqs(rng, 2 * m, vocab)
    return LossBatch(TokenBatch.from_sequences(seqs), "regression",
                     pairs=np.arange(2 * m).reshape(m, 2), gold=rng.uniform(0, 1, m))


def hinge_margin(params, cfg, batch, spec):
    """Smallest |d(q,p) - d(q,n) + margin| over the batch (distance to the kink)."""
    emb, _ = forward(params.values, batch.tokens, cfg)
    t = batch.triplets
    dp, _ = _dist_rows(emb[t[:, 0]], emb[t[:, 1]], spec.distance_mode)
    dn, _ = _dist_rows(emb[t[:, 0]], emb[t[:, 2]], spec.distance_mode)
    return float(np.min(np.abs(dp - dn + spec.margin)))


def fd_gradient(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(a, f, floor=1e-8):
    return float(np.max(np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)))


def loss_fd_check(params, spec, batch, cfg, h=1e-5):
    _, g = loss_and_grad(params, spec, batch, cfg)
    fd = fd_gradient(lambda v: reference_loss(v, spec, batch, cfg), params.values, h)
    return max_rel_err(g, fd)


def _cos(a, b):
    return np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def _softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def reference_loss(values, spec, batch, cfg):
    """Forward-only loss written directly from the formulas (independent of losses.py)."""
    emb, _ = forward(values, batch.tokens, cfg)
    task = spec.task if spec.kind == "composite" else spec.kind
    if task == "triplet":
        t = batch.triplets
        q, p, n = emb[t[:, 0]], emb[t[:, 1]], emb[t[:, 2]]
        if spec.distance_mode == "cosine":
            dp, dn = 1 - _cos(q, p), 1 - _cos(q, n)
        else:
            dp, dn = -np.sum(q * p, axis=1), -np.sum(q * n, axis=1)
        loss = np.mean(np.maximum(dp - dn + spec.margin, 0.0))
    else:
        c = _cos(emb[batch.pairs[:, 0]], emb[batch.pairs[:, 1]])
        loss = np.mean((c - batch.gold) ** 2)
    if spec.kind == "composite":
        if task == "triplet":
            a, b = emb[batch.anchors], emb[batch.positives]
            a = a / np.linalg.norm(a, axis=1, keepdims=True)
            b = b / np.linalg.norm(b, axis=1, keepdims=True)
            S = a @ b.T
        else:
            c = _cos(emb[batch.pairs[:, 0]], emb[batch.pairs[:, 1]])
            S = np.stack([c, 1 - c], axis=1)
        P, Q = _softmax(batch.kd_target), _softmax(S)
        loss = loss + spec.kd_weight * np.mean(np.sum(P * np.log(P / Q), axis=1))
    return float(loss)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
