"""Fine-tune, MAML and MAML-Align updates plus the training orchestrator."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .losses import (LossBatch, LossSpec, kd_forward_backward, loss_and_grad,
                     loss_and_grad_values, merge_batches, mine_triplets, normalize_gold,
                     scores_and_vjp)
from .model import (EncoderConfig, OptimizerState, ParameterVector, TokenBatch,
                    ValidationError, adamw_step, load_checkpoint, load_optimizer_state,
                    save_checkpoint, save_optimizer_state, sgd_step)
from .tasks import MetaDataset, MetaTask, TaskSet, TransferMode

LEARNERS = ("finetune", "maml", "maml-align")


class NumericalError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class MetaHyper:
    inner_lr: float = 1e-3          # alpha
    outer_lr: float = 1e-5          # beta
    inner_steps: int = 5            # n (teacher)
    student_inner_steps: int = 1    # n' (student)
    meta_batch: int = 4             # b
    kd_weight: float = 0.5          # lambda
    order: str = "first"            # first | second (second is test-only)

    def __post_init__(self):
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ValidationError("inner and outer learning rates must be positive")
        if self.inner_steps < 0 or self.student_inner_steps < 0:
            raise ValidationError("inner step counts must be non-negative")
        if self.meta_batch < 1:
            raise ValidationError("meta_batch must be at least 1")
        if not 0.0 <= self.kd_weight:
            raise ValidationError("kd_weight must be non-negative")
        if self.order not in ("first", "second"):
            raise ValidationError(f"unknown order {self.order!r}")


@dataclass(frozen=True)
class TrainConfig:
    learner: str = "maml"
    hyper: MetaHyper = field(default_factory=MetaHyper)
    finetune_lr: float = 5e-5
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    max_epochs: int = 20
    patience: int = 50
    max_meta_batches: int | None = None
    meta_validation: bool = True
    criterion_languages: tuple[str, ...] | None = None
    mining: str = "random"
    negatives_per_anchor: int = 3
    margin: float = 1.0
    distance_mode: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ValidationError(f"unknown learner {self.learner!r}")
        if self.patience <= 0:
            raise ValidationError("patience must be positive")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be at least 1")
        if self.learner == "maml-align":
            if self.hyper.order != "first":
                raise ValidationError("MAML-Align supports first-order gradients only")
            if not self.hyper.student_inner_steps < self.hyper.inner_steps:
                raise ValidationError("MAML-Align needs student_inner_steps < inner_steps")

    def loss_spec(self, corpus_kind: str) -> LossSpec:
        kind = "regression" if corpus_kind == "pairs" else "triplet"
        return LossSpec(kind=kind, margin=self.margin, distance_mode=self.distance_mode,
                        task=kind)


# --------------------------------------------------------------------------
# episodes: task ids -> loss batches

@dataclass
class Episode:
    task: MetaTask | None
    batches: dict[str, LossBatch]

    def __getitem__(self, name: str) -> LossBatch:
        return self.batches[name]


class EpisodeBuilder:
    """Turns id-only task sets into loss batches over one corpus split.

    Retrieval sets become triplet batches: every item is an anchor
    (question, answer) pair and gets ``negatives_per_anchor`` negatives
    mined from the set's candidate languages, never another language's
    copy of its own answer. Sentence-pair sets become regression batches.
    """

    def __init__(self, corpus, cfg: EncoderConfig, spec: LossSpec, mining: str = "random",
                 negatives_per_anchor: int = 3):
        self.corpus, self.cfg, self.spec = corpus, cfg, spec
        self.mining, self.count = mining, negatives_per_anchor
        self._pools: dict[tuple[str, ...], tuple[list, dict]] = {}

    def _pool(self, langs: tuple[str, ...]):
        if langs not in self._pools:
            seqs, by_key, seen = [], {}, set()
            for lang in langs:
                for rec in self.corpus.by_language(lang):
                    if (lang, rec.candidate_key) in seen:
                        continue
                    seen.add((lang, rec.candidate_key))
                    by_key.setdefault(rec.candidate_key, set()).add(len(seqs))
                    seqs.append(rec.candidate[:self.cfg.max_candidate_len])
            self._pools[langs] = (seqs, by_key)
        return self._pools[langs]

    def build_set(self, ts: TaskSet, params: ParameterVector | None,
                  rng: np.random.Generator) -> LossBatch:
        if self.corpus.kind == "pairs":
            return self._pair_set(ts)
        cfg = self.cfg
        recs = [(self.corpus.get(k, lq), self.corpus.get(k, lr)) for k, lq, lr in ts.items]
        anchors = [(q.question[:cfg.max_question_len], c.candidate[:cfg.max_candidate_len])
                   for q, c in recs]
        pool, by_key = self._pool(ts.arrangement.candidate_langs)
        exclude = [by_key.get(c.candidate_key, set()) for _, c in recs]
        trips = mine_triplets(anchors, pool, self.mining, self.count, params, cfg,
                              self.spec.margin, rng, exclude, self.spec.distance_mode,
                              cfg.max_question_len, cfg.max_candidate_len)
        k = len(anchors)
        seqs = [a for a, _ in anchors] + [p for _, p in anchors]
        neg_row: dict[int, int] = {}
        rows = []
        for t in trips:
            if t.negative not in neg_row:
                neg_row[t.negative] = len(seqs)
                seqs.append(pool[t.negative])
            rows.append((t.anchor, k + t.anchor, neg_row[t.negative]))
        return LossBatch(TokenBatch.from_sequences(seqs), "triplet",
                         triplets=np.array(rows, dtype=np.int64).reshape(-1, 3),
                         anchors=np.arange(k), positives=np.arange(k, 2 * k),
                         item_ids=list(ts.items))

    def _pair_set(self, ts: TaskSet) -> LossBatch:
        L = self.cfg.max_sentence_len
        seqs, gold = [], []
        for key, l1, l2 in ts.items:
            r = self.corpus.get(key, f"{l1}-{l2}")
            seqs += [r.sentence1[:L], r.sentence2[:L]]
            gold.append(r.gold)
        m = len(ts.items)
        return LossBatch(TokenBatch.from_sequences(seqs), "regression",
                         pairs=np.arange(2 * m).reshape(m, 2),
                         gold=normalize_gold(gold), item_ids=list(ts.items))

    def build(self, task: MetaTask, params: ParameterVector | None,
              rng: np.random.Generator) -> Episode:
        return Episode(task, {name: self.build_set(ts, params, rng)
                              for name, ts in task.sets().items()})


# --------------------------------------------------------------------------
# inner loop and outer updates

@dataclass
class InnerResult:
    params: ParameterVector
    query_loss: float
    query_grad: np.ndarray
    support_losses: list[float]


def _loss_grad(params, spec, batch, cfg):
    """Loss and gradient; an empty batch (nothing mined) contributes nothing."""
    if len(batch) == 0:
        return 0.0, np.zeros_like(params.values)
    try:
        return loss_and_grad(params, spec, batch, cfg)
    except FloatingPointError as exc:
        raise NumericalError(str(exc)) from exc


def inner_loop(episode: Episode, params: ParameterVector, alpha: float, n: int,
               spec: LossSpec, cfg: EncoderConfig, support: str = "support",
               query: str = "query") -> InnerResult:
    """``n`` SGD steps on the support set, then query loss/grad at the adapted point."""
    if n < 0:
        raise ValidationError("inner step count must be non-negative")
    theta = params.copy()
    losses = []
    for _ in range(n):
        loss, g = _loss_grad(theta, spec, episode[support], cfg)
        losses.append(loss)
        theta = sgd_step(theta, g, alpha)
    q_loss, q_grad = _loss_grad(theta, spec, episode[query], cfg)
    return InnerResult(theta, q_loss, q_grad, losses)


def _hvp(values, vec, spec, batch, cfg, h=1e-20):
    """Hessian-vector product of the batch loss by complex step."""
    scale = float(np.max(np.abs(vec)))
    if scale == 0.0 or len(batch) == 0:
        return np.zeros_like(values)
    _, g = loss_and_grad_values(values + 1j * h * (vec / scale), spec, batch, cfg)
    return scale * g.imag / h


def second_order_meta_grad(episode: Episode, params: ParameterVector, alpha: float, n: int,
                           spec: LossSpec, cfg: EncoderConfig, support="support",
                           query="query") -> tuple[float, np.ndarray]:
    """Exact gradient of the query loss w.r.t. the initialization, through the inner steps."""
    traj = [params.values.copy()]
    for _ in range(n):
        _, g = loss_and_grad_values(traj[-1], spec, episode[support], cfg)
        traj.append(traj[-1] - alpha * g)
    q_loss, w = loss_and_grad_values(traj[-1], spec, episode[query], cfg)
    for t in reversed(range(n)):
        w = w - alpha * _hvp(traj[t], w, spec, episode[support], cfg)
    return float(q_loss), w


@dataclass
class StepInfo:
    task_loss: float
    kd_loss: float = 0.0
    meta_grad: np.ndarray | None = field(default=None, repr=False)
    step: np.ndarray | None = field(default=None, repr=False)


def maml_outer_step(episodes: Sequence[Episode], params: ParameterVector, hyper: MetaHyper,
                    spec: LossSpec, cfg: EncoderConfig) -> tuple[ParameterVector, StepInfo]:
    """theta <- theta - beta * sum_j grad of the query loss at adapted theta_j."""
    if not episodes:
        raise ValidationError("empty meta-batch")
    total = np.zeros_like(params.values)
    losses = []
    for ep in episodes:
        if hyper.order == "second":
            loss, g = second_order_meta_grad(ep, params, hyper.inner_lr, hyper.inner_steps,
                                             spec, cfg)
        else:
            res = inner_loop(ep, params, hyper.inner_lr, hyper.inner_steps, spec, cfg)
            loss, g = res.query_loss, res.query_grad
        total = total + g
        losses.append(loss)
    step = hyper.outer_lr * total
    new = sgd_step(params, total, hyper.outer_lr)
    return new, StepInfo(float(np.mean(losses)), 0.0, total, step)


def split_episode(episode: Episode) -> tuple[Episode, Episode]:
    """Three-set episode -> (teacher S1->S2, student S2->Q) sharing the S2 batch."""
    if "support2" not in episode.batches:
        raise ValidationError("MAML-Align needs a task with a second support set")
    s2 = episode["support2"]
    teacher = Episode(episode.task, {"support": episode["support"], "query": s2})
    student = Episode(episode.task, {"support": s2, "query": episode["query"]})
    return teacher, student


def maml_align_step(pairs: Sequence[tuple[Episode, Episode]], params: ParameterVector,
                    hyper: MetaHyper, spec: LossSpec,
                    cfg: EncoderConfig) -> tuple[ParameterVector, StepInfo]:
    """Meta-distillation update from (teacher, student) episode pairs.

    Teacher and student both adapt from the shared theta. The task loss
    averages the teacher's S2 loss and the student's query loss; the KD
    term compares teacher and student score vectors on the shared S2.
    """
    if not pairs:
        raise ValidationError("empty meta-batch")
    if hyper.order != "first":
        raise ValidationError("MAML-Align supports first-order gradients only")
    if not hyper.student_inner_steps < hyper.inner_steps:
        raise ValidationError("MAML-Align needs student_inner_steps < inner_steps")
    total = np.zeros_like(params.values)
    task_losses, kd_losses = [], []
    for teacher, student in pairs:
        s2 = teacher["query"]
        if s2 is not student["support"] and s2.item_ids != student["support"].item_ids:
            raise ValidationError("teacher query set and student support set differ")
        t = inner_loop(teacher, params, hyper.inner_lr, hyper.inner_steps, spec, cfg)
        s = inner_loop(student, params, hyper.inner_lr, hyper.student_inner_steps, spec, cfg)
        # student scores S2 where its last support loss was taken
        theta_kd = params.copy()
        for _ in range(max(hyper.student_inner_steps - 1, 0)):
            theta_kd = sgd_step(theta_kd, _loss_grad(theta_kd, spec, s2, cfg)[1], hyper.inner_lr)
        S_t, pull_t = scores_and_vjp(t.params.values, s2, cfg)
        S_s, pull_s = scores_and_vjp(theta_kd.values, s2, cfg)
        kd, d_t, d_s = kd_forward_backward(S_t, S_s)
        g = 0.5 * (t.query_grad + s.query_grad) + hyper.kd_weight * (pull_t(d_t) + pull_s(d_s))
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite MAML-Align gradient")
        total = total + g
        task_losses.append(0.5 * (t.query_loss + s.query_loss))
        kd_losses.append(float(kd))
    step = hyper.outer_lr * total
    new = sgd_step(params, total, hyper.outer_lr)
    return new, StepInfo(float(np.mean(task_losses)), float(np.mean(kd_losses)), total, step)


def finetune_step(episodes: Sequence[Episode], params: ParameterVector, state: OptimizerState,
                  spec: LossSpec, cfg: EncoderConfig):
    """One AdamW step on the mean loss over every support and query item."""
    if not episodes:
        raise ValidationError("empty batch")
    merged = merge_batches([b for ep in episodes for b in ep.batches.values()])
    loss, g = _loss_grad(params, spec, merged, cfg)
    new, state = adamw_step(state, params, g)
    return new, state, StepInfo(loss, 0.0, g)


def adapt_and_evaluate(params: ParameterVector, episode: Episode, alpha: float, n: int,
                       spec: LossSpec, cfg: EncoderConfig) -> float:
    """Adapt on the support set, then score the query set.

    Retrieval: mAP@20 of each query anchor against the query set's
    positives and negatives. Sentence pairs: Pearson r x 100.
    """
    from .evaluation import average_precision_at_k, pearson_r_times_100, rank_from_scores
    theta = params.copy()
    for _ in range(n):
        theta = sgd_step(theta, _loss_grad(theta, spec, episode["support"], cfg)[1], alpha)
    qb = episode["query"]
    from .model import forward
    emb, _ = forward(theta.values, qb.tokens, cfg)
    unit = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-300)
    if qb.kind == "regression":
        cos = np.sum(unit[qb.pairs[:, 0]] * unit[qb.pairs[:, 1]], axis=1)
        return pearson_r_times_100(cos, qb.gold)
    cand = np.unique(np.concatenate([qb.positives, qb.triplets[:, 2]]))
    aps = []
    for a, p in zip(qb.anchors, qb.positives):
        order = rank_from_scores(unit[cand] @ unit[a], cand)
        aps.append(average_precision_at_k(order == p, 1))
    return float(np.mean(aps))


# --------------------------------------------------------------------------
# orchestration

@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)

    def append(self, record: dict, seconds: float | None = None) -> None:
        if self.records and record["batch"] <= self.records[-1]["batch"]:
            raise ValidationError("history batch indices must increase")
        self.records.append(record)
        if seconds is not None:
            self.timings.append({"batch": record["batch"], "seconds": seconds})

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n"
                       for r in self.records)

    @classmethod
    def loads(cls, text: str) -> "TrainHistory":
        return cls([json.loads(x) for x in text.splitlines() if x.strip()])

    def __len__(self):
        return len(self.records)


@dataclass
class TrainResult:
    best_params: ParameterVector
    final_params: ParameterVector
    history: TrainHistory
    initial_criterion: float
    best_criterion: float
    stopped_early: bool


def _schedule(config: TrainConfig, datasets: dict[str, MetaDataset]):
    """Deterministic (epoch, phase, task indices) units in training order."""
    b = config.hyper.meta_batch
    phases = [("meta-train", 11)]
    if config.meta_validation and len(datasets.get("meta-valid", ())):
        phases.append(("meta-valid", 12))
    for epoch in range(config.max_epochs):
        for phase, salt in phases:
            n = len(datasets[phase])
            order = np.random.default_rng([config.seed, salt, epoch]).permutation(n)
            for i in range(0, n, b):
                yield epoch, phase, [int(x) for x in order[i:i + b]]


def _check_inputs(config, datasets, corpus):
    if "meta-train" not in datasets or not len(datasets["meta-train"]):
        raise ValidationError("training needs a non-empty meta-train dataset")
    three = {t.support2 is not None for ds in datasets.values() for t in ds}
    if config.learner == "maml-align" and three != {True}:
        raise ValidationError("MAML-Align needs mono-bi-multi tasks (with a second support set)")
    if config.learner == "maml" and True in three:
        raise ValidationError("MAML expects two-set tasks; use maml-align for mono-bi-multi")
    for phase in ("meta-train", "meta-valid"):
        if phase in datasets and len(datasets[phase]):
            from .tasks import PHASE_SPLIT
            if not len(corpus.split(PHASE_SPLIT[phase])):
                raise ValidationError(f"corpus has no {PHASE_SPLIT[phase]} split for {phase}")


def train(config: TrainConfig, meta_datasets: dict[str, MetaDataset], corpus,
          params: ParameterVector, cfg: EncoderConfig,
          criterion: Callable[[ParameterVector], float] | None = None,
          run_dir=None, resume: bool = False) -> TrainResult:
    """Run meta-training (plus end-of-epoch meta-validation) with early stopping.

    The criterion is evaluated after every meta-batch; training stops once
    ``patience`` consecutive batches fail to beat the best value so far
    (the untrained value counts as the first best). With ``run_dir`` the
    loop checkpoints after every batch and ``resume`` continues from there.
    """
    from .evaluation import dev_criterion
    from .tasks import PHASE_SPLIT
    _check_inputs(config, meta_datasets, corpus)
    spec = config.loss_spec(corpus.kind)
    if criterion is None:
        criterion = dev_criterion(corpus.split("dev"), cfg, config.criterion_languages)
    builders = {ph: EpisodeBuilder(corpus.split(PHASE_SPLIT[ph]), cfg, spec, config.mining,
                                   config.negatives_per_anchor)
                for ph in meta_datasets}
    hyper = config.hyper
    opt = None
    if config.learner == "finetune":
        opt = OptimizerState.fresh(params, lr=config.finetune_lr, beta1=config.adam_betas[0],
                                   beta2=config.adam_betas[1], eps=config.adam_eps,
                                   weight_decay=config.weight_decay)

    run = Path(run_dir) if run_dir is not None else None
    history = TrainHistory()
    theta = params.copy()
    best_params = params.copy()
    state = {"units_done": 0, "stale": 0, "stopped": False}
    if run is not None and resume and (run / "state.json").exists():
        state = json.loads((run / "state.json").read_text())
        theta, _ = load_checkpoint(run / "current.ckpt")
        best_params, _ = load_checkpoint(run / "best.ckpt")
        history = TrainHistory.loads((run / "history.jsonl").read_text())
        if opt is not None:
            opt = load_optimizer_state(run / "optimizer.state")
        initial, best = state["initial"], state["best"]
    else:
        if run is not None:
            for name in ("history.jsonl", "timings.jsonl", "state.json"):
                (run / name).unlink(missing_ok=True)
        initial = best = float(criterion(theta))
        state.update(initial=initial, best=best)

    for u, (epoch, phase, idx) in enumerate(_schedule(config, meta_datasets)):
        if state["stopped"] or (config.max_meta_batches is not None
                                and u >= config.max_meta_batches):
            break
        if u < state["units_done"]:
            continue
        t0 = time.perf_counter()
        tasks = [meta_datasets[phase].tasks[i] for i in idx]
        eps = [builders[phase].build(t, theta, np.random.default_rng([config.seed, 13, u, j]))
               for j, t in enumerate(tasks)]
        if config.learner == "maml":
            theta, info = maml_outer_step(eps, theta, hyper, spec, cfg)
        elif config.learner == "maml-align":
            theta, info = maml_align_step([split_episode(e) for e in eps], theta, hyper, spec, cfg)
        else:
            theta, opt, info = finetune_step(eps, theta, opt, spec, cfg)
        if not np.isfinite(info.task_loss):
            raise NumericalError(f"non-finite loss at meta-batch {u}")
        value = float(criterion(theta))
        if value > best:
            best, best_params, state["stale"] = value, theta.copy(), 0
        else:
            state["stale"] += 1
        stop = state["stale"] >= config.patience
        history.append({"batch": u, "epoch": epoch, "phase": phase,
                        "tasks": [meta_datasets[phase].tasks[i].index for i in idx],
                        "task_loss": info.task_loss, "kd_loss": info.kd_loss,
                        "criterion": value, "best": best, "early_stop": stop},
                       time.perf_counter() - t0)
        state.update(units_done=u + 1, best=best, stopped=stop)
        if run is not None:
            _persist(run, state, theta, best_params, history, opt, cfg)
        if stop:
            break
    return TrainResult(best_params, theta, history, initial, best, bool(state["stopped"]))


def _persist(run: Path, state, theta, best_params, history, opt, cfg):
    run.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run / "current.ckpt", theta, cfg)
    save_checkpoint(run / "best.ckpt", best_params, cfg)
    if opt is not None:
        save_optimizer_state(run / "optimizer.state", opt, theta)
    with open(run / "history.jsonl", "a") as fh:
        fh.write(json.dumps(history.records[-1], sort_keys=True, separators=(",", ":")) + "\n")
    if history.timings:
        with open(run / "timings.jsonl", "a") as fh:
            fh.write(json.dumps(history.timings[-1]) + "\n")
    (run / "state.json").write_text(json.dumps(state, sort_keys=True))


def hyper_from_dict(d: dict) -> MetaHyper:
    return MetaHyper(**d)


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
