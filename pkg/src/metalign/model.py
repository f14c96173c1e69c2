"""Trainable bag-of-embeddings encoder with closed-form gradients.

The encoder maps a padded batch of token ids to sentence embeddings:

    embedding lookup -> masked mean pooling -> optional affine projection
    -> optional L2 normalisation

All towers (question, candidate, sentence) share one parameter vector.
The numerical core works on raw arrays and is dtype-generic, so the same
code runs on complex inputs for complex-step Hessian-vector products.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"MALN1"


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition."""


class LayoutMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    embed_dim: int = 32
    max_question_len: int = 96
    max_candidate_len: int = 256
    max_sentence_len: int = 100
    use_projection: bool = True
    normalize_output: bool = False

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValidationError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.embed_dim < 2:
            raise ValidationError(f"embed_dim must be >= 2, got {self.embed_dim}")
        for name in ("max_question_len", "max_candidate_len", "max_sentence_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        V, d = self.vocab_size, self.embed_dim
        segs: list[tuple[str, tuple[int, ...]]] = [("embedding", (V, d))]
        if self.use_projection:
            segs += [("projection", (d, d)), ("bias", (d,))]
        return tuple(segs)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(**data)


def _layout_size(segments) -> int:
    return int(sum(int(np.prod(shape)) for _, shape in segments))


class ParameterVector:
    """Flat float64 store for every trainable weight, with named segments."""

    __slots__ = ("values", "segments")

    def __init__(self, values: np.ndarray, segments: Sequence[tuple[str, tuple[int, ...]]]):
        values = np.ascontiguousarray(values, dtype=np.float64)
        segments = tuple((str(n), tuple(int(s) for s in shape)) for n, shape in segments)
        if values.ndim != 1 or values.size != _layout_size(segments):
            raise LayoutMismatch(
                f"segment table covers {_layout_size(segments)} values, array has {values.size}")
        if not np.all(np.isfinite(values)):
            raise FloatingPointError("parameter vector contains non-finite values")
        self.values = values
        self.segments = segments

    @classmethod
    def zeros(cls, cfg: EncoderConfig) -> "ParameterVector":
        layout = cfg.layout()
        return cls(np.zeros(_layout_size(layout)), layout)

    @classmethod
    def initialize(cls, cfg: EncoderConfig, rng: np.random.Generator) -> "ParameterVector":
        d = cfg.embed_dim
        parts = [rng.uniform(-0.5 / d, 0.5 / d, size=(cfg.vocab_size, d)).ravel()]
        if cfg.use_projection:
            parts.append((np.eye(d) + 0.01 * rng.standard_normal((d, d))).ravel())
            parts.append(np.zeros(d))
        return cls(np.concatenate(parts), cfg.layout())

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        segs = ", ".join(f"{n}{list(s)}" for n, s in self.segments)
        return f"ParameterVector({segs})"

    def offsets(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, shape in self.segments:
            size = int(np.prod(shape))
            out[name] = slice(start, start + size)
            start += size
        return out

    def segment(self, name: str) -> np.ndarray:
        sl = self.offsets()[name]
        shape = dict(self.segments)[name]
        return self.values[sl].reshape(shape)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.segments)

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values, self.segments)

    def same_layout(self, other) -> bool:
        return isinstance(other, ParameterVector) and self.segments == other.segments

    def checksum(self) -> str:
        return hashlib.sha256(self.values.astype("<f8").tobytes()).hexdigest()

    def to_bytes(self) -> bytes:
        header = json.dumps({"segments": [[n, list(s)] for n, s in self.segments]},
                            separators=(",", ":")).encode()
        return struct.pack("<I", len(header)) + header + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterVector":
        (hlen,) = struct.unpack_from("<I", blob, 0)
        header = json.loads(blob[4:4 + hlen])
        values = np.frombuffer(blob[4 + hlen:], dtype="<f8").astype(np.float64)
        return cls(values, [(n, tuple(s)) for n, s in header["segments"]])


@dataclass(frozen=True)
class TokenBatch:
    """Row-padded token ids with a mask of real positions."""

    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.ids.shape != self.mask.shape or self.ids.ndim != 2:
            raise ValidationError("ids and mask must be equal-shaped 2-D arrays")

    def __len__(self) -> int:
        return self.ids.shape[0]

    @classmethod
    def from_sequences(cls, seqs: Sequence[Sequence[int]], max_len: int | None = None) -> "TokenBatch":
        if len(seqs) == 0:
            return cls(np.zeros((0, 1), dtype=np.int64), np.zeros((0, 1), dtype=bool))
        rows = [list(s)[:max_len] if max_len else list(s) for s in seqs]
        width = max(1, max(len(r) for r in rows))
        ids = np.zeros((len(rows), width), dtype=np.int64)
        mask = np.zeros((len(rows), width), dtype=bool)
        for i, r in enumerate(rows):
            ids[i, :len(r)] = r
            mask[i, :len(r)] = True
        return cls(ids, mask)

    def validate(self, vocab_size: int) -> None:
        if len(self) == 0:
            raise ValidationError("empty token batch")
        counts = self.mask.sum(axis=1)
        if np.any(counts == 0):
            row = int(np.flatnonzero(counts == 0)[0])
            raise ValidationError(f"row {row} has no unmasked tokens")
        live = self.ids[self.mask]
        if live.size and (live.min() < 0 or live.max() >= vocab_size):
            raise ValidationError(f"token id out of range [0, {vocab_size})")

    def take(self, rows) -> "TokenBatch":
        return TokenBatch(self.ids[rows], self.mask[rows])


# --------------------------------------------------------------------------
# numerical core (dtype-generic)

def _views(values: np.ndarray, cfg: EncoderConfig):
    V, d = cfg.vocab_size, cfg.embed_dim
    E = values[:V * d].reshape(V, d)
    if not cfg.use_projection:
        return E, None, None
    W = values[V * d:V * d + d * d].reshape(d, d)
    b = values[V * d + d * d:V * d + d * d + d]
    return E, W, b


def row_norm(x: np.ndarray) -> np.ndarray:
    # sqrt(sum x*x) rather than np.linalg.norm: stays analytic for complex-step
    return np.sqrt(np.sum(x * x, axis=-1))


def forward(values: np.ndarray, batch: TokenBatch, cfg: EncoderConfig):
    """Encode ``batch``; returns ``(embeddings, cache)`` for :func:`backward`."""
    E, W, b = _views(values, cfg)
    maskf = batch.mask.astype(np.float64)
    counts = maskf.sum(axis=1)
    h = np.einsum("nl,nld->nd", maskf, E[batch.ids]) / counts[:, None]
    z = h @ W + b if W is not None else h
    if cfg.normalize_output:
        r = row_norm(z)
        if np.any(r.real == 0):
            raise ValidationError("cannot normalise a zero embedding")
        out = z / r[:, None]
    else:
        r = None
        out = z
    return out, (batch, counts, h, r, out)


def backward(d_out: np.ndarray, cache, values: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    batch, counts, h, r, out = cache
    E, W, b = _views(values, cfg)
    dtype = np.result_type(d_out, values)
    grad = np.zeros(values.shape, dtype=dtype)
    gE, gW, gb = _views(grad, cfg)
    dz = d_out
    if cfg.normalize_output:
        dz = (d_out - out * np.sum(out * d_out, axis=1, keepdims=True)) / r[:, None]
    if W is not None:
        gW += h.T @ dz
        gb += dz.sum(axis=0)
        dh = dz @ W.T
    else:
        dh = dz
    scaled = dh / counts[:, None]
    rows = np.nonzero(batch.mask)
    np.add.at(gE, batch.ids[rows], scaled[rows[0]])
    return grad


def encode(params: ParameterVector, batch: TokenBatch, cfg: EncoderConfig) -> np.ndarray:
    """Sentence embeddings, one row per batch row."""
    batch.validate(cfg.vocab_size)
    check_layout(params, cfg)
    out, _ = forward(params.values, batch, cfg)
    return out


def check_layout(params: ParameterVector, cfg: EncoderConfig) -> None:
    if params.segments != cfg.layout():
        raise LayoutMismatch("parameter layout does not match encoder config")


# --------------------------------------------------------------------------
# optimizers

def sgd_step(params: ParameterVector, grad: np.ndarray, lr: float = 1e-3) -> ParameterVector:
    if lr <= 0:
        raise ValidationError("learning rate must be positive")
    grad = np.asarray(grad)
    if grad.shape != params.values.shape:
        raise LayoutMismatch(f"gradient shape {grad.shape} != params {params.values.shape}")
    return params.with_values(params.values - lr * grad)


@dataclass
class OptimizerState:
    kind: str = "adamw"
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    no_decay: tuple[str, ...] = ("bias",)
    step: int = 0
    exp_avg: np.ndarray | None = field(default=None, repr=False)
    exp_avg_sq: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def fresh(cls, params: ParameterVector, **hyper) -> "OptimizerState":
        state = cls(**hyper)
        if state.kind == "adamw":
            state.exp_avg = np.zeros_like(params.values)
            state.exp_avg_sq = np.zeros_like(params.values)
        return state

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in
                ("kind", "lr", "beta1", "beta2", "eps", "weight_decay", "no_decay")}


def adamw_step(state: OptimizerState, params: ParameterVector,
               grad: np.ndarray) -> tuple[ParameterVector, OptimizerState]:
    """One decoupled-weight-decay Adam update; returns new params and state."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise LayoutMismatch("gradient does not match parameter layout")
    if state.exp_avg is None or state.exp_avg.shape != params.values.shape:
        raise LayoutMismatch("optimizer moments do not match parameter layout")
    t = state.step + 1
    m = state.beta1 * state.exp_avg + (1 - state.beta1) * grad
    v = state.beta2 * state.exp_avg_sq + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)

    p = params.values.copy()
    if state.weight_decay:
        decay = np.ones_like(p)
        for name, sl in params.offsets().items():
            if name in state.no_decay:
                decay[sl] = 0.0
        p -= state.lr * state.weight_decay * decay * p
    p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_values(p), replace(state, step=t, exp_avg=m, exp_avg_sq=v)


# --------------------------------------------------------------------------
# checkpoint files

def _write_blob(path: Path, header: dict, arrays: Sequence[np.ndarray]) -> None:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for a in arrays:
            fh.write(np.asarray(a, dtype="<f8").tobytes())


def _read_blob(path: Path) -> tuple[dict, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:5] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, 5)
    header = json.loads(blob[9:9 + hlen])
    payload = np.frombuffer(blob[9 + hlen:], dtype="<f8").astype(np.float64)
    return header, payload


def save_checkpoint(path, params: ParameterVector, cfg: EncoderConfig) -> None:
    check_layout(params, cfg)
    header = {"config": json.loads(cfg.to_json()),
              "segments": [[n, list(s)] for n, s in params.segments]}
    _write_blob(Path(path), header, [params.values])


def load_checkpoint(path) -> tuple[ParameterVector, EncoderConfig]:
    header, payload = _read_blob(Path(path))
    cfg = EncoderConfig.from_dict(header["config"])
    segments = [(n, tuple(s)) for n, s in header["segments"]]
    params = ParameterVector(payload, segments)
    check_layout(params, cfg)
    return params, cfg


def save_optimizer_state(path, state: OptimizerState, params: ParameterVector) -> None:
    hyper = state.hyper()
    hyper["no_decay"] = list(hyper["no_decay"])
    header = {"optimizer": hyper, "step": state.step,
              "segments": [[n, list(s)] for n, s in params.segments]}
    arrays = [] if state.exp_avg is None else [state.exp_avg, state.exp_avg_sq]
    _write_blob(Path(path), header, arrays)


def load_optimizer_state(path) -> OptimizerState:
    header, payload = _read_blob(Path(path))
    hyper = dict(header["optimizer"])
    hyper["no_decay"] = tuple(hyper["no_decay"])
    state = OptimizerState(**hyper, step=header["step"])
    if payload.size:
        half = payload.size // 2
        state.exp_avg, state.exp_avg_sq = payload[:half].copy(), payload[half:].copy()
    return state
