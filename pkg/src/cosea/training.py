"""Contrastive training: hinge losses, Adam, the epoch loop and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .binio import ByteReader
from .data import TokenVocabulary
from .encoders import CoseaModel, EncoderConfig, stack_sequences
from .errors import (
    ConfigurationError,
    CorruptionError,
    DimensionError,
    FormatError,
    TrainingDivergenceError,
)
from .evaluation import evaluate, full_ranking_mrr
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSS_VARIANTS = ("sampled", "minmax")


@dataclass
class TrainConfig:
    margin: float = 0.2
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    loss: str = "minmax"
    seed: int = 0
    patience: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.margin > 0:
            raise ConfigurationError(f"margin must be > 0, got {self.margin}")
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.loss not in LOSS_VARIANTS:
            raise ConfigurationError(f"loss must be one of {LOSS_VARIANTS}, got {self.loss!r}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def hinge_from_similarity(pos: Tensor, neg: Tensor, margin: float) -> Tensor:
    """Mean of ``max(0, margin - pos + neg)``; gradient only through active rows."""
    pv, nv = np.atleast_1d(pos.values), np.atleast_1d(neg.values)
    if pv.shape != nv.shape:
        raise DimensionError(f"hinge: shapes {pos.shape} and {neg.shape} differ")
    raw = margin - pv + nv
    active = raw > 0
    n = pv.size

    def backward(g):
        coeff = (g / n) * active
        if pos.requires_grad:
            pos.accumulate(-coeff.reshape(pos.shape))
        if neg.requires_grad:
            neg.accumulate(coeff.reshape(neg.shape))

    return T._result(np.float64(np.where(active, raw, 0.0).mean()), (pos, neg), backward, "hinge")


def minmax_from_similarity(sim: Tensor, margin: float) -> Tensor:
    """Row-wise hinge against the hardest off-diagonal entry of a ``[B, B]`` cosine matrix.

    The max over negatives takes the lowest column index on ties, and the
    subgradient flows to that single entry.
    """
    S = sim.values
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"minmax: need a square similarity matrix, got {S.shape}")
    B = S.shape[0]
    if B < 2:
        raise ConfigurationError("minmax loss needs a batch of at least 2")
    off = np.where(np.eye(B, dtype=bool), -np.inf, S)
    hardest = np.argmax(off, axis=1)
    rows = np.arange(B)
    raw = margin - S[rows, rows] + S[rows, hardest]
    active = raw > 0

    def backward(g):
        grad = np.zeros_like(S)
        coeff = (g / B) * active
        grad[rows, rows] -= coeff
        grad[rows, hardest] += coeff
        sim.accumulate(grad)

    return T._result(np.float64(np.where(active, raw, 0.0).mean()), (sim,), backward, "minmax")


def loss_sampled(e_q: Tensor, e_pos: Tensor, e_neg: Tensor, margin: float = 0.2) -> Tensor:
    """Hinge on ``cos(q, c+)`` versus one sampled negative per row (mean over rows)."""
    if e_q.shape != e_pos.shape or e_q.shape != e_neg.shape:
        raise DimensionError(f"loss_sampled: shapes {e_q.shape}, {e_pos.shape}, {e_neg.shape} differ")
    return hinge_from_similarity(T.cosine(e_q, e_pos), T.cosine(e_q, e_neg), margin)


def loss_minmax(e_q: Tensor, e_c: Tensor, margin: float = 0.2) -> Tensor:
    """Hinge on each positive versus the most similar in-batch negative code."""
    if e_q.values.ndim != 2 or e_q.shape != e_c.shape:
        raise DimensionError(f"loss_minmax: need matching [B, E] batches, got {e_q.shape} and {e_c.shape}")
    if e_q.shape[0] < 2:
        raise ConfigurationError("minmax loss needs a batch of at least 2")
    return minmax_from_similarity(T.cosine_matrix(e_q, e_c), margin)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    for name, g in grads.items():
        if name not in params:
            raise ConfigurationError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {name}", parameter=name)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        values = p.values if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(values)
        m = state.m.setdefault(name, np.zeros_like(values))
        v = state.v.setdefault(name, np.zeros_like(values))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"COSEA"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """A model plus, optionally, everything needed to resume training.

    ``state`` is JSON-friendly bookkeeping (step, epoch, history, ...);
    ``extra`` holds additional named arrays such as Adam moments.
    """

    model: CoseaModel
    step: int = 0
    state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def id(self) -> str:
        return model_fingerprint(self.model)


def _pack_tensors(named: dict) -> bytes:
    out = [struct.pack("<I", len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr, dtype=np.float64)
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)))
        out.append(key)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def _pack_vocab(vocab: TokenVocabulary) -> bytes:
    out = [struct.pack("<I", len(vocab.tokens))]
    for tok in vocab.tokens:
        raw = tok.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
    return b"".join(out)


def _model_arrays(model: CoseaModel) -> dict:
    return {name: t.values for name, t in model.named_parameters().items()}


def model_fingerprint(model: CoseaModel) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(model.config.to_dict(), sort_keys=True).encode())
    h.update(_pack_tensors(_model_arrays(model)))
    h.update(_pack_vocab(model.code_vocab))
    h.update(_pack_vocab(model.query_vocab))
    return h.hexdigest()[:16]


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {"config": ckpt.model.config.to_dict(), "step": ckpt.step, "state": ckpt.state}
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = dict(_model_arrays(ckpt.model))
    for name, arr in ckpt.extra.items():
        tensors[f"extra/{name}"] = arr
    return b"".join([
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(meta_raw)),
        meta_raw,
        _pack_tensors(tensors),
        _pack_vocab(ckpt.model.code_vocab),
        _pack_vocab(ckpt.model.query_vocab),
    ])


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def _read_vocab(r: ByteReader, what: str) -> TokenVocabulary:
    return TokenVocabulary([r.text(f"{what} token") for _ in range(r.u32(f"{what} size"))])


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = ByteReader(buf)
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    r.pos = len(MAGIC)
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        meta = json.loads(r.text("metadata"))
        config = EncoderConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError, ConfigurationError) as exc:
        if isinstance(exc, CorruptionError):
            raise
        raise FormatError(f"unreadable checkpoint metadata: {exc}") from None
    arrays = r.tensors()
    code_vocab = _read_vocab(r, "code vocabulary")
    query_vocab = _read_vocab(r, "query vocabulary")
    if r.pos != len(buf):
        raise CorruptionError("trailing bytes after checkpoint", r.pos)

    model = CoseaModel.initialize(config, code_vocab, query_vocab, seed=0)
    for name, t in model.named_parameters().items():
        if name not in arrays:
            raise FormatError(f"checkpoint lacks parameter {name}")
        if arrays[name].shape != t.shape:
            raise FormatError(f"parameter {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.values = arrays.pop(name)
    extra = {}
    for name, arr in arrays.items():
        if not name.startswith("extra/"):
            raise FormatError(f"unexpected tensor {name}")
        extra[name[len("extra/"):]] = arr
    return Checkpoint(model, int(meta.get("step", 0)), meta.get("state", {}), extra)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list
    stopped: str  # "completed", "early_stop", "target", "max_steps"


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list:
    order = _epoch_rng(seed, epoch, 0).permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def _negatives(n: int, seed: int, epoch: int) -> np.ndarray:
    """One uniformly drawn other training pair per position."""
    j = _epoch_rng(seed, epoch, 1).integers(0, n - 1, size=n)
    return j + (j >= np.arange(n))


def batch_loss(model: CoseaModel, pairs: Sequence, config: TrainConfig, negatives: Optional[Sequence] = None) -> Tensor:
    q_ids, q_mask = stack_sequences([(p.query_ids, p.query_mask) for p in pairs])
    c_ids, c_mask = stack_sequences([(p.code_ids, p.code_mask) for p in pairs])
    e_q, _ = model.encode_query(q_ids, q_mask)
    e_c, _ = model.encode_code(c_ids, c_mask)
    if config.loss == "minmax":
        return loss_minmax(e_q, e_c, config.margin)
    n_ids, n_mask = stack_sequences([(p.code_ids, p.code_mask) for p in negatives])
    e_n, _ = model.encode_code(n_ids, n_mask)
    return loss_sampled(e_q, e_c, e_n, config.margin)


def _snapshot(model: CoseaModel) -> dict:
    return {name: t.values.copy() for name, t in model.named_parameters().items()}


def _model_from_arrays(template: CoseaModel, arrays: dict) -> CoseaModel:
    model = CoseaModel.initialize(template.config, template.code_vocab, template.query_vocab, seed=0)
    for name, t in model.named_parameters().items():
        t.values = arrays[name].copy()
    return model


def train(
    model: CoseaModel,
    encoded: dict,
    train_ids: Sequence[int],
    config: TrainConfig,
    valid_pools: Optional[Sequence] = None,
    resume: Optional[Checkpoint] = None,
    max_steps: Optional[int] = None,
    target_mrr: Optional[float] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train ``model`` in place.

    After every epoch the model is scored by validation MRR over
    ``valid_pools`` or, without pools, by full-ranking MRR over the training
    pairs. The best-scoring parameters are kept; training stops early after
    ``config.patience`` epochs without improvement, once ``target_mrr`` is
    reached, or after ``max_steps`` optimizer steps in this call. Shuffles
    and negatives are derived from ``(seed, epoch)``, so a checkpoint's
    ``last`` state resumes bit-exactly.
    """
    train_ids = list(train_ids)
    n = len(train_ids)
    if n == 0:
        raise ConfigurationError("training split is empty")
    if config.batch_size > n:
        raise ConfigurationError(f"batch size {config.batch_size} exceeds training size {n}")
    params = model.named_parameters()
    monitor = "valid" if valid_pools else "train"

    if resume is not None:
        for name, t in params.items():
            t.values = resume.model.named_parameters()[name].values.copy()
        st = resume.state
        adam = AdamState(t=st["adam_t"])
        for name in params:
            adam.m[name] = resume.extra[f"adam.m/{name}"].copy()
            adam.v[name] = resume.extra[f"adam.v/{name}"].copy()
        epoch, batch_idx, step = st["epoch"], st["batch"], resume.step
        history = list(st["history"])
        best_mrr, best_epoch, stale = st["best_mrr"], st["best_epoch"], st["stale"]
        epoch_losses = list(st["epoch_losses"])
        best_arrays = {name: resume.extra[f"best/{name}"].copy() for name in params}
        finished = st.get("finished")
    else:
        adam = AdamState()
        epoch = batch_idx = step = 0
        history, epoch_losses = [], []
        best_mrr, best_epoch, stale = -1.0, -1, 0
        best_arrays = _snapshot(model)
        finished = None

    steps_here = 0
    stopped = finished
    while stopped is None and epoch < config.epochs:
        batches = _batches(n, config.batch_size, config.seed, epoch)
        negs = _negatives(n, config.seed, epoch) if config.loss == "sampled" else None
        started = time.perf_counter()
        while batch_idx < len(batches):
            if max_steps is not None and steps_here >= max_steps:
                stopped = "max_steps"
                break
            rows = batches[batch_idx]
            pairs = [encoded[train_ids[i]] for i in rows]
            neg_pairs = [encoded[train_ids[negs[i]]] for i in rows] if negs is not None else None
            model.zero_grad()
            loss = batch_loss(model, pairs, config, neg_pairs)
            if not np.isfinite(loss.item()):
                raise TrainingDivergenceError(
                    f"non-finite loss at step {step}",
                    checkpoint=Checkpoint(_model_from_arrays(model, best_arrays), step),
                )
            loss.backward()
            grads = {name: t.grad for name, t in params.items() if t.grad is not None}
            try:
                adam_step(params, grads, adam, config.lr)
            except TrainingDivergenceError as exc:
                exc.checkpoint = Checkpoint(_model_from_arrays(model, best_arrays), step)
                raise
            epoch_losses.append(loss.item())
            batch_idx += 1
            step += 1
            steps_here += 1
        if stopped == "max_steps":
            break

        if monitor == "valid":
            report, _ = evaluate(model, valid_pools, encoded, ks=(1,))
            score, extra = report.mrr, {"valid_ndcg": report.ndcg, "valid_p@1": report.precision[1]}
        else:
            score, extra = full_ranking_mrr(model, encoded, train_ids), {}
        record = {
            "epoch": epoch + 1,
            "step": step,
            "train_loss": float(np.mean(epoch_losses)) if epoch_losses else 0.0,
            f"{monitor}_mrr": score,
            **extra,
        }
        history.append(record)
        if on_epoch is not None:
            on_epoch({**record, "wall_time": time.perf_counter() - started})
        if score > best_mrr:
            best_mrr, best_epoch, stale = score, epoch + 1, 0
            best_arrays = _snapshot(model)
        else:
            stale += 1
        epoch += 1
        batch_idx = 0
        epoch_losses = []
        if target_mrr is not None and score >= target_mrr:
            stopped = "target"
        elif stale >= config.patience:
            stopped = "early_stop"

    state = {
        "train_config": asdict(config),
        "monitor": monitor,
        "epoch": epoch,
        "batch": batch_idx,
        "adam_t": adam.t,
        "history": history,
        "best_mrr": best_mrr,
        "best_epoch": best_epoch,
        "stale": stale,
        "epoch_losses": epoch_losses,
        "finished": stopped if stopped != "max_steps" else None,
    }
    extra = {}
    for name in params:
        extra[f"adam.m/{name}"] = adam.m.get(name, np.zeros_like(params[name].values))
        extra[f"adam.v/{name}"] = adam.v.get(name, np.zeros_like(params[name].values))
        extra[f"best/{name}"] = best_arrays[name]
    last = Checkpoint(_model_from_arrays(model, _snapshot(model)), step, state, extra)
    best_state = {"train_config": asdict(config), "best_epoch": best_epoch, "best_mrr": best_mrr,
                  "monitor": monitor, "history": history}
    best = Checkpoint(_model_from_arrays(model, best_arrays), step, best_state)
    return TrainResult(best, last, history, stopped or "completed")
