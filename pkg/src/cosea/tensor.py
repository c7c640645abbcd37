"""Dense float64 tensors with a small reverse-mode autodiff tape.

Every op takes and returns :class:`Tensor` objects and records a backward
closure when any input requires a gradient. Ops accept arbitrary leading
batch dimensions where that is natural (``[..., p, d]`` sequences), so the
same code path serves single sequences and padded batches.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateVectorError,
    DimensionError,
    EmptySequenceError,
    PropagationError,
)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference only)."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A float64 array plus an optional accumulated gradient."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op: Optional[str] = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def backward(self, grad=None):
        """Propagate ``grad`` (default 1 for scalars) to every upstream tensor."""
        if grad is None:
            if self.values.size != 1:
                raise DimensionError(f"backward() needs an explicit gradient for shape {self.shape}")
            grad = np.ones_like(self.values)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")

        order = _topological_order(self)
        self.accumulate(grad)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            if not np.all(np.isfinite(node.grad)):
                raise PropagationError(f"non-finite gradient flowing out of {node.op}")


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(values: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise PropagationError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class SequenceMask:
    """Validity flags for padded sequences; ``valid`` has shape ``[..., p]``.

    Padding is only allowed at the tail and every sequence must keep at
    least one real position.
    """

    valid: np.ndarray

    def __post_init__(self):
        valid = np.asarray(self.valid, dtype=bool)
        if valid.ndim == 0:
            raise DimensionError("mask needs at least one axis")
        if valid.shape[-1] == 0 or not np.all(valid.any(axis=-1)):
            raise EmptySequenceError("every sequence needs at least one valid position")
        # prefix property: once False, never True again
        if np.any(np.diff(valid.astype(np.int8), axis=-1) > 0):
            raise ConfigurationError("valid positions must form a prefix")
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_lengths(cls, lengths, p: int) -> "SequenceMask":
        lengths = np.asarray(lengths)
        return cls(np.arange(p) < lengths[..., None])

    @classmethod
    def full(cls, p: int) -> "SequenceMask":
        return cls(np.ones(p, dtype=bool))

    @property
    def length(self) -> int:
        return self.valid.shape[-1]

    @property
    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=-1)


def _mask_array(mask) -> np.ndarray:
    if isinstance(mask, SequenceMask):
        return mask.valid
    return SequenceMask(mask).valid


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    xv, Wv = x.values, W.values
    if Wv.ndim != 2 or xv.ndim < 1 or xv.shape[-1] != Wv.shape[0]:
        raise DimensionError(f"linear: cannot multiply {xv.shape} by {Wv.shape}")
    if b is not None and b.shape != (Wv.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match weight {Wv.shape}")
    out = xv @ Wv
    if b is not None:
        out = out + b.values
    m, n = Wv.shape

    def backward(g):
        if x.requires_grad:
            x.accumulate(g @ Wv.T)
        if W.requires_grad:
            W.accumulate(xv.reshape(-1, m).T @ g.reshape(-1, n))
        if b is not None and b.requires_grad:
            b.accumulate(g.reshape(-1, n).sum(axis=0))

    parents = (x, W) if b is None else (x, W, b)
    return _result(out, parents, backward, "linear")


def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Length-preserving 1-D convolution with zero padding of ``(k-1)/2`` per side.

    ``x`` is ``[..., p, d_in]`` and ``kernel`` is ``[k, d_in, d_out]``; kernel
    slot ``j`` multiplies the input at offset ``j - (k-1)/2``.
    """
    xv, kv = x.values, kernel.values
    if kv.ndim != 3:
        raise DimensionError(f"conv1d_same: kernel must be [k, d_in, d_out], got {kv.shape}")
    k, d_in, d_out = kv.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d_same: kernel size must be odd, got {k}")
    if xv.ndim < 2 or xv.shape[-1] != d_in:
        raise DimensionError(f"conv1d_same: input {xv.shape} does not match kernel {kv.shape}")
    if bias.shape != (d_out,):
        raise DimensionError(f"conv1d_same: bias {bias.shape} does not match kernel {kv.shape}")
    p = xv.shape[-2]
    if p == 0:
        raise EmptySequenceError("conv1d_same: empty sequence")

    half = (k - 1) // 2
    pad = [(0, 0)] * (xv.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(xv, pad)
    out = np.broadcast_to(bias.values, xv.shape[:-1] + (d_out,)).copy()
    for j in range(k):
        out += xp[..., j : j + p, :] @ kv[j]

    def backward(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j : j + p, :] += g @ kv[j].T
            x.accumulate(gxp[..., half : half + p, :])
        if kernel.requires_grad:
            g2 = g.reshape(-1, d_out)
            gk = np.empty_like(kv)
            for j in range(k):
                gk[j] = xp[..., j : j + p, :].reshape(-1, d_in).T @ g2
            kernel.accumulate(gk)
        if bias.requires_grad:
            bias.accumulate(g.reshape(-1, d_out).sum(axis=0))

    return _result(out, (x, kernel, bias), backward, "conv1d_same")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.values)

    def backward(g):
        x.accumulate(g * s * (1.0 - s))

    return _result(s, (x,), backward, "sigmoid")


def glu(x: Tensor) -> Tensor:
    """Gated linear unit: first half of the last axis times sigmoid of the second."""
    xv = x.values
    if xv.ndim < 1 or xv.shape[-1] % 2:
        raise DimensionError(f"glu: last dimension must be even, got shape {xv.shape}")
    d = xv.shape[-1] // 2
    a, b = xv[..., :d], xv[..., d:]
    s = _sigmoid(b)
    out = a * s

    def backward(g):
        x.accumulate(np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1))

    return _result(out, (x,), backward, "glu")


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to valid positions.

    Masked positions get weight exactly 0.
    """
    lv = logits.values
    valid = _mask_array(mask)
    if valid.shape != lv.shape:
        raise DimensionError(f"masked_softmax: mask {valid.shape} does not match logits {lv.shape}")
    shifted = np.where(valid, lv, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(valid, np.exp(shifted), 0.0)
    w = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        logits.accumulate(w * (g - (w * g).sum(axis=-1, keepdims=True)))

    return _result(w, (logits,), backward, "masked_softmax")


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity along the last axis (a scalar for plain vectors)."""
    uv, vv = u.values, v.values
    if uv.shape != vv.shape or uv.ndim < 1:
        raise DimensionError(f"cosine: shapes {uv.shape} and {vv.shape} differ")
    nu = np.linalg.norm(uv, axis=-1)
    nv = np.linalg.norm(vv, axis=-1)
    if np.any(nu == 0.0) or np.any(nv == 0.0):
        raise DegenerateVectorError("cosine: zero-norm vector")
    dot = (uv * vv).sum(axis=-1)
    c = dot / (nu * nv)

    def backward(g):
        g_ = np.asarray(g)[..., None]
        nu_, nv_, c_ = nu[..., None], nv[..., None], c[..., None]
        if u.requires_grad:
            u.accumulate(g_ * (vv / (nu_ * nv_) - c_ * uv / nu_**2))
        if v.requires_grad:
            v.accumulate(g_ * (uv / (nu_ * nv_) - c_ * vv / nv_**2))

    return _result(c, (u, v), backward, "cosine")


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine: ``out[i, j] = cos(a[i], b[j])`` for ``a [n×E]``, ``b [m×E]``."""
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise DimensionError(f"cosine_matrix: shapes {av.shape} and {bv.shape} are incompatible")
    na = np.linalg.norm(av, axis=1, keepdims=True)
    nb = np.linalg.norm(bv, axis=1, keepdims=True)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateVectorError("cosine_matrix: zero-norm row")
    ah, bh = av / na, bv / nb
    out = ah @ bh.T

    def backward(g):
        if a.requires_grad:
            gah = g @ bh
            a.accumulate((gah - ah * (ah * gah).sum(axis=1, keepdims=True)) / na)
        if b.requires_grad:
            gbh = g.T @ ah
            b.accumulate((gbh - bh * (bh * gbh).sum(axis=1, keepdims=True)) / nb)

    return _result(out, (a, b), backward, "cosine_matrix")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    tv = table.values
    if tv.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {tv.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise DimensionError(f"embedding: ids out of range for table with {tv.shape[0]} rows")
    out = tv[ids]

    def backward(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tv.shape[1]))
        table.accumulate(gt)

    return _result(out, (table,), backward, "embedding")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _result(a.values + b.values, (a, b), backward, "add")


def apply_mask(x: Tensor, mask) -> Tensor:
    """Zero the padded positions of a ``[..., p, d]`` sequence."""
    valid = _mask_array(mask)
    if valid.shape != x.shape[:-1]:
        raise DimensionError(f"apply_mask: mask {valid.shape} does not match sequence {x.shape}")
    keep = valid[..., None].astype(np.float64)

    def backward(g):
        x.accumulate(g * keep)

    return _result(x.values * keep, (x,), backward, "apply_mask")


def matvec(x: Tensor, a: Tensor) -> Tensor:
    """Inner product of every row of ``x [..., n]`` with ``a [n]``."""
    xv, av = x.values, a.values
    if av.ndim != 1 or xv.shape[-1] != av.shape[0]:
        raise DimensionError(f"matvec: cannot contract {xv.shape} with {av.shape}")
    n = av.shape[0]

    def backward(g):
        if x.requires_grad:
            x.accumulate(g[..., None] * av)
        if a.requires_grad:
            a.accumulate((g[..., None] * xv).reshape(-1, n).sum(axis=0))

    return _result(xv @ av, (x, a), backward, "matvec")


def scale_rows(w: Tensor, x: Tensor) -> Tensor:
    """``out[..., i, :] = w[..., i] * x[..., i, :]``."""
    wv, xv = w.values, x.values
    if wv.shape != xv.shape[:-1]:
        raise DimensionError(f"scale_rows: weights {wv.shape} do not match rows of {xv.shape}")

    def backward(g):
        if w.requires_grad:
            w.accumulate((g * xv).sum(axis=-1))
        if x.requires_grad:
            x.accumulate(g * wv[..., None])

    return _result(wv[..., None] * xv, (w, x), backward, "scale_rows")


def weighted_sum(w: Tensor, x: Tensor) -> Tensor:
    """Pool ``x [..., p, n]`` into ``[..., n]`` with weights ``w [..., p]``."""
    wv, xv = w.values, x.values
    if wv.shape != xv.shape[:-1]:
        raise DimensionError(f"weighted_sum: weights {wv.shape} do not match rows of {xv.shape}")
    out = np.einsum("...p,...pn->...n", wv, xv)

    def backward(g):
        if w.requires_grad:
            w.accumulate(np.einsum("...n,...pn->...p", g, xv))
        if x.requires_grad:
            x.accumulate(wv[..., None] * g[..., None, :])

    return _result(out, (w, x), backward, "weighted_sum")


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(op: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Non-scalar outputs are reduced with a fixed random projection so every
    output entry contributes. The error for each input entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    Inputs are perturbed in place and restored afterwards; the op is
    expected to be small (dimensions of a handful of entries).
    """
    name = getattr(op, "__name__", repr(op))
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()

    try:
        out = op(*inputs)
    except PropagationError as exc:
        raise PropagationError(f"grad_check({name}): {exc}") from exc
    proj = np.random.default_rng(seed).uniform(0.5, 1.5, size=out.shape)
    out.backward(proj)
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in inputs]

    def objective() -> float:
        try:
            val = float((op(*inputs).values * proj).sum())
        except PropagationError as exc:
            raise PropagationError(f"grad_check({name}): {exc}") from exc
        if not np.isfinite(val):
            raise PropagationError(f"grad_check({name}): non-finite objective")
        return val

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.values.reshape(-1)
        aflat = a.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = objective()
            flat[idx] = orig - h
            fm = objective()
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(aflat[idx] - numeric) / max(abs(aflat[idx]), abs(numeric), 1e-8)
            worst = max(worst, err)
    for t in inputs:
        t.zero_grad()
    return worst
