"""Code and query encoders.

The code encoder embeds tokens, projects them into a wider hidden space,
runs a stack of convolution modules (conv -> GLU -> per-layer attention
rescale -> residual), projects back to the embedding space with a residual
to the token embeddings and pools the resulting block vectors with a
learned attention vector. The query encoder is attentive pooling over the
raw token embeddings, with attention logits computed in the hidden space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import MAX_CODE_LEN, MAX_QUERY_LEN, PretrainedEmbeddings, TokenVocabulary
from .errors import ConfigurationError, EmptySequenceError
from .tensor import SequenceMask, Tensor


@dataclass
class EncoderConfig:
    embed_dim: int = 200
    hidden_dim: int = 400
    num_layers: int = 3
    kernel_sizes: Optional[tuple] = None
    max_code_len: int = MAX_CODE_LEN
    max_query_len: int = MAX_QUERY_LEN
    layer_attention: bool = True

    def __post_init__(self):
        if self.kernel_sizes is None:
            self.kernel_sizes = (3,) * self.num_layers
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        self.validate()

    def validate(self):
        for name in ("embed_dim", "hidden_dim", "num_layers", "max_code_len", "max_query_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if len(self.kernel_sizes) != self.num_layers:
            raise ConfigurationError(
                f"need one kernel size per layer: {len(self.kernel_sizes)} sizes for {self.num_layers} layers"
            )
        for k in self.kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"kernel sizes must be odd and positive, got {k}")

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "kernel_sizes": list(self.kernel_sizes),
            "max_code_len": self.max_code_len,
            "max_query_len": self.max_query_len,
            "layer_attention": self.layer_attention,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class ConvLayerParams:
    kernel: Tensor  # [k, d, 2d]
    bias: Tensor  # [2d]
    attention: Tensor  # [d]


@dataclass
class CodeEncoderParams:
    embedding: Tensor
    emb2hid_weight: Tensor
    emb2hid_bias: Tensor
    layers: list
    hid2emb_weight: Tensor
    hid2emb_bias: Tensor
    pool_attention: Tensor

    def named(self) -> dict:
        out = {
            "embedding": self.embedding,
            "emb2hid.weight": self.emb2hid_weight,
            "emb2hid.bias": self.emb2hid_bias,
        }
        for i, layer in enumerate(self.layers):
            out[f"conv{i}.kernel"] = layer.kernel
            out[f"conv{i}.bias"] = layer.bias
            out[f"conv{i}.attention"] = layer.attention
        out["hid2emb.weight"] = self.hid2emb_weight
        out["hid2emb.bias"] = self.hid2emb_bias
        out["pool_attention"] = self.pool_attention
        return out


@dataclass
class QueryEncoderParams:
    embedding: Tensor
    attn_proj: Tensor  # [E, d]
    attention: Tensor  # [d]

    def named(self) -> dict:
        return {"embedding": self.embedding, "attn_proj": self.attn_proj, "attention": self.attention}


@dataclass
class EncodeTrace:
    """Attention weights from one encoding pass, as plain arrays.

    ``layers`` holds one array per conv module (``None`` when layer attention
    is disabled); ``pooling`` is the final pooling distribution.
    """

    layers: list = field(default_factory=list)
    pooling: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _embedding_table(rng, vocab: TokenVocabulary, dim: int, pretrained: Optional[PretrainedEmbeddings]):
    table = rng.uniform(-0.1, 0.1, size=(len(vocab), dim))
    if pretrained is not None:
        if pretrained.dim != dim:
            raise ConfigurationError(f"pretrained dimension {pretrained.dim} does not match embed_dim {dim}")
        for tok, vec in pretrained.vectors.items():
            if tok in vocab:
                table[vocab.id(tok)] = vec
    return table


def init_params(
    config: EncoderConfig,
    code_vocab: TokenVocabulary,
    query_vocab: TokenVocabulary,
    seed: int,
    code_pretrained: Optional[PretrainedEmbeddings] = None,
    query_pretrained: Optional[PretrainedEmbeddings] = None,
):
    """Seeded initialization of both encoders.

    Embeddings and attention vectors are uniform in [-0.1, 0.1]; projection
    weights, kernels and their biases are uniform within 1/sqrt(fan_in).
    Pretrained vectors, when given, overwrite the matching embedding rows.
    """
    E, d = config.embed_dim, config.hidden_dim
    rng = np.random.default_rng(seed)

    def scaled(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def small(shape):
        return Tensor(rng.uniform(-0.1, 0.1, size=shape), requires_grad=True)

    code_table = Tensor(_embedding_table(rng, code_vocab, E, code_pretrained), requires_grad=True)
    emb2hid_w = scaled((E, d), E)
    emb2hid_b = scaled((d,), E)
    layers = []
    for k in config.kernel_sizes:
        layers.append(ConvLayerParams(scaled((k, d, 2 * d), k * d), scaled((2 * d,), k * d), small((d,))))
    hid2emb_w = scaled((d, E), d)
    hid2emb_b = scaled((E,), d)
    pool = small((E,))
    code = CodeEncoderParams(code_table, emb2hid_w, emb2hid_b, layers, hid2emb_w, hid2emb_b, pool)

    query_table = Tensor(_embedding_table(rng, query_vocab, E, query_pretrained), requires_grad=True)
    query = QueryEncoderParams(query_table, scaled((E, d), E), small((d,)))

    for name, t in code.named().items():
        t.name = f"code.{name}"
    for name, t in query.named().items():
        t.name = f"query.{name}"
    return code, query


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _as_mask(mask, ids) -> SequenceMask:
    if not isinstance(mask, SequenceMask):
        mask = SequenceMask(mask)
    if mask.valid.shape != np.shape(ids):
        raise ConfigurationError(f"mask shape {mask.valid.shape} does not match ids {np.shape(ids)}")
    return mask


def conv_module(h_prev: Tensor, layer: ConvLayerParams, mask, attention_enabled: bool = True):
    """One convolution module; returns ``(h, attention weights or None)``.

    conv (d -> 2d) then GLU gives ``v``; with attention, ``z_i = alpha_i * v_i``
    where ``alpha`` is a masked softmax of ``<a, v_i>`` over positions,
    otherwise ``z = v``. The layer input is added back and padding re-zeroed.
    """
    x = T.apply_mask(h_prev, mask)
    v = T.glu(T.conv1d_same(x, layer.kernel, layer.bias))
    if attention_enabled:
        alpha = T.masked_softmax(T.matvec(v, layer.attention), mask)
        z = T.scale_rows(alpha, v)
        weights = alpha.values
    else:
        z, weights = v, None
    return T.apply_mask(T.add(z, x), mask), weights


def encode_code(ids, mask, params: CodeEncoderParams, config: EncoderConfig):
    """Embed code token ids (``[p]`` or ``[B, p]``) into ``[..., E]`` plus a trace."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[-1] == 0:
        raise EmptySequenceError("cannot encode an empty code sequence")
    mask = _as_mask(mask, ids)
    t = T.embedding(params.embedding, ids)
    h = T.linear(t, params.emb2hid_weight, params.emb2hid_bias)
    trace = EncodeTrace()
    for layer in params.layers:
        h, weights = conv_module(h, layer, mask, config.layer_attention)
        trace.layers.append(weights)
    block = T.add(T.linear(h, params.hid2emb_weight, params.hid2emb_bias), t)
    beta = T.masked_softmax(T.matvec(block, params.pool_attention), mask)
    trace.pooling = beta.values
    return T.weighted_sum(beta, block), trace


def encode_query(ids, mask, params: QueryEncoderParams):
    """Embed query token ids into ``[..., E]``; returns ``(e_q, attention weights)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[-1] == 0:
        raise EmptySequenceError("cannot encode an empty query")
    mask = _as_mask(mask, ids)
    o = T.embedding(params.embedding, ids)
    alpha = T.masked_softmax(T.matvec(T.linear(o, params.attn_proj), params.attention), mask)
    return T.weighted_sum(alpha, o), alpha.values


def stack_sequences(seqs: Sequence[tuple]):
    """Stack ``(ids, mask)`` pairs into a batch trimmed to the longest valid prefix."""
    width = max(int(np.sum(m)) for _, m in seqs)
    if width == 0:
        raise EmptySequenceError("batch contains no tokens")
    ids = np.stack([np.asarray(i)[:width] for i, _ in seqs])
    mask = np.stack([np.asarray(m, dtype=bool)[:width] for _, m in seqs])
    return ids, mask


def trim(ids, mask):
    """Drop the padded tail of a single sequence."""
    n = int(np.sum(mask))
    return np.asarray(ids)[:n], np.asarray(mask, dtype=bool)[:n]


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------


class CoseaModel:
    """Both encoders, their config and the vocabularies they were built over."""

    def __init__(self, config: EncoderConfig, code: CodeEncoderParams, query: QueryEncoderParams,
                 code_vocab: TokenVocabulary, query_vocab: TokenVocabulary):
        self.config = config
        self.code = code
        self.query = query
        self.code_vocab = code_vocab
        self.query_vocab = query_vocab

    @classmethod
    def initialize(cls, config, code_vocab, query_vocab, seed, code_pretrained=None, query_pretrained=None):
        code, query = init_params(config, code_vocab, query_vocab, seed, code_pretrained, query_pretrained)
        return cls(config, code, query, code_vocab, query_vocab)

    def named_parameters(self) -> dict:
        out = {f"code.{k}": v for k, v in self.code.named().items()}
        out.update({f"query.{k}": v for k, v in self.query.named().items()})
        return out

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.zero_grad()

    def encode_code(self, ids, mask):
        return encode_code(ids, mask, self.code, self.config)

    def encode_query(self, ids, mask):
        return encode_query(ids, mask, self.query)

    def code_vector(self, ids, mask) -> np.ndarray:
        """Embedding of one code sequence, always computed on the unpadded prefix."""
        with T.no_grad():
            e, _ = self.encode_code(*trim(ids, mask))
        return e.values

    def query_vector(self, ids, mask) -> np.ndarray:
        with T.no_grad():
            e, _ = self.encode_query(*trim(ids, mask))
        return e.values
