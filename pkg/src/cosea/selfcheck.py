"""Built-in verification: gradient checks, metric oracles and format round trips."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import TokenVocabulary
from .encoders import CoseaModel, EncoderConfig
from .evaluation import mrr, ndcg, precision_at_k
from .tensor import Tensor, grad_check
from .training import Checkpoint, checkpoint_bytes, loss_minmax, loss_sampled, parse_checkpoint

GRAD_TOL = 1e-4
METRIC_TOL = 1e-12


@dataclass
class GradCase:
    name: str
    op: Callable[..., Tensor]
    make_inputs: Callable[[np.random.Generator], list]


def _t(rng, *shape):
    return Tensor(rng.normal(size=shape))


_MASK6 = np.array([True, True, True, True, False, False])
_MASK_35 = np.array([[True] * 5, [True, True, True, False, False], [True] * 5])
_IDS = np.array([0, 2, 2, 5])


def op_cases() -> list:
    """One small, randomly-initialized instance per differentiable op."""
    return [
        GradCase("linear", T.linear, lambda r: [_t(r, 3, 4), _t(r, 4, 5), _t(r, 5)]),
        GradCase("conv1d_same", T.conv1d_same, lambda r: [_t(r, 5, 3), _t(r, 3, 3, 4), _t(r, 4)]),
        GradCase("glu", T.glu, lambda r: [_t(r, 3, 6)]),
        GradCase("sigmoid", T.sigmoid, lambda r: [_t(r, 4)]),
        GradCase("masked_softmax", lambda x: T.masked_softmax(x, _MASK6), lambda r: [_t(r, 6)]),
        GradCase("cosine", T.cosine, lambda r: [_t(r, 5), _t(r, 5)]),
        GradCase("cosine_matrix", T.cosine_matrix, lambda r: [_t(r, 3, 4), _t(r, 2, 4)]),
        GradCase("embedding", lambda w: T.embedding(w, _IDS), lambda r: [_t(r, 6, 3)]),
        GradCase("add", T.add, lambda r: [_t(r, 3, 2), _t(r, 3, 2)]),
        GradCase("apply_mask", lambda x: T.apply_mask(x, _MASK_35), lambda r: [_t(r, 3, 5, 2)]),
        GradCase("matvec", T.matvec, lambda r: [_t(r, 4, 3), _t(r, 3)]),
        GradCase("scale_rows", T.scale_rows, lambda r: [_t(r, 4), _t(r, 4, 3)]),
        GradCase("weighted_sum", T.weighted_sum, lambda r: [_t(r, 4), _t(r, 4, 3)]),
        GradCase("loss_sampled", lambda q, p, n: loss_sampled(q, p, n, 0.2),
                 lambda r: [_t(r, 3, 4), _t(r, 3, 4), _t(r, 3, 4)]),
        GradCase("loss_minmax", lambda q, c: loss_minmax(q, c, 0.2), lambda r: [_t(r, 3, 4), _t(r, 3, 4)]),
    ]


MICRO_CONFIG = dict(embed_dim=4, hidden_dim=6, num_layers=2, kernel_sizes=(3, 3))


def micro_model(seed: int, layer_attention: bool = True):
    vocab = TokenVocabulary([f"t{i}" for i in range(6)])
    config = EncoderConfig(layer_attention=layer_attention, **MICRO_CONFIG)
    return CoseaModel.initialize(config, vocab, vocab, seed)


E2E_PARAM_SCALE = 0.5


def end_to_end_case(seed: int, layer_attention: bool = True):
    """Micro model, batch of 3, code length 5: loss_minmax through both encoders.

    Parameters are redrawn from N(0, 0.5^2) rather than kept at init scale:
    at init scale some kernel gradients are ~1e-9, below what central
    differences on a float64 loss can resolve against the 1e-8 floor.
    Returns ``(op, parameter tensors, model)`` ready for :func:`grad_check`.
    """
    rng = np.random.default_rng(seed)
    model = micro_model(seed, layer_attention)
    for t in model.named_parameters().values():
        t.values[...] = rng.normal(scale=E2E_PARAM_SCALE, size=t.shape)
    V = len(model.code_vocab)
    code_ids = rng.integers(0, V, size=(3, 5))
    code_mask = np.ones((3, 5), dtype=bool)
    code_mask[1, 4:] = False
    query_ids = rng.integers(0, V, size=(3, 4))
    query_mask = np.ones((3, 4), dtype=bool)
    query_mask[2, 2:] = False
    params = list(model.named_parameters().values())

    def pipeline(*_):
        e_q, _ = model.encode_query(query_ids, query_mask)
        e_c, _ = model.encode_code(code_ids, code_mask)
        return loss_minmax(e_q, e_c, 0.2)

    pipeline.__name__ = "encoders->loss_minmax"
    return pipeline, params, model


def gradient_suite(seeds: int = 100, e2e_seeds: int = 10, cases: Optional[Sequence[GradCase]] = None) -> dict:
    """Max relative gradient error per op over ``seeds`` random instances."""
    results = {}
    for case in cases if cases is not None else op_cases():
        worst = 0.0
        for s in range(seeds):
            worst = max(worst, grad_check(case.op, case.make_inputs(np.random.default_rng(s)), seed=s))
        results[case.name] = worst
    if e2e_seeds:
        worst = 0.0
        for s in range(e2e_seeds):
            op, params, _ = end_to_end_case(s)
            worst = max(worst, grad_check(op, params, seed=s))
        results["end_to_end"] = worst
    return results


def _brute_metrics(ranks, k):
    n = len(ranks)
    p = sum(1 for r in ranks if r <= k) / n
    m = sum(1.0 / r for r in ranks) / n
    g = sum(1.0 / math.log2(1 + r) for r in ranks) / n
    return p, m, g


def metric_suite(lists: int = 1000, seed: int = 0) -> dict:
    """Largest gap between vectorized metrics and a scalar loop over random rank lists."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(lists):
        ranks = rng.integers(1, 51, size=int(rng.integers(1, 60))).tolist()
        k = int(rng.integers(1, 51))
        p, m, g = _brute_metrics(ranks, k)
        worst = max(worst, abs(precision_at_k(ranks, k) - p), abs(mrr(ranks) - m), abs(ndcg(ranks) - g))
    fixture = [1, 2, 4]
    fixture_err = max(
        abs(precision_at_k(fixture, 1) - 1 / 3),
        abs(mrr(fixture) - 1.75 / 3),
        abs(ndcg(fixture) - (1 + 1 / math.log2(3) + 1 / math.log2(5)) / 3),
    )
    return {"vectorized_vs_scalar": worst, "fixture_124": fixture_err}


def roundtrip_suite() -> dict:
    from .index import build_index, index_bytes, parse_index
    from .data import RawPair

    model = micro_model(7)
    blob = checkpoint_bytes(Checkpoint(model, step=3, state={"note": "selfcheck"}))
    again = checkpoint_bytes(parse_checkpoint(blob))
    pairs = [RawPair(i, "q", f"t{i} t{(i + 1) % 6}") for i in range(6)]
    idx = index_bytes(build_index(pairs, model))
    return {"checkpoint": blob == again, "index": idx == index_bytes(parse_index(idx))}


def run_selfcheck(seeds: int = 100, cases: Optional[Sequence[GradCase]] = None) -> tuple:
    """Run every suite; returns ``(ok, lines)`` where lines are human-readable."""
    started = time.perf_counter()
    lines, ok = [], True
    for name, err in gradient_suite(seeds, cases=cases).items():
        passed = err <= GRAD_TOL
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'} grad {name:<22} max rel err {err:.3e}")
    for name, err in metric_suite().items():
        passed = err <= (METRIC_TOL if name == "vectorized_vs_scalar" else 1e-9)
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'} metric {name:<20} max abs err {err:.3e}")
    for name, same in roundtrip_suite().items():
        ok &= same
        lines.append(f"{'PASS' if same else 'FAIL'} roundtrip {name}")
    lines.append(f"{'OK' if ok else 'FAILED'} in {time.perf_counter() - started:.1f}s")
    return ok, lines
