"""Ranking protocol: 50-candidate pools, FRank with pessimistic ties, P@k / MRR / NDCG."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateVectorError, FormatError, ProtocolError

POOL_SIZE = 50


@dataclass(frozen=True)
class EvalPool:
    query_id: int
    gt_id: int
    distractors: tuple
    seed: int

    @property
    def candidates(self) -> tuple:
        """Ground truth first, then the distractors in sampling order."""
        return (self.gt_id,) + tuple(self.distractors)


@dataclass
class RankingResult:
    query_id: int
    frank: int
    ranking: list  # candidate ids, most similar first

    def to_json(self) -> str:
        return json.dumps({"query_id": self.query_id, "frank": self.frank, "ranking": self.ranking})


@dataclass
class MetricsReport:
    precision: dict
    mrr: float
    ndcg: float
    count: int
    pool_seed: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "queries": self.count,
            "pool_seed": self.pool_seed,
            "mrr": self.mrr,
            "ndcg": self.ndcg,
        }
        for k, v in sorted(self.precision.items()):
            d[f"precision@{k}"] = v
        d.update(self.extra)
        return d

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# pools
# ---------------------------------------------------------------------------


def build_eval_pools(eval_ids: Sequence[int], code_ids: Iterable[int], train_ids: Iterable[int],
                     seed: int, pool_size: int = POOL_SIZE) -> list:
    """Give every evaluation query ``pool_size - 1`` distractors sampled without
    replacement from the codes that are not in the training split."""
    train = set(train_ids)
    eligible = sorted(set(code_ids) - train)
    if len(eligible) < pool_size:
        raise ProtocolError(f"need at least {pool_size} non-training codes, have {len(eligible)}")
    position = {cid: i for i, cid in enumerate(eligible)}
    rng = np.random.default_rng(seed)
    pools = []
    for qid in eval_ids:
        if qid not in position:
            raise ProtocolError(f"ground-truth code {qid} is in the training split or missing")
        gt_pos = position[qid]
        picks = rng.choice(len(eligible) - 1, size=pool_size - 1, replace=False)
        picks = picks + (picks >= gt_pos)
        pools.append(EvalPool(qid, qid, tuple(int(eligible[i]) for i in picks), seed))
    return pools


def save_pools(pools: Sequence[EvalPool], path, seed: int):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# seed {seed}\n")
        for p in pools:
            fh.write(" ".join(str(x) for x in (p.query_id, p.gt_id, *p.distractors)) + "\n")


def load_pools(path) -> list:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[:2] != ["#", "seed"]:
            raise FormatError(f"{path}: missing '# seed N' header")
        seed = int(header[2])
        pools = []
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            ids = [int(x) for x in line.split()]
            if len(ids) < 3:
                raise FormatError(f"{path}:{lineno}: pool needs query, ground truth and distractors")
            pools.append(EvalPool(ids[0], ids[1], tuple(ids[2:]), seed))
    return pools


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------


def similarities(e_q: np.ndarray, candidates: np.ndarray, ids: Optional[Sequence[int]] = None) -> np.ndarray:
    qn = np.linalg.norm(e_q)
    if qn == 0.0:
        raise DegenerateVectorError("query embedding has zero norm")
    norms = np.linalg.norm(candidates, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        who = ids[bad[0]] if ids is not None else int(bad[0])
        raise DegenerateVectorError(f"candidate code {who} has a zero-norm embedding")
    return (candidates @ e_q) / (norms * qn)


def frank_from_similarities(sims: np.ndarray, gt_pos: int) -> int:
    """1-based rank of the ground truth, counting ties against it."""
    g = sims[gt_pos]
    return int(np.sum(sims >= g))


def rank_candidates(e_q: np.ndarray, candidates: np.ndarray, gt_pos: int,
                    candidate_ids: Optional[Sequence[int]] = None, query_id: int = -1) -> RankingResult:
    """Rank candidates by descending cosine to ``e_q``.

    Candidates tied with the ground truth are placed ahead of it; other ties
    are broken by ascending id.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    ids = list(range(len(candidates))) if candidate_ids is None else [int(c) for c in candidate_ids]
    sims = similarities(np.asarray(e_q, dtype=np.float64), candidates, ids)
    is_gt = np.zeros(len(ids), dtype=np.int8)
    is_gt[gt_pos] = 1
    order = np.lexsort((np.asarray(ids), is_gt, -sims))
    return RankingResult(query_id, frank_from_similarities(sims, gt_pos), [ids[i] for i in order])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _ranks(ranks) -> np.ndarray:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ConfigurationError("metrics need at least one rank")
    return r


def precision_at_k(ranks, k: int) -> float:
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    return float(np.mean(_ranks(ranks) <= k))


def mrr(ranks) -> float:
    return float(np.mean(1.0 / _ranks(ranks)))


def ndcg(ranks) -> float:
    """Binary-relevance NDCG with one relevant item: mean of 1/log2(1 + FRank)."""
    return float(np.mean(1.0 / np.log2(1.0 + _ranks(ranks))))


def metrics_report(ranks, ks=(1, 5, 10), pool_seed=None) -> MetricsReport:
    return MetricsReport(
        precision={k: precision_at_k(ranks, k) for k in ks},
        mrr=mrr(ranks),
        ndcg=ndcg(ranks),
        count=len(ranks),
        pool_seed=pool_seed,
    )


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------


def _check_vocab(model, encoded: dict):
    nc, nq = len(model.code_vocab), len(model.query_vocab)
    for pair in encoded.values():
        if pair.code_ids.max() >= nc or pair.query_ids.max() >= nq:
            raise ConfigurationError(f"pair {pair.id} holds ids outside the model vocabularies")


def code_vectors(model, encoded: dict, ids: Iterable[int]) -> dict:
    """Encode each listed code once; the cache is write-once."""
    cache = {}
    for cid in ids:
        if cid not in cache:
            pair = encoded[cid]
            cache[cid] = model.code_vector(pair.code_ids, pair.code_mask)
    return cache


def evaluate(model, pools: Sequence[EvalPool], encoded: dict, ks=(1, 5, 10)):
    """Rank every pool with ``model``; returns ``(MetricsReport, [RankingResult])``."""
    if not pools:
        raise ConfigurationError("no evaluation pools")
    _check_vocab(model, encoded)
    needed = sorted({c for p in pools for c in p.candidates})
    missing = [c for c in needed if c not in encoded]
    if missing:
        raise ConfigurationError(f"pool references unknown code ids, e.g. {missing[0]}")
    cache = code_vectors(model, encoded, needed)
    results = []
    for pool in pools:
        q = encoded[pool.query_id]
        e_q = model.query_vector(q.query_ids, q.query_mask)
        cands = pool.candidates
        emb = np.stack([cache[c] for c in cands])
        results.append(rank_candidates(e_q, emb, 0, cands, pool.query_id))
    seeds = {p.seed for p in pools}
    report = metrics_report([r.frank for r in results], ks, seeds.pop() if len(seeds) == 1 else None)
    return report, results


def full_ranking_mrr(model, encoded: dict, ids: Sequence[int]) -> float:
    """MRR of each query ranked against every code in ``ids`` (used to monitor memorization)."""
    ids = list(ids)
    cache = code_vectors(model, encoded, ids)
    emb = np.stack([cache[c] for c in ids])
    ranks = []
    for pos, qid in enumerate(ids):
        q = encoded[qid]
        sims = similarities(model.query_vector(q.query_ids, q.query_mask), emb, ids)
        ranks.append(frank_from_similarities(sims, pos))
    return mrr(ranks)


def write_rankings(results: Sequence[RankingResult], path):
    Path(path).write_text("".join(r.to_json() + "\n" for r in results), encoding="utf-8")
