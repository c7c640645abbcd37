"""Command line entry point: prepare, train, evaluate, index, search, inspect, selfcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import ENCODER_KEYS, TRAIN_KEYS, RunConfig
from .encoders import CoseaModel, EncoderConfig, trim
from .errors import CoseaError, ConfigurationError, EmptySequenceError, TrainingDivergenceError
from .evaluation import POOL_SIZE, build_eval_pools, evaluate, load_pools, save_pools, write_rankings
from .index import build_index, load_index, save_index, search
from .tensor import no_grad
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("cosea")

CORPUS_FILE = "corpus.jsonl"
CODE_VOCAB_FILE = "code.vocab"
QUERY_VOCAB_FILE = "query.vocab"


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    pairs = D.read_corpus(args.corpus)
    if not pairs:
        raise ConfigurationError(f"{args.corpus}: corpus is empty")
    kept, skipped, code_lens, query_lens = [], [], [], []
    tokenized = {}
    for p in pairs:
        try:
            q, c = D.tokenize_query(p.query), D.tokenize_code(p.code)
        except EmptySequenceError:
            skipped.append(p.id)
            continue
        kept.append(p)
        tokenized[p.id] = (q, c)
        query_lens.append(len(q))
        code_lens.append(len(c))
    if not kept:
        raise ConfigurationError("every record tokenized to nothing")
    if skipped:
        log.warning("prepare: skipped %d record(s) with empty tokenization", len(skipped))

    split = D.split_dataset([p.id for p in kept], args.seed)
    train_ids = set(split.train)
    code_vocab = D.build_vocab((tokenized[i][1] for i in split.train), args.min_count)
    query_vocab = D.build_vocab((tokenized[i][0] for i in split.train), args.min_count)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_corpus(kept, out / CORPUS_FILE)
    code_vocab.save(out / CODE_VOCAB_FILE)
    query_vocab.save(out / QUERY_VOCAB_FILE)
    split.save(out)
    report = {
        "corpus": Path(args.corpus).name,
        "seed": args.seed,
        "min_count": args.min_count,
        "records": len(pairs),
        "kept": len(kept),
        "skipped": len(skipped),
        "skipped_ids": skipped,
        "split_sizes": {"train": len(split.train), "valid": len(split.valid), "test": len(split.test)},
        "vocab_sizes": {"code": len(code_vocab), "query": len(query_vocab)},
        "token_stats": {
            "code": {"mean": float(np.mean(code_lens)), "max": int(max(code_lens)),
                     "length_buckets": D.length_bucket_shares(code_lens)},
            "query": {"mean": float(np.mean(query_lens)), "max": int(max(query_lens)),
                      "length_buckets": D.length_bucket_shares(query_lens)},
        },
        "oov_rate_train": {
            "code": _oov_rate((tokenized[i][1] for i in train_ids), code_vocab),
            "query": _oov_rate((tokenized[i][0] for i in train_ids), query_vocab),
        },
    }
    (out / "prepare_report.json").write_text(_dump(report), encoding="utf-8")
    print(f"prepared {len(kept)} pairs ({len(skipped)} skipped) into {out}")
    return 0


def _oov_rate(token_lists, vocab) -> float:
    total = unk = 0
    for toks in token_lists:
        ids = vocab.encode(toks)
        total += len(ids)
        unk += sum(1 for i in ids if i == D.UNK)
    return unk / total if total else 0.0


# ---------------------------------------------------------------------------
# shared loading
# ---------------------------------------------------------------------------


class Prepared:
    """A prepared data directory, encoded against a pair of vocabularies."""

    def __init__(self, data_dir, code_vocab=None, query_vocab=None, max_query_len=D.MAX_QUERY_LEN,
                 max_code_len=D.MAX_CODE_LEN):
        self.dir = Path(data_dir)
        self.pairs = D.read_corpus(self.dir / CORPUS_FILE)
        self.split = D.DatasetSplit.load(self.dir)
        self.code_vocab = code_vocab or D.TokenVocabulary.load(self.dir / CODE_VOCAB_FILE)
        self.query_vocab = query_vocab or D.TokenVocabulary.load(self.dir / QUERY_VOCAB_FILE)
        self.encoded, self.skipped = D.encode_corpus(self.pairs, self.code_vocab, self.query_vocab,
                                                     max_query_len, max_code_len)

    def check_vocab(self, model: CoseaModel):
        disk_code = D.TokenVocabulary.load(self.dir / CODE_VOCAB_FILE)
        disk_query = D.TokenVocabulary.load(self.dir / QUERY_VOCAB_FILE)
        if disk_code != model.code_vocab or disk_query != model.query_vocab:
            raise ConfigurationError(f"checkpoint vocabularies do not match {self.dir}")

    def pools(self, split_name: str, seed: int):
        eval_ids = [i for i in getattr(self.split, split_name) if i in self.encoded]
        return build_eval_pools(eval_ids, list(self.encoded), self.split.train, seed)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig(RunConfig.parse(""))
    cfg.apply_overrides(args.set)
    return cfg


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_one(cfg: RunConfig, prepared: Prepared, out: Path, variant: str) -> dict:
    enc_cfg = EncoderConfig(**cfg.subset(ENCODER_KEYS))
    tr_cfg = TrainConfig(seed=cfg["seed"], **cfg.subset(TRAIN_KEYS))
    code_pre = query_pre = None
    if "pretrained_code" in cfg:
        code_pre, cov = D.load_pretrained_embeddings(cfg["pretrained_code"], prepared.code_vocab, enc_cfg.embed_dim)
        log.info("pretrained code vectors cover %.1f%% of the vocabulary", 100 * cov)
    if "pretrained_query" in cfg:
        query_pre, cov = D.load_pretrained_embeddings(cfg["pretrained_query"], prepared.query_vocab,
                                                      enc_cfg.embed_dim)
        log.info("pretrained query vectors cover %.1f%% of the vocabulary", 100 * cov)
    model = CoseaModel.initialize(enc_cfg, prepared.code_vocab, prepared.query_vocab, cfg["init_seed"],
                                  code_pre, query_pre)

    non_train = len(set(prepared.encoded) - set(prepared.split.train))
    pools = None
    if non_train >= POOL_SIZE and prepared.split.valid:
        pools = prepared.pools("valid", cfg["pool_seed"])
    else:
        log.warning("fewer than %d non-training codes: monitoring training-set MRR instead", POOL_SIZE)

    out.mkdir(parents=True, exist_ok=True)
    train_ids = [i for i in prepared.split.train if i in prepared.encoded]
    header = {"variant": variant, "config_digest": cfg.digest(), "config": cfg.canonical(),
              "seed": cfg["seed"], "init_seed": cfg["init_seed"], "pool_seed": cfg["pool_seed"]}
    with open(out / "train.log", "w", encoding="utf-8") as logf:
        logf.write(json.dumps(header, sort_keys=True) + "\n")

        def on_epoch(record):
            # wall time goes to the console only; the log stays reproducible
            persisted = {k: v for k, v in record.items() if k != "wall_time"}
            logf.write(json.dumps(persisted, sort_keys=True) + "\n")
            logf.flush()
            log.info("%s epoch %d loss %.4f mrr %.4f (%.2fs)", variant, record["epoch"], record["train_loss"],
                     record.get("valid_mrr", record.get("train_mrr", float("nan"))), record.get("wall_time", 0.0))

        try:
            result = train(model, prepared.encoded, train_ids, tr_cfg, valid_pools=pools, on_epoch=on_epoch)
        except TrainingDivergenceError as exc:
            if exc.checkpoint is not None:
                save_checkpoint(exc.checkpoint, out / "model.ckpt")
            raise
    for ckpt in (result.best, result.last):
        ckpt.state["config_digest"] = cfg.digest()
    save_checkpoint(result.best, out / "model.ckpt")
    save_checkpoint(result.last, out / "last.ckpt")
    print(f"{variant}: {result.stopped} after {len(result.history)} epoch(s); "
          f"best epoch {result.best.state['best_epoch']} mrr {result.best.state['best_mrr']:.4f} -> {out}")
    return {"history": result.history, "best_epoch": result.best.state["best_epoch"],
            "best_mrr": result.best.state["best_mrr"], "checkpoint_id": result.best.id}


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.loss:
        cfg["loss"] = args.loss
    if args.no_layer_attention:
        cfg["layer_attention"] = False
    cfg.require("data_dir", "out_dir")
    EncoderConfig(**cfg.subset(ENCODER_KEYS))
    TrainConfig(seed=cfg["seed"], **cfg.subset(TRAIN_KEYS))
    prepared = Prepared(cfg["data_dir"], max_query_len=cfg.get("max_query_len", D.MAX_QUERY_LEN),
                        max_code_len=cfg.get("max_code_len", D.MAX_CODE_LEN))
    out = Path(cfg["out_dir"])

    if not args.compare:
        _train_one(cfg, prepared, out, "cosea")
        return 0

    if args.compare == "attention":
        variants = {"cosea": {"layer_attention": True}, "cosea-att": {"layer_attention": False}}
    else:
        variants = {"minmax": {"loss": "minmax"}, "sampled": {"loss": "sampled"}}
    curves = {}
    for name, overrides in variants.items():
        vcfg = RunConfig(cfg)
        vcfg.update(overrides)
        curves[name] = _train_one(vcfg, prepared, out / name, name)
    summary = {"compare": args.compare, "config_digest": cfg.digest(), "seed": cfg["seed"], "variants": curves}
    (out / "curves.json").write_text(_dump(summary), encoding="utf-8")
    names = list(curves)
    print(f"paired curves written to {out / 'curves.json'}")
    for a, b in zip(curves[names[0]]["history"], curves[names[1]]["history"]):
        key = "valid_mrr" if "valid_mrr" in a else "train_mrr"
        print(f"epoch {a['epoch']:3d}  {names[0]} {a[key]:.4f}  {names[1]} {b[key]:.4f}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    prepared = Prepared(args.data, model.code_vocab, model.query_vocab, model.config.max_query_len,
                        model.config.max_code_len)
    prepared.check_vocab(model)
    if args.pools:
        pools = load_pools(args.pools)
        seed = pools[0].seed if pools else None
    else:
        seed = args.pool_seed
        pools = prepared.pools(args.split, seed)
    report, results = evaluate(model, pools, prepared.encoded, ks=tuple(args.k))
    report.extra = {"checkpoint_id": ckpt.id, "split": None if args.pools else args.split,
                    "config_digest": ckpt.state.get("config_digest")}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_text(), encoding="utf-8")
    write_rankings(results, out / "rankings.jsonl")
    if not args.pools:
        save_pools(pools, out / "pools.txt", seed)
    sys.stdout.write(report.to_text())
    return 0


# ---------------------------------------------------------------------------
# index / search / inspect
# ---------------------------------------------------------------------------


def cmd_index(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    index = build_index(D.read_corpus(args.corpus), ckpt.model)
    save_index(index, args.out)
    print(f"indexed {len(index)} code(s), skipped {len(index.skipped)}, checkpoint {index.checkpoint_id} -> {args.out}")
    return 0


def cmd_search(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    result = search(args.query, load_index(args.index), ckpt.model, args.k)
    for cid, sim, text in result.hits:
        first = text.strip().splitlines()[0] if text.strip() else ""
        print(f"{cid}\t{sim:.6f}\t{first}")
    return 0


def inspect_attention(model: CoseaModel, query: str, code: str) -> dict:
    """Token-aligned attention weights for one query and one code snippet."""
    q_tokens = D.tokenize_query(query)[: model.config.max_query_len]
    c_tokens = D.tokenize_code(code)[: model.config.max_code_len]
    q_ids, q_mask = trim(*D.pad_ids(model.query_vocab.encode(q_tokens), model.config.max_query_len))
    c_ids, c_mask = trim(*D.pad_ids(model.code_vocab.encode(c_tokens), model.config.max_code_len))
    with no_grad():
        e_q, q_weights = model.encode_query(q_ids, q_mask)
        e_c, trace = model.encode_code(c_ids, c_mask)
    cos = float(e_q.values @ e_c.values / (np.linalg.norm(e_q.values) * np.linalg.norm(e_c.values)))
    return {
        "query": {"tokens": q_tokens, "weights": q_weights.tolist()},
        "code": {
            "tokens": c_tokens,
            "layers": [None if w is None else w.tolist() for w in trace.layers],
            "pooling": trace.pooling.tolist(),
        },
        "similarity": cos,
    }


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dump = inspect_attention(ckpt.model, args.query, args.code)
    dump["checkpoint_id"] = ckpt.id
    text = _dump(dump)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    ok, lines = run_selfcheck(seeds=args.seeds)
    print("\n".join(lines))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cosea", description="Semantic code search: train encoders, evaluate, index and query")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="tokenize, split and build vocabularies")
    p.add_argument("--corpus", required=True, help="JSON-lines file of {id, query, code}")
    p.add_argument("--out", required=True, help="output data directory")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.add_argument("--min-count", type=int, default=D.DEFAULT_MIN_COUNT)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the encoders")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    p.add_argument("--loss", choices=("minmax", "sampled"))
    p.add_argument("--no-layer-attention", action="store_true", help="train the variant without layer attention")
    p.add_argument("--compare", choices=("attention", "loss"),
                   help="train both variants from the same seeds and write paired curves")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank 50-candidate pools and report P@k, MRR, NDCG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="prepared data directory")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--pool-seed", type=int, default=0)
    p.add_argument("--pools", help="use an existing pools file instead of sampling")
    p.add_argument("-k", type=int, action="append", default=None, help="precision cutoffs (default 1, 5, 10)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("index", help="embed a corpus into a search index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="query an index")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("-k", type=int, default=10)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("inspect", help="dump attention weights for a query and a code snippet")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--code", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("selfcheck", help="gradient, metric and round-trip checks")
    p.add_argument("--seeds", type=int, default=100)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "k", None) is None and args.command == "evaluate":
        args.k = [1, 5, 10]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except (CoseaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
