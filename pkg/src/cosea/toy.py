"""Synthetic query/code corpora for smoke runs and trend checks.

Each pair combines a few concepts; a concept has a fixed natural-language
word and a fixed code identifier, so queries and codes share structure
but not surface tokens.
"""

from __future__ import annotations

import itertools

import numpy as np

from .data import RawPair

CONCEPTS = [
    ("sort", "sorted"), ("reverse", "reversed"), ("list", "items"), ("dictionary", "mapping"),
    ("string", "text"), ("file", "fileHandle"), ("read", "readLines"), ("write", "writeAll"),
    ("random", "randomChoice"), ("record", "row"), ("database", "dbConn"), ("select", "query_set"),
    ("column", "colName"), ("value", "val"), ("json", "jsonBlob"), ("parse", "parseTree"),
    ("date", "dateTime"), ("format", "fmtSpec"), ("number", "numVal"), ("integer", "intVal"),
    ("split", "splitOn"), ("join", "joinWith"), ("url", "urlPath"), ("request", "httpReq"),
    ("image", "pixelBuf"), ("resize", "scaleTo"), ("thread", "worker"), ("lock", "mutex"),
    ("matrix", "ndArray"), ("multiply", "matMul"), ("count", "tally"), ("unique", "dedupe"),
    ("filter", "keepIf"), ("map", "applyEach"), ("class", "typeObj"), ("method", "boundFn"),
    ("exception", "errObj"), ("retry", "tryAgain"), ("socket", "sockFd"), ("timeout", "deadline"),
]

TEMPLATES = [
    ("how to {a} {b} with {c}", "def {A}_{B}(x):\n    return {C}.get(x)"),
    ("{a} the {b} of a {c}", "result = {A}({B}, {C})"),
    ("python {a} {b} {c}", "for k in {A}:\n    {B}[k] = {C}(k)"),
    ("best way to {a} {b} in {c}", "{A} = [{B}(v) for v in {C}]"),
]


def make_toy_corpus(n_pairs: int, seed: int = 0) -> list:
    """Deterministic corpus of ``n_pairs`` pairs with distinct concept combinations."""
    rng = np.random.default_rng(seed)
    combos = list(itertools.permutations(range(len(CONCEPTS)), 3))
    if n_pairs > len(combos):
        raise ValueError(f"at most {len(combos)} distinct pairs available")
    picks = rng.choice(len(combos), size=n_pairs, replace=False)
    pairs = []
    for pid, ci in enumerate(picks):
        combo = combos[ci]
        words = [CONCEPTS[i][0] for i in combo]
        idents = [CONCEPTS[i][1] for i in combo]
        q_tmpl, c_tmpl = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
        query = q_tmpl.format(a=words[0], b=words[1], c=words[2])
        code = c_tmpl.format(A=idents[0], B=idents[1], C=idents[2])
        pairs.append(RawPair(pid, query, code, "python"))
    return pairs
