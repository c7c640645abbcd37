import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cosea import data as D
from cosea.data import RawPair
from cosea.errors import ConfigurationError, EmptySequenceError, ParseError, SkipRecord


class TestTokenizers:
    def test_query_plain(self):
        assert D.tokenize_query("Select random record") == ["select", "random", "record"]

    def test_query_punctuation(self):
        assert D.tokenize_query("django: select?") == ["django", "select"]

    def test_query_order(self):
        assert D.tokenize_query("sqlite column items value") == ["sqlite", "column", "items", "value"]

    def test_query_empty(self):
        with pytest.raises(EmptySequenceError):
            D.tokenize_query("?!  ...")

    def test_code_member_call(self):
        assert D.tokenize_code("Content.objects.all()") == ["content", ".", "objects", ".", "all", "(", ")"]

    def test_code_sql(self):
        assert D.tokenize_code("SELECT * FROM t") == ["select", "*", "from", "t"]

    def test_code_snake(self):
        assert D.tokenize_code("order_by") == ["order", "by"]

    def test_code_camel(self):
        assert D.tokenize_code("parseHTTPResponse2") == ["parse", "http", "response", "2"]

    def test_code_empty(self):
        with pytest.raises(EmptySequenceError):
            D.tokenize_code("   \n\t")

    @settings(max_examples=100, deadline=None)
    @given(st.text(min_size=1, max_size=40))
    def test_code_tokens_lowercase_and_nonblank(self, text):
        try:
            toks = D.tokenize_code(text)
        except EmptySequenceError:
            return
        assert all(tok and not tok.isspace() and tok == tok.lower() for tok in toks)
        assert "_" not in toks


class TestVocabulary:
    def test_min_count_one(self):
        v = D.build_vocab([["a", "a", "b"]], min_count=1)
        assert v.id("a") == 2 and v.id("b") == 3

    def test_min_count_two(self):
        v = D.build_vocab([["a", "a", "b"]], min_count=2)
        assert v.tokens == ["a"]
        assert v.encode(["b"]) == [D.UNK]

    def test_ties_lexicographic(self):
        v = D.build_vocab([["b", "a", "b", "a"]], min_count=1)
        assert v.tokens == ["a", "b"]

    def test_frequency_first(self):
        v = D.build_vocab([["z", "z", "z", "a"]], min_count=1)
        assert v.tokens == ["z", "a"]

    def test_reserved(self):
        v = D.build_vocab([["x"]], min_count=1)
        assert v.itos[:2] == ["<pad>", "<unk>"]

    def test_empty_corpus(self):
        with pytest.raises(ConfigurationError):
            D.build_vocab([], min_count=1)

    def test_save_load(self, tmp_path):
        v = D.build_vocab([["a", "b", "b", "c"]], min_count=1)
        v.save(tmp_path / "v.txt")
        assert D.TokenVocabulary.load(tmp_path / "v.txt") == v


class TestEncodePair:
    def setup_method(self):
        self.vocab = D.build_vocab([["a", "b", "c"]], min_count=1)

    def test_short_query_padding(self):
        enc = D.encode_pair(RawPair(0, "a b c", "a"), self.vocab, self.vocab)
        assert enc.query_ids.shape == (20,)
        assert list(enc.query_ids[:3]) == [2, 3, 4] and not enc.query_ids[3:].any()
        assert enc.query_len == 3 and enc.query_mask[:3].all() and not enc.query_mask[3:].any()

    def test_truncation(self):
        code = " ".join(["a"] * 250)
        enc = D.encode_pair(RawPair(0, "a", code), self.vocab, self.vocab)
        assert enc.code_len == 200 and enc.code_ids.shape == (200,)

    def test_oov(self):
        enc = D.encode_pair(RawPair(0, "zzz", "a"), self.vocab, self.vocab)
        assert enc.query_ids[0] == D.UNK

    def test_skip_signal(self):
        with pytest.raises(SkipRecord) as info:
            D.encode_pair(RawPair(7, "a", "  "), self.vocab, self.vocab)
        assert info.value.record_id == 7 and info.value.side == "code"

    def test_corpus_counts_skips(self):
        pairs = [RawPair(0, "a", "b"), RawPair(1, "?", "b"), RawPair(2, "a", "c")]
        encoded, skipped = D.encode_corpus(pairs, self.vocab, self.vocab)
        assert sorted(encoded) == [0, 2] and skipped == [1]


class TestSplit:
    def test_hundred(self):
        s = D.split_dataset(range(100), seed=0)
        assert (len(s.train), len(s.valid), len(s.test)) == (75, 10, 15)

    def test_twenty(self):
        s = D.split_dataset(range(20), seed=0)
        assert (len(s.train), len(s.valid), len(s.test)) == (15, 2, 3)

    def test_deterministic(self):
        assert D.split_dataset(range(50), 3) == D.split_dataset(range(50), 3)

    def test_seed_matters(self):
        assert D.split_dataset(range(50), 3).train != D.split_dataset(range(50), 4).train

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 500), st.integers(0, 10))
    def test_partition(self, n, seed):
        s = D.split_dataset(range(n), seed)
        parts = s.train + s.valid + s.test
        assert sorted(parts) == list(range(n))

    def test_save_load(self, tmp_path):
        s = D.split_dataset(range(30), 5)
        s.save(tmp_path)
        assert D.DatasetSplit.load(tmp_path) == s


class TestCorpusFile:
    def test_round_trip(self, tmp_path):
        pairs = [RawPair(0, "q one", "x = 1"), RawPair(3, "q two", "y()", "python")]
        D.write_corpus(pairs, tmp_path / "c.jsonl")
        assert D.read_corpus(tmp_path / "c.jsonl") == pairs

    def test_bad_json_line_number(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text(json.dumps({"id": 0, "query": "a", "code": "b"}) + "\n{oops\n")
        with pytest.raises(ParseError, match="line 2"):
            D.read_corpus(p)

    def test_duplicate_id(self, tmp_path):
        rec = json.dumps({"id": 1, "query": "a", "code": "b"})
        p = tmp_path / "c.jsonl"
        p.write_text(rec + "\n" + rec + "\n")
        with pytest.raises(ParseError, match="line 2"):
            D.read_corpus(p)


class TestPretrained:
    def write(self, tmp_path, text):
        p = tmp_path / "vec.txt"
        p.write_text(text)
        return p

    def test_header_three_by_four(self, tmp_path):
        vocab = D.TokenVocabulary(["a", "b", "c"])
        p = self.write(tmp_path, "3 4\na 1 2 3 4\nb 0 0 0 1\nc 1 1 1 1\n")
        emb, cov = D.load_pretrained_embeddings(p, vocab)
        assert emb.dim == 4 and len(emb.vectors) == 3 and cov == 1.0
        np.testing.assert_array_equal(emb.vectors["a"], [1, 2, 3, 4])

    def test_no_overlap(self, tmp_path):
        vocab = D.TokenVocabulary(["x"])
        emb, cov = D.load_pretrained_embeddings(self.write(tmp_path, "1 2\na 1 2\n"), vocab)
        assert cov == 0.0 and emb.missing == ["x"]

    def test_dim_mismatch(self, tmp_path):
        vocab = D.TokenVocabulary(["a"])
        with pytest.raises(ConfigurationError):
            D.load_pretrained_embeddings(self.write(tmp_path, "1 2\na 1 2\n"), vocab, dim=3)

    def test_malformed_line(self, tmp_path):
        vocab = D.TokenVocabulary(["a"])
        p = self.write(tmp_path, "2 2\na 1 2\nb 1\n")
        with pytest.raises(ParseError, match="line 3"):
            D.load_pretrained_embeddings(p, vocab)


def test_length_buckets():
    shares = D.length_bucket_shares([1, 20, 21, 150, 300])
    assert list(shares.values()) == pytest.approx([0.4, 0.2, 0.2, 0.2])
