import json

import numpy as np
import pytest

from prunecd.errors import FormatError
from prunecd.tokenizer import (
    BOS_ID,
    BpeTokenizer,
    ByteTokenizer,
    load_tokenizer,
)


class TestByteTokenizer:
    def test_hi_is_bos_plus_byte_values(self, byte_tok):
        assert byte_tok.encode("Hi") == [BOS_ID, 72, 105]

    def test_round_trip_random_byte_strings(self, byte_tok):
        rng = np.random.default_rng(11)
        for _ in range(100):
            raw = bytes(rng.integers(0, 256, size=rng.integers(0, 64)))
            ids = byte_tok.encode(raw, add_bos=False)
            assert byte_tok.decode_bytes(ids) == raw

    def test_round_trip_text(self, byte_tok):
        for text in ["", "hello world", "naïve café ☕", "tabs\tand\nnewlines"]:
            assert byte_tok.decode(byte_tok.encode(text)) == text

    def test_specials_dropped_on_decode(self, byte_tok):
        ids = [BOS_ID] + list(b"ok") + [byte_tok.eos_id]
        assert byte_tok.decode(ids) == "ok"

    def test_vocab_size(self, byte_tok):
        assert byte_tok.vocab_size == 259


@pytest.fixture
def toy_bpe(tmp_path):
    vocab = {t: i for i, t in enumerate(
        ["l", "o", "w", "e", "s", "t", "lo", "low", "es", "est", "lowest"]
    )}
    (tmp_path / "vocab.json").write_text(json.dumps(vocab))
    (tmp_path / "merges.txt").write_text(
        "#version: 0.2\nl o\nlo w\ne s\nes t\nlow est\n"
    )
    return tmp_path


class TestBpeTokenizer:
    def test_hand_traced_merge_sequence(self, toy_bpe):
        # l o w e s t -> lo w e s t -> low e s t -> low es t -> low est -> lowest
        tok = BpeTokenizer.from_files(toy_bpe / "vocab.json", toy_bpe / "merges.txt")
        assert tok.encode("lowest") == [tok.vocab["lowest"]]

    def test_partial_merges(self, toy_bpe):
        tok = BpeTokenizer.from_files(toy_bpe / "vocab.json", toy_bpe / "merges.txt")
        # "lowt": l o w t -> lo w t -> low t; no (low, t) rule exists
        assert tok.encode("lowt") == [tok.vocab["low"], tok.vocab["t"]]

    def test_decode_inverts_encode(self, toy_bpe):
        tok = BpeTokenizer.from_files(toy_bpe / "vocab.json", toy_bpe / "merges.txt")
        for text in ["lowest", "lowt", "slow"]:
            assert tok.decode(tok.encode(text)) == text

    def test_malformed_merges_line(self, tmp_path):
        (tmp_path / "vocab.json").write_text("{}")
        (tmp_path / "merges.txt").write_text("l o\nnot-a-pair\n")
        with pytest.raises(FormatError, match="merges.txt:2"):
            BpeTokenizer.from_files(tmp_path / "vocab.json", tmp_path / "merges.txt")

    def test_load_tokenizer_dispatch(self, toy_bpe):
        assert isinstance(load_tokenizer("byte"), ByteTokenizer)
        assert isinstance(load_tokenizer(toy_bpe), BpeTokenizer)
