"""Tokenizers: a byte-level reference tokenizer and a BPE tokenizer.

The byte-level tokenizer maps ids 0-255 to raw byte values and defines
BOS/EOS/PAD specials, giving a 259-token vocabulary; decode(encode(s)) == s
for arbitrary byte strings. The BPE tokenizer loads ``vocab.json`` plus
``merges.txt`` (one merge pair per line, rank order) and applies merges
greedily lowest-rank-first, using the usual byte-to-unicode indirection so
arbitrary bytes round-trip through the merge table.
"""

from __future__ import annotations

import json
import re
from functools import lru_cache
from pathlib import Path

from .errors import FormatError

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258

BYTE_VOCAB_SIZE = 259

# Pre-tokenization pattern: contractions, letter runs, digit runs, symbol runs,
# whitespace (the common byte-level BPE splitting convention).
_PRETOKEN_RE = re.compile(
    r"'s|'t|'re|'ve|'m|'ll|'d| ?[^\W\d_]+| ?\d+| ?[^\s\w]+|\s+(?!\S)|\s+"
)


class ByteTokenizer:
    """Reference tokenizer over raw bytes with BOS/EOS/PAD specials."""

    vocab_size = BYTE_VOCAB_SIZE
    bos_id = BOS_ID
    eos_id = EOS_ID
    pad_id = PAD_ID

    def encode(self, text: str | bytes, add_bos: bool = True) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        ids = list(data)
        return [BOS_ID] + ids if add_bos else ids

    def decode_bytes(self, ids: list[int]) -> bytes:
        return bytes(i for i in ids if i < 256)

    def decode(self, ids: list[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")


@lru_cache(maxsize=1)
def _bytes_to_unicode() -> dict[int, str]:
    """Invertible byte -> printable-unicode map used by byte-level BPE vocabularies."""
    printable = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    chars = printable[:]
    n = 0
    for b in range(256):
        if b not in printable:
            printable.append(b)
            chars.append(256 + n)
            n += 1
    return dict(zip(printable, (chr(c) for c in chars)))


class BpeTokenizer:
    """Byte-level BPE over a vocab.json + merges.txt pair."""

    def __init__(self, vocab: dict[str, int], merges: list[tuple[str, str]]):
        self.vocab = dict(vocab)
        self.inv_vocab = {i: t for t, i in self.vocab.items()}
        self.ranks = {pair: r for r, pair in enumerate(merges)}
        self.byte_to_uni = _bytes_to_unicode()
        self.uni_to_byte = {u: b for b, u in self.byte_to_uni.items()}
        self.vocab_size = max(self.vocab.values()) + 1
        self.eos_id = self.vocab.get("<|endoftext|>")
        self.bos_id = self.eos_id
        self._cache: dict[str, list[str]] = {}

    @classmethod
    def from_files(cls, vocab_path: str | Path, merges_path: str | Path) -> "BpeTokenizer":
        with open(vocab_path, encoding="utf-8") as f:
            vocab = json.load(f)
        if not isinstance(vocab, dict):
            raise FormatError(f"{vocab_path}: vocab.json must be a token->id object")
        merges: list[tuple[str, str]] = []
        with open(merges_path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line or line.startswith("#version"):
                    continue
                parts = line.split(" ")
                if len(parts) != 2 or not parts[0] or not parts[1]:
                    raise FormatError(
                        f"{merges_path}:{lineno}: expected 'left right', got {line!r}"
                    )
                merges.append((parts[0], parts[1]))
        return cls(vocab, merges)

    def _merge_word(self, word: str) -> list[str]:
        """Greedy BPE: repeatedly apply the lowest-rank merge present in the word."""
        if word in self._cache:
            return self._cache[word]
        symbols = list(word)
        while len(symbols) > 1:
            pairs = {(symbols[i], symbols[i + 1]) for i in range(len(symbols) - 1)}
            best = min(pairs, key=lambda p: self.ranks.get(p, float("inf")))
            if best not in self.ranks:
                break
            merged: list[str] = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == best:
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        self._cache[word] = symbols
        return symbols

    def encode(self, text: str, add_bos: bool = False) -> list[int]:
        ids: list[int] = []
        if add_bos and self.bos_id is not None:
            ids.append(self.bos_id)
        for chunk in _PRETOKEN_RE.findall(text):
            mapped = "".join(self.byte_to_uni[b] for b in chunk.encode("utf-8"))
            for token in self._merge_word(mapped):
                if token not in self.vocab:
                    raise FormatError(f"BPE produced token {token!r} missing from vocab")
                ids.append(self.vocab[token])
        return ids

    def decode(self, ids: list[int]) -> str:
        text = "".join(self.inv_vocab[i] for i in ids if i in self.inv_vocab)
        data = bytes(self.uni_to_byte[ch] for ch in text if ch in self.uni_to_byte)
        return data.decode("utf-8", errors="replace")


def load_tokenizer(spec: str | Path) -> ByteTokenizer | BpeTokenizer:
    """Return the byte tokenizer for "byte", else load BPE files from a directory."""
    if str(spec) == "byte":
        return ByteTokenizer()
    root = Path(spec)
    return BpeTokenizer.from_files(root / "vocab.json", root / "merges.txt")
