"""Vocabulary construction, Unicode cleaning, label codec, and corpus
statistics (word-length moments and character n-gram tables)."""
from __future__ import annotations

import hashlib
import math
import unicodedata
from dataclasses import dataclass, field

from .errors import BadOrder, EmptyCorpus, InvalidEncoding, OovCodepoint

ZERO_WIDTH = {"​", "‌", "‍", "﻿"}


def clean_text(s: str) -> str:
    """NFC-normalize, then drop zero-width and unassigned/private-use
    codepoints. Viramas/Halanta and other combining marks are preserved.
    Idempotent."""
    if not isinstance(s, str):
        raise InvalidEncoding(f"expected str, got {type(s).__name__}")
    s = unicodedata.normalize("NFC", s)
    out = []
    for ch in s:
        if ch in ZERO_WIDTH:
            continue
        if unicodedata.category(ch) in ("Cn", "Co", "Cs"):
            continue
        out.append(ch)
    return "".join(out)


@dataclass(frozen=True)
class LabelSeq:
    """Class-id encoding of a word; ids are in [1, C], 0 is the CTC blank."""

    ids: tuple
    text: str


class Vocabulary:
    """Ordered codepoint inventory; class i maps to codepoints[i - 1]."""

    def __init__(self, codepoints):
        cps = list(codepoints)
        if len(set(cps)) != len(cps):
            raise ValueError("duplicate codepoints in vocabulary")
        for cp in cps:
            if clean_text(cp) != cp:
                raise ValueError(f"codepoint {cp!r} does not survive cleaning")
        self.codepoints = cps
        self._index = {cp: i + 1 for i, cp in enumerate(cps)}

    def __len__(self):
        return len(self.codepoints)

    def __contains__(self, cp):
        return cp in self._index

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        for cp in self.codepoints:
            h.update(cp.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()

    def encode(self, s: str) -> LabelSeq:
        cleaned = clean_text(s)
        ids = []
        for ch in cleaned:
            if ch not in self._index:
                raise OovCodepoint(f"codepoint {ch!r} (U+{ord(ch):04X}) not in vocabulary")
            ids.append(self._index[ch])
        return LabelSeq(ids=tuple(ids), text=cleaned)

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            if not 1 <= i <= len(self.codepoints):
                raise OovCodepoint(f"class id {i} out of range [1, {len(self.codepoints)}]")
            out.append(self.codepoints[i - 1])
        return "".join(out)


def build_vocab(corpus) -> Vocabulary:
    """Sorted-by-codepoint inventory of every cleaned corpus codepoint."""
    seen = set()
    for word in corpus:
        seen.update(clean_text(word))
    if not seen:
        raise EmptyCorpus("corpus is empty after cleaning")
    return Vocabulary(sorted(seen))


# ---------------------------------------------------------------------------
# corpus statistics

# Moving-average window used when plotting the full distribution, per order.
NGRAM_SMOOTHING = {1: 10, 2: 100, 3: 1000, 4: 1000, 5: 1000}


@dataclass
class NgramTable:
    n: int
    counts: dict = field(default_factory=dict)

    def total(self) -> int:
        return sum(self.counts.values())


def ngram_table(corpus, n: int) -> NgramTable:
    """Within-word sliding-window n-gram counts (no cross-word windows)."""
    if not 1 <= n <= 5:
        raise BadOrder(f"n-gram order must be in [1, 5], got {n}")
    counts = {}
    for word in corpus:
        w = clean_text(word)
        for i in range(len(w) - n + 1):
            gram = w[i : i + n]
            counts[gram] = counts.get(gram, 0) + 1
    return NgramTable(n=n, counts=counts)


def top_k(table: NgramTable, k: int):
    """Top-k (ngram, count) by count desc; ties broken by codepoint order."""
    return sorted(table.counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


@dataclass
class CorpusStats:
    words: int
    mean: float
    std: float


def corpus_stats(corpus) -> CorpusStats:
    """Mean and population standard deviation of cleaned word lengths."""
    lengths = [len(clean_text(w)) for w in corpus]
    if not lengths:
        raise EmptyCorpus("corpus is empty")
    n = len(lengths)
    mu = sum(lengths) / n
    var = sum((l - mu) ** 2 for l in lengths) / n
    return CorpusStats(words=n, mean=mu, std=math.sqrt(var))


def ngram_tsv(table: NgramTable) -> str:
    lines = [f"{gram}\t{cnt}" for gram, cnt in top_k(table, len(table.counts))]
    return "\n".join(lines) + ("\n" if lines else "")


def stats_tsv(stats: CorpusStats) -> str:
    return f"{stats.words}\t{stats.mean:.2f}\t{stats.std:.2f}\n"
