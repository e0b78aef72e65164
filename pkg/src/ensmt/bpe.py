"""Joint byte-pair encoding and the shared vocabulary.

Words are split into characters with an end-of-word marker glued to the
final character (``low -> l o w</w>``), so a merged symbol ending in the
marker is always a word ending.  Pair-count ties go to the
lexicographically smallest pair.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError

EOW = "</w>"

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>")


def word_symbols(word: str) -> tuple[str, ...]:
    if not word:
        return ()
    return tuple(word[:-1]) + (word[-1] + EOW,)


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str], merged: str) -> tuple[str, ...]:
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


@dataclass(frozen=True)
class MergeTable:
    merges: tuple[tuple[str, str], ...] = ()
    rank: dict[tuple[str, str], int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.rank:
            object.__setattr__(self, "rank", {p: i for i, p in enumerate(self.merges)})

    def __len__(self) -> int:
        return len(self.merges)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MergeTable":
        merges = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split(" ")
            if len(parts) != 2 or not all(parts):
                raise DataError(f"{path}:{lineno}: expected two space-separated symbols")
            merges.append((parts[0], parts[1]))
        return cls(tuple(merges))


def learn_bpe(corpus: Iterable[Sequence[str]], num_merges: int) -> MergeTable:
    """Learn up to ``num_merges`` merges from tokenized sentences.

    Stops early once no adjacent pair occurs at least twice.
    """
    word_freq: Counter[str] = Counter()
    for sentence in corpus:
        word_freq.update(w for w in sentence if w)
    if not word_freq:
        raise DataError("cannot learn BPE from an empty corpus")

    vocab = {word_symbols(w): c for w, c in word_freq.items()}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: Counter[tuple[str, str]] = Counter()
        for symbols, count in vocab.items():
            for a, b in zip(symbols, symbols[1:]):
                pairs[a, b] += count
        if not pairs:
            break
        best_count = max(pairs.values())
        if best_count < 2:
            break
        best = min(p for p, c in pairs.items() if c == best_count)
        merged = best[0] + best[1]
        merges.append(best)
        new_vocab: dict[tuple[str, ...], int] = {}
        for symbols, count in vocab.items():
            key = _merge_word(symbols, best, merged)
            new_vocab[key] = new_vocab.get(key, 0) + count
        vocab = new_vocab
    return MergeTable(tuple(merges))


def segment_word(table: MergeTable, word: str, cache: dict | None = None) -> tuple[str, ...]:
    if cache is not None and word in cache:
        return cache[word]
    symbols = word_symbols(word)
    rank = table.rank
    while len(symbols) > 1:
        candidates = [(rank[p], p) for p in zip(symbols, symbols[1:]) if p in rank]
        if not candidates:
            break
        _, pair = min(candidates)
        symbols = _merge_word(symbols, pair, pair[0] + pair[1])
    if cache is not None:
        cache[word] = symbols
    return symbols


def apply_bpe(table: MergeTable, sentence: Sequence[str], cache: dict | None = None) -> list[str]:
    out: list[str] = []
    for word in sentence:
        out.extend(segment_word(table, word, cache))
    return out


def detokenize(subwords: Sequence[str]) -> list[str]:
    """Undo :func:`apply_bpe`: glue subwords and split at end-of-word markers.

    A trailing fragment without a marker (a truncated decode) is kept as
    a word of its own.
    """
    words = []
    current = ""
    for piece in subwords:
        if piece.endswith(EOW):
            words.append(current + piece[: -len(EOW)])
            current = ""
        else:
            current += piece
    if current:
        words.append(current)
    return words


class Vocabulary:
    """Bidirectional token/id map with the four reserved specials first."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise DataError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def encode(self, subwords: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in subwords]

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_specials and i < len(SPECIALS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(corpus: Iterable[Sequence[str]], cap: int) -> Vocabulary:
    """Keep the ``cap - 4`` most frequent subwords; ties break lexicographically."""
    if cap < 5:
        raise DataError(f"vocabulary cap must be at least 5, got {cap}")
    counts: Counter[str] = Counter()
    for sentence in corpus:
        counts.update(sentence)
    for s in SPECIALS:
        counts.pop(s, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(SPECIALS) + [t for t, _ in ranked[: cap - len(SPECIALS)]])
