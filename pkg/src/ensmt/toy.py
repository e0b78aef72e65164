"""Synthetic tasks and tiny policies for fast end-to-end checks.

``noisy_copy_task`` builds a two-"language" corpus where each source word
has a fixed target counterpart and target words are randomly corrupted
with a small probability, so a perfect copy is not a perfect score.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .bpe import MergeTable, Vocabulary, apply_bpe, build_vocab, learn_bpe
from .data import ParallelCorpus, encode_corpus, preprocess
from .model import ModelConfig, Seq2Seq
from .tensor import Graph, Tensor, parameter

SRC_SYLLABLES = ("ka", "lo", "mi", "su", "te", "ri")
TGT_SYLLABLES = ("ba", "do", "ne", "pu", "vi", "ze")


def _lexicon(syllables, n_words, rng):
    pairs = [a + b for a, b in itertools.product(syllables, repeat=2) if a != b]
    idx = rng.choice(len(pairs), size=n_words, replace=False)
    return [pairs[i] for i in sorted(idx)]


@dataclass
class ToyTask:
    train_src: list[str]
    train_tgt: list[str]
    valid_src: list[str]
    valid_tgt: list[str]
    table: MergeTable
    vocab: Vocabulary
    train: ParallelCorpus
    valid: ParallelCorpus

    def model_config(self, **kwargs) -> ModelConfig:
        base = dict(vocab_size=len(self.vocab), embed_dim=32, hidden_dim=64, encoder_layers=2,
                    dropout_rate=0.0, max_src_len=40, max_tgt_len=40, init_scale=0.3)
        base.update(kwargs)
        return ModelConfig(**base)

    def new_model(self, **kwargs) -> Seq2Seq:
        return Seq2Seq(self.model_config(**kwargs), vocab_hash=self.vocab.hash)


def _sentences(rng, n, src_words, mapping, tgt_words, noise, min_len, max_len):
    src_lines, tgt_lines = [], []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        words = [src_words[i] for i in rng.integers(0, len(src_words), size=length)]
        out = []
        for w in words:
            if rng.random() < noise:
                out.append(tgt_words[int(rng.integers(0, len(tgt_words)))])
            else:
                out.append(mapping[w])
        src_lines.append(" ".join(words))
        tgt_lines.append(" ".join(out))
    return src_lines, tgt_lines


def noisy_copy_task(n_train: int = 500, n_valid: int = 100, n_words: int = 15, noise: float = 0.05,
                    num_merges: int = 32, vocab_cap: int = 1000, min_len: int = 3, max_len: int = 7,
                    seed: int = 0) -> ToyTask:
    rng = np.random.default_rng(seed)
    src_words = _lexicon(SRC_SYLLABLES, n_words, rng)
    tgt_words = _lexicon(TGT_SYLLABLES, n_words, rng)
    mapping = dict(zip(src_words, tgt_words))
    tr_s, tr_t = _sentences(rng, n_train, src_words, mapping, tgt_words, noise, min_len, max_len)
    va_s, va_t = _sentences(rng, n_valid, src_words, mapping, tgt_words, noise, min_len, max_len)
    return build_task(tr_s, tr_t, va_s, va_t, num_merges, vocab_cap)


def copy_task(n_pairs: int = 20, n_symbols: int = 11, min_len: int = 3, max_len: int = 6, seed: int = 0) -> ToyTask:
    """Identity translation over single-letter words; no merges, so V = n_symbols + 4."""
    rng = np.random.default_rng(seed)
    letters = [chr(ord("a") + i) for i in range(n_symbols)]
    lines = []
    for _ in range(n_pairs):
        length = int(rng.integers(min_len, max_len + 1))
        lines.append(" ".join(letters[i] for i in rng.integers(0, n_symbols, size=length)))
    return build_task(lines, lines, lines, lines, num_merges=0, vocab_cap=1000)


def build_task(train_src, train_tgt, valid_src, valid_tgt, num_merges: int, vocab_cap: int) -> ToyTask:
    tokenized = [preprocess(s) for s in train_src + train_tgt]
    table = learn_bpe(tokenized, num_merges)
    vocab = build_vocab([apply_bpe(table, s) for s in tokenized], vocab_cap)
    train = encode_corpus(train_src, train_tgt, table, vocab)
    valid = encode_corpus(valid_src, valid_tgt, table, vocab)
    return ToyTask(list(train_src), list(train_tgt), list(valid_src), list(valid_tgt), table, vocab, train, valid)


class TabularPolicy:
    """Two-step autoregressive policy with free logits; enumerable outcomes.

    ``first`` holds the logits of token 1, row ``w`` of ``second`` the
    logits of token 2 given token 1 = ``w``.
    """

    def __init__(self, first, second):
        self.first = parameter(first, name="first")
        self.second = parameter(second, name="second")
        self.vocab_size = self.first.shape[0]

    @property
    def params(self) -> dict[str, Tensor]:
        return {"first": self.first, "second": self.second}

    def _probs(self, logits: np.ndarray) -> np.ndarray:
        e = np.exp(logits - logits.max())
        return e / e.sum()

    def prob(self, seq) -> float:
        a, b = seq
        return float(self._probs(self.first.data)[a] * self._probs(self.second.data[a])[b])

    def log_prob(self, g: Graph, seq) -> Tensor:
        """Recorded ``log p(seq)`` as a length-1 vector."""
        a, b = int(seq[0]), int(seq[1])
        V = self.vocab_size
        lp1 = g.pick(g.log_softmax(g.reshape(self.first, (1, V))), [a])
        lp2 = g.pick(g.log_softmax(g.gather_rows(self.second, [a])), [b])
        return g.add(lp1, lp2)

    def sample(self, rng: np.random.Generator) -> tuple[int, int]:
        a = int(rng.choice(self.vocab_size, p=self._probs(self.first.data)))
        b = int(rng.choice(self.vocab_size, p=self._probs(self.second.data[a])))
        return a, b

    def greedy(self) -> tuple[int, int]:
        a = int(np.argmax(self.first.data))
        return a, int(np.argmax(self.second.data[a]))

    def outcomes(self):
        return list(itertools.product(range(self.vocab_size), repeat=2))
