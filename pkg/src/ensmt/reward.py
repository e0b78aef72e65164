"""Sentence- and corpus-level BLEU on surface word tokens.

Scores are in [0, 1].  Sentence BLEU applies add-one smoothing to any
n-gram order with zero matches; corpus BLEU pools counts and is
unsmoothed.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class RewardSpec:
    metric: str = "sentence_bleu"
    max_order: int = 4
    smoothing: str = "add1"
    # used by beam search only, never folded into the reward
    length_reward: float = 0.0

    def __post_init__(self):
        if self.metric != "sentence_bleu":
            raise ConfigError(f"unknown reward metric {self.metric!r}")
        if self.max_order < 1:
            raise ConfigError("max_order must be >= 1")
        if self.smoothing not in ("add1", "none"):
            raise ConfigError(f"unknown smoothing {self.smoothing!r}")
        if not math.isfinite(self.length_reward) or self.length_reward < 0:
            raise ConfigError("length_reward must be finite and non-negative")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def ngram_stats(candidate: Sequence[str], reference: Sequence[str], max_order: int = 4):
    """Clipped match counts and candidate n-gram totals per order."""
    matches, totals = [], []
    for n in range(1, max_order + 1):
        cand = _ngrams(candidate, n)
        ref = _ngrams(reference, n)
        matches.append(sum(min(c, ref[g]) for g, c in cand.items()))
        totals.append(max(len(candidate) - n + 1, 0))
    return matches, totals


def _brevity_penalty(cand_len: int, ref_len: int) -> float:
    return math.exp(min(0.0, 1.0 - ref_len / cand_len))


def sentence_bleu(candidate: Sequence[str], reference: Sequence[str], spec: RewardSpec | None = None) -> float:
    spec = spec or RewardSpec()
    if not reference:
        raise DataError("sentence_bleu needs a non-empty reference")
    if not candidate:
        return 0.0
    matches, totals = ngram_stats(candidate, reference, spec.max_order)
    log_p = 0.0
    for m, t in zip(matches, totals):
        if m == 0:
            if spec.smoothing == "none":
                return 0.0
            m, t = m + 1, t + 1
        log_p += math.log(m / t)
    return _brevity_penalty(len(candidate), len(reference)) * math.exp(log_p / spec.max_order)


def reward_batch(candidates, references, spec: RewardSpec | None = None) -> np.ndarray:
    if len(candidates) != len(references):
        raise DataError(f"{len(candidates)} candidates vs {len(references)} references")
    return np.array([sentence_bleu(c, r, spec) for c, r in zip(candidates, references)], dtype=np.float64)


def corpus_bleu(candidates, references, max_order: int = 4) -> float:
    if len(candidates) != len(references):
        raise DataError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise DataError("corpus_bleu needs at least one sentence")
    matches = [0] * max_order
    totals = [0] * max_order
    cand_len = ref_len = 0
    for c, r in zip(candidates, references):
        m, t = ngram_stats(c, r, max_order)
        for i in range(max_order):
            matches[i] += m[i]
            totals[i] += t[i]
        cand_len += len(c)
        ref_len += len(r)
    if cand_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_order
    return _brevity_penalty(cand_len, ref_len) * math.exp(log_p)
