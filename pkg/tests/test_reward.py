import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensmt.errors import ConfigError, DataError
from ensmt.reward import RewardSpec, corpus_bleu, reward_batch, sentence_bleu
from oracles import brute_corpus_bleu, brute_sentence_bleu

# computed by the brute-force scorer in oracles.py, then frozen:
# precisions 3/3, 2/2, 1/1, (0+1)/(0+1); brevity exp(1 - 4/3)
ABC_VS_ABCD = 0.7165313105737893


def test_identity_scores_one():
    assert sentence_bleu("a b c d e".split(), "a b c d e".split()) == 1.0


def test_zero_overlap_is_smoothed_floor():
    cand, ref = ["x", "y", "z"], ["a", "b", "c"]
    # orders 1..3 have zero matches over 3, 2, 1 n-grams; order 4 is empty
    floor = (1 / 4 * 1 / 3 * 1 / 2 * 1 / 1) ** 0.25
    assert sentence_bleu(cand, ref) == pytest.approx(floor, abs=1e-15)
    assert sentence_bleu(cand, ref, RewardSpec(smoothing="none")) == 0.0


def test_short_candidate_pinned():
    assert brute_sentence_bleu("a b c".split(), "a b c d".split()) == pytest.approx(ABC_VS_ABCD, abs=1e-15)
    assert sentence_bleu("a b c".split(), "a b c d".split()) == pytest.approx(ABC_VS_ABCD, abs=1e-15)
    assert ABC_VS_ABCD == pytest.approx(math.exp(-1 / 3), abs=1e-15)


def test_empty_candidate_and_reference():
    assert sentence_bleu([], ["a"]) == 0.0
    with pytest.raises(DataError):
        sentence_bleu(["a"], [])


def test_reward_batch_cases():
    pairs = [("a b".split(), "a b".split())] * 3
    assert reward_batch([c for c, _ in pairs], [r for _, r in pairs]).tolist() == [1.0, 1.0, 1.0]
    out = reward_batch([], [])
    assert out.shape == (0,)
    with pytest.raises(DataError):
        reward_batch([["a"]], [])


def test_reward_batch_is_elementwise_map():
    rng = np.random.default_rng(0)
    cands = [list(rng.choice(list("abcd"), size=rng.integers(1, 8))) for _ in range(30)]
    refs = [list(rng.choice(list("abcd"), size=rng.integers(1, 8))) for _ in range(30)]
    assert np.array_equal(reward_batch(cands, refs), np.array([sentence_bleu(c, r) for c, r in zip(cands, refs)]))


def test_corpus_bleu_cases():
    sents = ["a b c d".split(), "e f g h i".split()]
    assert corpus_bleu(sents, sents) == 1.0
    cand, ref = "a b c d e".split(), "a b c d e f".split()
    assert corpus_bleu([cand], [ref]) == pytest.approx(sentence_bleu(cand, ref, RewardSpec(smoothing="none")),
                                                       abs=1e-15)
    with pytest.raises(DataError):
        corpus_bleu([cand], [])


def test_corpus_pooling_differs_from_sentence_mean():
    cands = ["a b c d".split(), "x y".split()]
    refs = ["a b c d".split(), "p q".split()]
    pooled = corpus_bleu(cands, refs)
    mean = np.mean([sentence_bleu(c, r) for c, r in zip(cands, refs)])
    assert pooled == pytest.approx(brute_corpus_bleu(cands, refs), abs=1e-15)
    assert abs(pooled - mean) > 1e-3


def test_reward_spec_validation():
    with pytest.raises(ConfigError):
        RewardSpec(metric="meteor")
    with pytest.raises(ConfigError):
        RewardSpec(length_reward=-1.0)
    with pytest.raises(ConfigError):
        RewardSpec(max_order=0)


tokens = st.lists(st.sampled_from("abcde"), min_size=0, max_size=10)


@settings(max_examples=200, deadline=None)
@given(tokens, tokens.filter(bool))
def test_sentence_bleu_bounds_and_oracle(cand, ref):
    value = sentence_bleu(cand, ref)
    assert 0.0 <= value <= 1.0
    assert value == pytest.approx(brute_sentence_bleu(cand, ref), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(tokens, tokens), min_size=1, max_size=5))
def test_corpus_bleu_bounds(pairs):
    value = corpus_bleu([c for c, _ in pairs], [r for _, r in pairs])
    assert 0.0 <= value <= 1.0
