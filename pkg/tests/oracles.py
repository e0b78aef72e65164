"""Independent reference implementations used only by the tests.

Written without reusing any package internals so that agreement with the
package is evidence rather than tautology.
"""

import math

import numpy as np


def brute_ngrams(tokens, n):
    """All n-grams as a list (with repeats), by explicit slicing."""
    out = []
    for i in range(len(tokens)):
        if i + n <= len(tokens):
            out.append(tuple(tokens[i:i + n]))
    return out


def brute_clipped(cand, ref, n):
    cand_grams = brute_ngrams(cand, n)
    ref_grams = brute_ngrams(ref, n)
    matched = 0
    for gram in set(cand_grams):
        matched += min(cand_grams.count(gram), ref_grams.count(gram))
    return matched, len(cand_grams)


def brute_sentence_bleu(cand, ref, max_order=4):
    if not cand:
        return 0.0
    product = 1.0
    for n in range(1, max_order + 1):
        m, t = brute_clipped(cand, ref, n)
        if m == 0:
            m, t = 1, t + 1
        product *= m / t
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * product ** (1.0 / max_order)


def brute_corpus_bleu(cands, refs, max_order=4):
    m_tot = [0] * max_order
    t_tot = [0] * max_order
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    for c, r in zip(cands, refs):
        for n in range(1, max_order + 1):
            m, t = brute_clipped(c, r, n)
            m_tot[n - 1] += m
            t_tot[n - 1] += t
    if c_len == 0 or 0 in m_tot:
        return 0.0
    product = 1.0
    for m, t in zip(m_tot, t_tot):
        product *= m / t
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return bp * product ** (1.0 / max_order)


def sequential_merge_segment(word, merges, marker="</w>"):
    """Segment by replaying every merge rule once, in learned order."""
    symbols = list(word[:-1]) + [word[-1] + marker]
    for a, b in merges:
        i = 0
        out = []
        while i < len(symbols):
            if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
                out.append(a + b)
                i += 2
            else:
                out.append(symbols[i])
                i += 1
        symbols = out
    return symbols


def most_frequent_pair(words, marker="</w>"):
    """Exhaustive adjacent-pair count over a word list (with repeats)."""
    counts = {}
    for w in words:
        syms = list(w[:-1]) + [w[-1] + marker]
        for i in range(len(syms) - 1):
            key = (syms[i], syms[i + 1])
            counts[key] = counts.get(key, 0) + 1
    best = max(counts.values())
    return sorted(k for k, v in counts.items() if v == best)[0], best


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_step(W, b, x, h, c):
    """One LSTM step, gate order input/forget/output/candidate, W: [(in+H) x 4H]."""
    H = h.shape[-1]
    z = np.concatenate([x, h], axis=-1) @ W + b
    i, f, o, u = (z[..., k * H:(k + 1) * H] for k in range(4))
    c_new = sigmoid(f) * c + sigmoid(i) * np.tanh(u)
    return sigmoid(o) * np.tanh(c_new), c_new
