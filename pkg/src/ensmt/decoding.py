"""Greedy, beam and ensemble decoding.

An ensemble's next-token distribution is the arithmetic mean of the
members' softmax outputs (probabilities, not logits).  Beam scores are
summed log-probabilities of that mean plus a per-token length reward.
Ties anywhere resolve to the lowest token id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bpe import BOS, EOS, MergeTable, Vocabulary, apply_bpe, detokenize
from .data import load_features, preprocess, read_lines
from .errors import ConfigError, DataError
from .model import DecoderState, EncoderOutput, Seq2Seq, load_checkpoint
from .reward import corpus_bleu
from .tensor import Graph, constant

log = logging.getLogger(__name__)


@dataclass
class EnsembleSpec:
    members: list[Seq2Seq]
    beam: int = 5
    length_reward: float = 0.0
    max_len: int = 100

    def __post_init__(self):
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")
        hashes = {m.vocab_hash for m in self.members}
        if len(hashes) != 1:
            raise ConfigError(f"ensemble members disagree on vocabulary hash: {sorted(h[:12] for h in hashes)}")
        sizes = {m.config.vocab_size for m in self.members}
        if len(sizes) != 1:
            raise ConfigError(f"ensemble members disagree on vocabulary size: {sorted(sizes)}")
        if self.beam < 1:
            raise ConfigError("beam must be >= 1")
        if self.length_reward < 0 or not np.isfinite(self.length_reward):
            raise ConfigError("length reward must be finite and >= 0")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")

    @classmethod
    def from_checkpoints(cls, paths: Sequence[str | Path], **kwargs) -> "EnsembleSpec":
        members = [load_checkpoint(p) for p in paths]
        return cls(members, **kwargs)

    @property
    def vocab_hash(self) -> str:
        return self.members[0].vocab_hash

    @property
    def needs_features(self) -> bool:
        return any(m.multimodal for m in self.members)


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    states: list[DecoderState] | None = field(default=None, repr=False)

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS

    @property
    def output(self) -> list[int]:
        return self.tokens[:-1] if self.finished else list(self.tokens)


@dataclass
class BeamResult:
    best: Hypothesis
    kbest: list[Hypothesis]
    # False when no hypothesis reached EOS before max_len
    complete: bool


def _member_image(model: Seq2Seq, img, rows: int):
    if not model.multimodal:
        return None
    if img is None:
        raise DataError("a multimodal ensemble member needs image features")
    img = np.asarray(img, dtype=np.float64).reshape(1, -1)
    return constant(np.repeat(img, rows, axis=0))


def _start(members: Sequence[Seq2Seq], src: Sequence[int], img):
    """Encode one sentence with every member and build the initial states."""
    g = Graph(record=False)
    encs, states = [], []
    for m in members:
        enc = m.encode(g, [list(src)])
        encs.append(enc)
        states.append(m.init_decoder(g, enc, _member_image(m, img, 1)))
    return encs, states


def ensemble_step(members: Sequence[Seq2Seq], states: Sequence[DecoderState], prev_tokens,
                  encs: Sequence[EncoderOutput]) -> tuple[np.ndarray, list[DecoderState]]:
    """Average the members' next-token distributions."""
    g = Graph(record=False)
    probs, new_states = [], []
    for m, st, enc in zip(members, states, encs):
        logits, st2, _ = m.decode_step(g, st, prev_tokens, enc)
        probs.append(g.softmax(logits).data)
        new_states.append(st2)
    # the mean of identical rows is the row itself; floating-point averaging is not
    if all(np.array_equal(probs[0], p) for p in probs[1:]):
        return probs[0], new_states
    return np.mean(np.stack(probs), axis=0), new_states


def greedy_decode(spec: EnsembleSpec, src: Sequence[int], img=None, return_score: bool = False):
    """Argmax decoding; returns the token ids without the final EOS."""
    members = spec.members
    encs, states = _start(members, src, img)
    prev = np.array([BOS])
    out: list[int] = []
    score = 0.0
    for _ in range(spec.max_len):
        probs, states = ensemble_step(members, states, prev, encs)
        tok = int(np.argmax(probs[0]))
        score += float(np.log(probs[0, tok])) + spec.length_reward
        if tok == EOS:
            break
        out.append(tok)
        prev = np.array([tok])
    return (out, score) if return_score else out


def _stack_states(states: Sequence[DecoderState]) -> DecoderState:
    return DecoderState(
        constant(np.concatenate([s.h.data for s in states])),
        constant(np.concatenate([s.c.data for s in states])),
        constant(np.concatenate([s.context.data for s in states])),
        states[0].step,
    )


def beam_decode(spec: EnsembleSpec, src: Sequence[int], img=None) -> BeamResult:
    members = spec.members
    encs1, states1 = _start(members, src, img)
    lam = spec.length_reward
    active = [Hypothesis([], 0.0, states1)]
    finished: list[Hypothesis] = []
    enc_cache: dict[int, list[EncoderOutput]] = {1: encs1}

    for step in range(spec.max_len):
        K = len(active)
        if K not in enc_cache:
            enc_cache[K] = [e.take(np.zeros(K, dtype=np.int64)) for e in encs1]
        states = [_stack_states([h.states[i] for h in active]) for i in range(len(members))]
        prev = np.array([h.tokens[-1] if h.tokens else BOS for h in active])
        probs, new_states = ensemble_step(members, states, prev, enc_cache[K])
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        scores = np.array([h.score for h in active])[:, None] + logp + lam
        V = scores.shape[1]
        flat = scores.reshape(-1)
        # stable sort on the negated score: ties go to the earlier hypothesis, then lower id
        order = np.argsort(-flat, kind="stable")[: spec.beam]
        next_active = []
        for idx in order:
            if not np.isfinite(flat[idx]):
                continue
            k, tok = divmod(int(idx), V)
            hyp_states = [ns.take([k]) for ns in new_states]
            hyp = Hypothesis(active[k].tokens + [tok], float(flat[idx]), hyp_states)
            (finished if tok == EOS else next_active).append(hyp)
        active = next_active
        if not active:
            break
        if finished:
            best_done = max(h.score for h in finished)
            # log-probs are <= 0, so an active hypothesis gains at most lam per remaining step
            bound = max(h.score for h in active) + lam * (spec.max_len - step - 1)
            if bound <= best_done:
                break

    complete = bool(finished)
    pool = finished if complete else active
    ranked = sorted(pool, key=lambda h: -h.score)[: spec.beam]
    return BeamResult(ranked[0], ranked, complete)


def decode(spec: EnsembleSpec, src: Sequence[int], img=None) -> list[int]:
    if spec.beam == 1 and spec.length_reward == 0.0:
        return greedy_decode(spec, src, img)
    return beam_decode(spec, src, img).best.output


def translate_corpus(spec: EnsembleSpec, source_path, output_path, table: MergeTable, vocab: Vocabulary,
                     features_path=None, reference_path=None) -> dict:
    """Translate a text file line by line; optionally score against references."""
    if vocab.hash != spec.vocab_hash:
        raise ConfigError("vocabulary file does not match the checkpoints' vocabulary hash")
    lines = read_lines(source_path)
    feats = None
    if features_path is not None:
        feats = load_features(features_path, expected_count=len(lines))
    elif spec.needs_features:
        raise DataError("multimodal ensemble members need an image-feature file")
    refs = None
    if reference_path is not None:
        refs = read_lines(reference_path)
        if len(refs) != len(lines):
            raise DataError(f"{len(refs)} reference lines vs {len(lines)} source lines")

    max_src = min(m.config.max_src_len for m in spec.members)
    cache: dict = {}
    outputs: list[list[str]] = []
    truncated = empty = 0
    for i, line in enumerate(lines):
        ids = vocab.encode(apply_bpe(table, preprocess(line), cache))
        if not ids:
            empty += 1
            outputs.append([])
            continue
        if len(ids) > max_src:
            truncated += 1
            ids = ids[:max_src]
        out = decode(spec, ids, None if feats is None else feats[i])
        outputs.append(detokenize(vocab.decode(out)))
    if truncated:
        log.info("truncated %d source sentences to %d subwords", truncated, max_src)
    if empty:
        log.info("%d source lines were empty after preprocessing", empty)
    Path(output_path).write_text("".join(" ".join(w) + "\n" for w in outputs), encoding="utf-8")

    report = {"sentences": len(lines)}
    if refs is not None and lines:
        report["bleu"] = corpus_bleu(outputs, [preprocess(r) for r in refs])
    return report
