"""Corpus ingestion, batching and image-feature files."""

from __future__ import annotations

import logging
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bpe import BOS, EOS, PAD, MergeTable, Vocabulary, apply_bpe
from .errors import DataError

log = logging.getLogger(__name__)

# Punctuation normalisation table.  Applied before tokenization.
PUNCT_MAP = {
    "“": '"', "”": '"', "„": '"', "‟": '"', "«": '"', "»": '"',
    "″": '"', "''": '"', "``": '"',
    "‘": "'", "’": "'", "‚": "'", "‛": "'", "‹": "'", "›": "'",
    "´": "'", "`": "'", "′": "'",
    "–": "-", "—": "-", "‒": "-", "―": "-", "−": "-",
    "…": "...",
    " ": " ",
}
_PUNCT_RE = re.compile("|".join(re.escape(k) for k in sorted(PUNCT_MAP, key=len, reverse=True)))
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def preprocess(raw: str) -> list[str]:
    """Lowercase, normalise punctuation, split punctuation off words."""
    text = unicodedata.normalize("NFC", raw).lower()
    text = _PUNCT_RE.sub(lambda m: PUNCT_MAP[m.group(0)], text)
    return _TOKEN_RE.findall(text)


def preprocess_lines(lines: Sequence[str]) -> list[list[str]]:
    return [preprocess(line) for line in lines]


@dataclass
class ParallelCorpus:
    src: list[list[int]]
    tgt: list[list[int]]
    features: np.ndarray | None = None
    src_lang: str = "src"
    tgt_lang: str = "tgt"
    vocab_hash: str = ""
    origins: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise DataError(f"{len(self.src)} source vs {len(self.tgt)} target sentences")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != len(self.src):
                raise DataError(f"feature matrix {self.features.shape} does not align with {len(self.src)} sentences")
        if not self.origins:
            self.origins = [(self.src_lang, i) for i in range(len(self.src))]
        elif len(self.origins) != len(self.src):
            raise DataError("origins list does not align with sentences")

    def __len__(self) -> int:
        return len(self.src)

    def subset(self, idx) -> "ParallelCorpus":
        idx = [int(i) for i in idx]
        return ParallelCorpus(
            [self.src[i] for i in idx],
            [self.tgt[i] for i in idx],
            None if self.features is None else self.features[idx],
            self.src_lang,
            self.tgt_lang,
            self.vocab_hash,
            [self.origins[i] for i in idx],
        )


def encode_corpus(src_lines, tgt_lines, table: MergeTable, vocab: Vocabulary, features=None,
                  src_lang: str = "src", tgt_lang: str = "tgt", max_len: int | None = None) -> ParallelCorpus:
    """Preprocess, BPE-segment and id-encode line-aligned text.

    Pairs that come out empty, or longer than ``max_len`` subwords, are dropped
    (and the matching feature rows with them).
    """
    if len(src_lines) != len(tgt_lines):
        raise DataError(f"{len(src_lines)} source lines vs {len(tgt_lines)} target lines")
    if features is not None and len(features) != len(src_lines):
        raise DataError(f"{len(features)} feature rows vs {len(src_lines)} source lines")
    cache: dict = {}
    src, tgt, keep = [], [], []
    empty = too_long = 0
    for i, (s, t) in enumerate(zip(src_lines, tgt_lines)):
        s_ids = vocab.encode(apply_bpe(table, preprocess(s), cache))
        t_ids = vocab.encode(apply_bpe(table, preprocess(t), cache))
        if not s_ids or not t_ids:
            empty += 1
            continue
        if max_len is not None and (len(s_ids) > max_len or len(t_ids) + 2 > max_len):
            too_long += 1
            continue
        src.append(s_ids)
        tgt.append(t_ids)
        keep.append(i)
    if empty:
        log.info("dropped %d empty sentence pairs", empty)
    if too_long:
        log.info("dropped %d sentence pairs longer than %s subwords", too_long, max_len)
    feats = None if features is None else np.asarray(features, dtype=np.float64)[keep]
    return ParallelCorpus(src, tgt, feats, src_lang, tgt_lang, vocab.hash, [(src_lang, i) for i in keep])


@dataclass
class Batch:
    src: np.ndarray  # [B, S], PAD-padded
    src_lengths: np.ndarray
    tgt: np.ndarray  # [B, T], BOS ... EOS then PAD
    tgt_mask: np.ndarray  # [B, T] bool, False exactly on PAD
    features: np.ndarray | None
    indices: np.ndarray  # positions in the source corpus

    def __len__(self) -> int:
        return self.src.shape[0]

    @property
    def num_target_tokens(self) -> int:
        # BOS is an input, never a prediction target
        return int(self.tgt_mask[:, 1:].sum())


def collate(corpus: ParallelCorpus, idx: Sequence[int]) -> Batch:
    idx = np.asarray(idx, dtype=np.int64)
    srcs = [corpus.src[i] for i in idx]
    tgts = [[BOS] + corpus.tgt[i] + [EOS] for i in idx]
    s_len = np.array([len(s) for s in srcs], dtype=np.int64)
    t_len = np.array([len(t) for t in tgts], dtype=np.int64)
    S, T = int(s_len.max()), int(t_len.max())
    src = np.full((len(idx), S), PAD, dtype=np.int64)
    tgt = np.full((len(idx), T), PAD, dtype=np.int64)
    for r, (s, t) in enumerate(zip(srcs, tgts)):
        src[r, : len(s)] = s
        tgt[r, : len(t)] = t
    feats = None if corpus.features is None else corpus.features[idx]
    return Batch(src, s_len, tgt, tgt != PAD, feats, idx)


def make_batches(corpus: ParallelCorpus, batch_size: int, seed: int, sort_within: bool = True) -> list[Batch]:
    """One epoch of batches: a seeded shuffle, optionally length-bucketed."""
    if len(corpus) == 0:
        raise DataError("cannot batch an empty corpus")
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    if sort_within:
        lengths = np.array([len(corpus.src[i]) for i in order])
        order = order[np.argsort(lengths, kind="stable")]
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if sort_within:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [collate(corpus, c) for c in chunks]


def shuffle_mix(corpora: Sequence[ParallelCorpus], seed: int) -> ParallelCorpus:
    """Pool several source-language corpora that share a target side, then shuffle."""
    if not corpora:
        raise DataError("shuffle_mix needs at least one corpus")
    hashes = {c.vocab_hash for c in corpora}
    if len(hashes) != 1:
        raise DataError(f"corpora use different vocabularies: {sorted(h[:12] for h in hashes)}")
    tgt_langs = {c.tgt_lang for c in corpora}
    if len(tgt_langs) != 1:
        raise DataError(f"corpora have different target languages: {sorted(tgt_langs)}")
    with_feats = {c.features is not None for c in corpora}
    if len(with_feats) != 1:
        raise DataError("either all corpora carry image features or none do")

    src = [s for c in corpora for s in c.src]
    tgt = [t for c in corpora for t in c.tgt]
    origins = [o for c in corpora for o in c.origins]
    feats = np.concatenate([c.features for c in corpora]) if corpora[0].features is not None else None
    langs = sorted({c.src_lang for c in corpora})
    mixed = ParallelCorpus(src, tgt, feats, "+".join(langs), corpora[0].tgt_lang, corpora[0].vocab_hash, origins)
    return mixed.subset(np.random.default_rng(seed).permutation(len(mixed)))


# -- image feature files -------------------------------------------------------

def write_features(path: str | Path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise DataError(f"features must be a matrix, got shape {features.shape}")
    n, d = features.shape
    lines = [f"dim {d} count {n}"]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in features]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_features(path: str | Path, expected_count: int | None = None) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty feature file")
    m = re.fullmatch(r"dim (\d+) count (\d+)", lines[0].strip())
    if not m:
        raise DataError(f"{path}: bad header {lines[0]!r}, expected 'dim D count N'")
    dim, count = int(m.group(1)), int(m.group(2))
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != count:
        raise DataError(f"{path}: header says {count} rows, found {len(rows)}")
    if expected_count is not None and count != expected_count:
        raise DataError(f"{path}: expected {expected_count} feature rows, found {count}")
    out = np.empty((count, dim), dtype=np.float64)
    for i, ln in enumerate(rows):
        vals = ln.split()
        if len(vals) != dim:
            raise DataError(f"{path}: row {i + 1} has {len(vals)} values, expected {dim}")
        try:
            out[i] = [float(v) for v in vals]
        except ValueError as exc:
            raise DataError(f"{path}: row {i + 1}: {exc}") from exc
    if not np.isfinite(out).all():
        raise DataError(f"{path}: non-finite feature values")
    return out


def read_lines(path: str | Path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return text.splitlines()
