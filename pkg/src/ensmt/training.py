"""Cross-entropy, scheduled-sampling and self-critical REINFORCE training.

All three regimes share one SGD loop (:func:`train`); they differ only in
the loss built per batch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bpe import BOS, EOS, Vocabulary, detokenize
from .data import Batch, ParallelCorpus, make_batches
from .decoding import EnsembleSpec, greedy_decode
from .errors import ConfigError, DataError, NonFiniteError
from .model import Seq2Seq, save_checkpoint
from .reward import RewardSpec, corpus_bleu, sentence_bleu
from .tensor import Graph, Tensor, constant

log = logging.getLogger(__name__)

REGIMES = ("CE", "SS", "RL")

ToWords = Callable[[Sequence[int]], list[str]]


def ids_as_words(ids: Sequence[int]) -> list[str]:
    return [str(int(i)) for i in ids]


def surface_words(vocab: Vocabulary) -> ToWords:
    """Map model ids to detokenized surface words (BPE undone)."""
    return lambda ids: detokenize(vocab.decode(ids))


@dataclass
class TrainConfig:
    regime: str = "CE"
    epochs: int = 10
    batch_size: int = 50
    learning_rate: float = 1.0
    optimizer: str = "sgd"
    # multiply the rate by lr_decay once per epoch from epoch decay_start on; 1.0 = constant
    lr_decay: float = 1.0
    decay_start: int = 0
    dropout: float | None = None  # None keeps the model's own rate
    grad_clip_norm: float = 5.0
    seed: int = 0
    ss_step: float = 0.05
    ss_period: int = 5
    ss_cap: float = 0.25
    reward: RewardSpec = field(default_factory=RewardSpec)
    sort_batches: bool = True
    max_decode_len: int = 100

    def __post_init__(self):
        self.regime = self.regime.upper()
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.optimizer != "sgd":
            raise ConfigError("only plain SGD is supported")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0.0 <= self.ss_cap <= 1.0:
            raise ConfigError("ss_cap must lie in [0, 1]")
        if self.ss_period < 1:
            raise ConfigError("ss_period must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 < self.lr_decay <= 1.0 or self.decay_start < 0:
            raise ConfigError("lr_decay must lie in (0, 1] and decay_start must be >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** max(0, epoch - self.decay_start + 1)


def epsilon_at(epoch: int, step: float = 0.05, period: int = 5, cap: float = 0.25) -> float:
    """Scheduled-sampling probability for a zero-based epoch."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    # rounding keeps 3 * 0.05 from printing as 0.15000000000000002
    return min(cap, round(step * (epoch // period), 12))


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row by inverse-CDF sampling."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def _image_input(model: Seq2Seq, batch: Batch):
    if not model.multimodal:
        return None
    if batch.features is None:
        raise DataError("multimodal model trained on a corpus without image features")
    return constant(batch.features)


@dataclass
class SSTrace:
    """Inputs actually fed to the decoder and the Bernoulli draws behind them."""
    fed: list[np.ndarray] = field(default_factory=list)
    used_model: list[np.ndarray] = field(default_factory=list)


def _forced_loss(model: Seq2Seq, g: Graph, batch: Batch, choose_next, dropout_rng=None) -> Tensor:
    n_tokens = batch.num_target_tokens
    if n_tokens == 0:
        raise DataError("batch has no target tokens")
    enc = model.encode(g, batch.src, batch.src_lengths, dropout_rng)
    state = model.init_decoder(g, enc, _image_input(model, batch))
    T = batch.tgt.shape[1]
    prev = batch.tgt[:, 0]
    total = None
    for t in range(1, T):
        logits, state, _ = model.decode_step(g, state, prev, enc, dropout_rng)
        logp = g.log_softmax(logits)
        mask = constant(batch.tgt_mask[:, t].astype(np.float64))
        term = g.sum(g.mul(g.neg(g.pick(logp, batch.tgt[:, t])), mask))
        total = term if total is None else g.add(total, term)
        if t < T - 1:
            prev = choose_next(t, logp.data)
    return g.mul(total, 1.0 / n_tokens)


def ce_loss(model: Seq2Seq, batch: Batch, teacher_forcing: bool = True, graph: Graph | None = None,
            dropout_rng=None) -> Tensor:
    """Mean token negative log-likelihood over non-PAD targets.

    Without teacher forcing the decoder consumes its own argmax predictions.
    """
    g = graph if graph is not None else Graph()

    def choose(t, logp):
        return batch.tgt[:, t] if teacher_forcing else np.argmax(logp, axis=1)

    return _forced_loss(model, g, batch, choose, dropout_rng)


def ss_loss(model: Seq2Seq, batch: Batch, epsilon: float, rng: np.random.Generator, graph: Graph | None = None,
            dropout_rng=None, trace: SSTrace | None = None) -> Tensor:
    """Scheduled-sampling loss.

    Each decoder input after BOS is, independently per token, the model's
    sample from the previous step's distribution with probability
    ``epsilon``, else the ground-truth token.  Targets stay ground truth
    and no gradient flows through the choice.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError(f"epsilon must lie in [0, 1], got {epsilon}")
    g = graph if graph is not None else Graph()
    if trace is not None:
        trace.fed.append(batch.tgt[:, 0].copy())

    def choose(t, logp):
        # draws are taken every step so rng consumption is independent of epsilon
        use_model = rng.random(logp.shape[0]) < epsilon
        sampled = sample_rows(np.exp(logp), rng)
        fed = np.where(use_model, sampled, batch.tgt[:, t])
        if trace is not None:
            trace.fed.append(fed.copy())
            trace.used_model.append(use_model.copy())
        return fed

    return _forced_loss(model, g, batch, choose, dropout_rng)


def reinforce_surrogate(g: Graph, logp_sums: Tensor, rewards, baselines) -> Tensor:
    """Batch-mean of ``-(r - b) * log p(w)``; its gradient is the REINFORCE estimate.

    Rewards and baselines enter as constants.
    """
    adv = np.asarray(rewards, dtype=np.float64) - np.asarray(baselines, dtype=np.float64)
    if adv.shape != logp_sums.shape:
        raise DataError(f"advantages {adv.shape} do not match log-probabilities {logp_sums.shape}")
    return g.mul(g.sum(g.mul(logp_sums, constant(adv))), -1.0 / adv.size)


@dataclass
class RLStep:
    loss: Tensor
    mean_reward: float
    mean_baseline: float
    samples: list[list[int]]
    greedy: list[list[int]]
    rewards: np.ndarray
    baselines: np.ndarray
    logp_sums: Tensor

    @property
    def mean_advantage(self) -> float:
        return self.mean_reward - self.mean_baseline


def sample_sequences(model: Seq2Seq, g: Graph, batch: Batch, rng: np.random.Generator, max_len: int,
                     dropout_rng=None) -> tuple[list[list[int]], Tensor]:
    """Multinomial samples plus the recorded sum of their token log-probs.

    Returned sequences exclude EOS; the EOS log-probability is included.
    """
    enc = model.encode(g, batch.src, batch.src_lengths, dropout_rng)
    state = model.init_decoder(g, enc, _image_input(model, batch))
    B = len(batch)
    alive = np.ones(B, dtype=bool)
    seqs: list[list[int]] = [[] for _ in range(B)]
    prev = np.full(B, BOS)
    total = None
    for _ in range(max_len):
        logits, state, _ = model.decode_step(g, state, prev, enc, dropout_rng)
        logp = g.log_softmax(logits)
        toks = sample_rows(np.exp(logp.data), rng)
        term = g.mul(g.pick(logp, toks), constant(alive.astype(np.float64)))
        total = term if total is None else g.add(total, term)
        for b in np.flatnonzero(alive & (toks != EOS)):
            seqs[b].append(int(toks[b]))
        alive &= toks != EOS
        if not alive.any():
            break
        prev = toks
    return seqs, total


def rl_step(model: Seq2Seq, batch: Batch, spec: RewardSpec, rng: np.random.Generator, to_words: ToWords = ids_as_words,
            max_len: int = 100, graph: Graph | None = None, dropout_rng=None) -> RLStep:
    """Self-critical REINFORCE: one sample per sentence, greedy decode as baseline."""
    g = graph if graph is not None else Graph()
    samples, logp_sums = sample_sequences(model, g, batch, rng, max_len, dropout_rng)
    greedy_spec = EnsembleSpec([model], beam=1, max_len=max_len)
    greedy = []
    for r in range(len(batch)):
        src = batch.src[r, : batch.src_lengths[r]]
        img = None if batch.features is None or not model.multimodal else batch.features[r]
        greedy.append(greedy_decode(greedy_spec, src, img))
    refs = [to_words(_strip(batch.tgt[r])) for r in range(len(batch))]
    rewards = np.array([sentence_bleu(to_words(s), ref, spec) for s, ref in zip(samples, refs)])
    baselines = np.array([sentence_bleu(to_words(s), ref, spec) for s, ref in zip(greedy, refs)])
    loss = reinforce_surrogate(g, logp_sums, rewards, baselines)
    return RLStep(loss, float(rewards.mean()), float(baselines.mean()), samples, greedy, rewards, baselines, logp_sums)


def _strip(row) -> list[int]:
    out = []
    for tok in row[1:]:
        if tok == EOS:
            break
        out.append(int(tok))
    return out


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def sgd_update(params: Sequence[Tensor], lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data = p.data - lr * p.grad
            p.grad = None


def evaluate(model_or_spec, corpus: ParallelCorpus, to_words: ToWords = ids_as_words, max_len: int = 100):
    """Greedy-decode a corpus; returns (corpus BLEU, mean sentence BLEU, hypotheses)."""
    spec = model_or_spec if isinstance(model_or_spec, EnsembleSpec) else EnsembleSpec([model_or_spec], beam=1,
                                                                                      max_len=max_len)
    hyps, refs = [], []
    for i in range(len(corpus)):
        img = None if corpus.features is None or not spec.needs_features else corpus.features[i]
        hyps.append(to_words(greedy_decode(spec, corpus.src[i], img)))
        refs.append(to_words(corpus.tgt[i]))
    if not hyps:
        return 0.0, 0.0, hyps
    sent = float(np.mean([sentence_bleu(h, r) for h, r in zip(hyps, refs)]))
    return corpus_bleu(hyps, refs), sent, hyps


@dataclass
class EpochLog:
    epoch: int
    regime: str
    epsilon: float | None
    loss: float
    valid_bleu: float
    mean_advantage: float | None = None
    mean_reward: float | None = None

    HEADER = "epoch\tregime\tepsilon\tloss\tvalid_bleu\tmean_advantage"

    def tsv(self) -> str:
        def fmt(x):
            return "-" if x is None else f"{x:.6f}"
        return f"{self.epoch}\t{self.regime}\t{fmt(self.epsilon)}\t{self.loss:.6f}\t{self.valid_bleu:.6f}\t{fmt(self.mean_advantage)}"


@dataclass
class TrainResult:
    history: list[EpochLog]
    best_epoch: int
    best_bleu: float
    initial_bleu: float | None = None


def _streams(seed: int, epoch: int):
    ss = np.random.SeedSequence([seed, epoch])
    shuffle_seed, drop, samp = ss.spawn(3)
    return int(shuffle_seed.generate_state(1)[0]), np.random.default_rng(drop), np.random.default_rng(samp)


def train(model: Seq2Seq, train_data: ParallelCorpus, valid_data: ParallelCorpus | None, cfg: TrainConfig,
          to_words: ToWords = ids_as_words, run_dir: str | Path | None = None,
          hooks: Sequence[Callable[[EpochLog, Seq2Seq], None]] = (), eval_initial: bool = False) -> TrainResult:
    """Run one training regime; leaves ``model`` holding its best-validation parameters.

    With no validation corpus the last epoch counts as best.
    """
    if cfg.regime == "RL" and model.regime not in ("CE", "SS"):
        raise ConfigError(f"RL training must start from a CE or SS checkpoint, got regime {model.regime!r}")
    if cfg.dropout is not None:
        model.config = replace(model.config, dropout_rate=cfg.dropout)
    params = list(model.params.values())
    ckpt_dir = log_file = None
    if run_dir is not None:
        ckpt_dir = Path(run_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        log_file = Path(run_dir) / "train.log"
        if not log_file.exists():
            log_file.write_text(EpochLog.HEADER + "\n", encoding="utf-8")

    initial = None
    if eval_initial and valid_data is not None:
        initial = evaluate(model, valid_data, to_words, cfg.max_decode_len)[0]

    history: list[EpochLog] = []
    best_bleu, best_epoch, best_arrays = -math.inf, -1, model.state_arrays()
    for epoch in range(cfg.epochs):
        shuffle_seed, drop_rng, samp_rng = _streams(cfg.seed, epoch)
        eps = epsilon_at(epoch, cfg.ss_step, cfg.ss_period, cfg.ss_cap) if cfg.regime == "SS" else None
        batches = make_batches(train_data, cfg.batch_size, shuffle_seed, cfg.sort_batches)
        lr = cfg.lr_at(epoch)
        losses, weights, advantages, rewards = [], [], [], []
        for bi, batch in enumerate(batches):
            g = Graph()
            try:
                if cfg.regime == "CE":
                    loss = ce_loss(model, batch, graph=g, dropout_rng=drop_rng)
                elif cfg.regime == "SS":
                    loss = ss_loss(model, batch, eps, samp_rng, graph=g, dropout_rng=drop_rng)
                else:
                    step = rl_step(model, batch, cfg.reward, samp_rng, to_words, cfg.max_decode_len, g, drop_rng)
                    loss = step.loss
                    advantages.append(step.mean_advantage)
                    rewards.append(step.mean_reward)
                if not math.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                g.backward(loss)
            except NonFiniteError as exc:
                raise NonFiniteError(f"divergence at epoch {epoch}, batch {bi}: {exc}") from exc
            clip_grad_norm(params, cfg.grad_clip_norm)
            sgd_update(params, lr)
            losses.append(loss.item())
            weights.append(len(batch))
        mean_loss = float(np.average(losses, weights=weights)) if losses else 0.0
        bleu = evaluate(model, valid_data, to_words, cfg.max_decode_len)[0] if valid_data is not None else 0.0
        entry = EpochLog(epoch, cfg.regime, eps, mean_loss, bleu,
                         float(np.mean(advantages)) if advantages else None,
                         float(np.mean(rewards)) if rewards else None)
        history.append(entry)
        log.info(entry.tsv())
        if valid_data is None or bleu > best_bleu:
            best_bleu, best_epoch, best_arrays = bleu, epoch, model.state_arrays()
        if ckpt_dir is not None:
            model.regime = cfg.regime
            save_checkpoint(model, ckpt_dir / f"{cfg.regime.lower()}_epoch{epoch:03d}.ckpt")
            with open(log_file, "a", encoding="utf-8") as fh:
                fh.write(entry.tsv() + "\n")
        for hook in hooks:
            hook(entry, model)

    if history:
        model.load_arrays(best_arrays)
        model.regime = cfg.regime
        if ckpt_dir is not None:
            save_checkpoint(model, ckpt_dir / f"{cfg.regime.lower()}_best.ckpt")
    return TrainResult(history, best_epoch, best_bleu if history else (initial or 0.0), initial)
