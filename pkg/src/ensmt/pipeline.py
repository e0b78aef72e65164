"""Staged training: each stage starts from the previous stage's best checkpoint."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .data import ParallelCorpus
from .errors import ConfigError
from .model import Seq2Seq
from .training import TrainConfig, TrainResult, ToWords, ids_as_words, train


@dataclass
class StageResult:
    regime: str
    result: TrainResult

    @property
    def best_bleu(self) -> float:
        return self.result.best_bleu

    @property
    def initial_bleu(self) -> float | None:
        return self.result.initial_bleu


def run_pipeline(model: Seq2Seq, stages: Sequence[TrainConfig], train_data: ParallelCorpus,
                 valid_data: ParallelCorpus | None, to_words: ToWords = ids_as_words,
                 run_dir: str | Path | None = None) -> list[StageResult]:
    """Train ``model`` through ``stages`` in order, in place.

    Every stage after the first records the validation BLEU of the
    checkpoint it starts from.
    """
    if not stages:
        raise ConfigError("pipeline has no stages")
    if stages[0].regime == "RL" and model.regime not in ("CE", "SS"):
        raise ConfigError("RL stage needs a preceding CE or SS checkpoint")
    results = []
    for i, cfg in enumerate(stages):
        res = train(model, train_data, valid_data, cfg, to_words, run_dir, eval_initial=i > 0)
        results.append(StageResult(cfg.regime, res))
    return results
