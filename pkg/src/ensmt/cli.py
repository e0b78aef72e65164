"""Command-line entry point.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines,
keys spelled like the long flags) and ``--run-dir DIR``.  Explicit flags
override config-file values.  A ``manifest.json`` with the fully
resolved settings is written to the run directory before any work starts.

Exit status: 0 on success, 1 on a validation or runtime failure (one line
``error: <category>: <message>`` on stderr), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bpe import MergeTable, Vocabulary, apply_bpe, build_vocab, learn_bpe
from .data import ParallelCorpus, collate, encode_corpus, load_features, preprocess, read_lines
from .decoding import EnsembleSpec, translate_corpus
from .errors import ConfigError, EnsmtError
from .model import ModelConfig, Seq2Seq, load_checkpoint
from .pipeline import run_pipeline
from .reward import corpus_bleu, sentence_bleu
from .tensor import GradCheckReport, finite_diff_check
from .training import TrainConfig, ce_loss, surface_words, train

log = logging.getLogger("ensmt")

SUBCOMMANDS = ("bpe-learn", "bpe-apply", "train", "translate", "score", "gradcheck", "pipeline")


# -- config files and manifests ---------------------------------------------------

def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _convert(action: argparse.Action, value: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        v = value.lower()
        if v not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{action.dest}: expected a boolean, got {value!r}")
        flag = v in ("true", "1", "yes")
        return flag if isinstance(action, argparse._StoreTrueAction) else not flag
    items = value.split() if action.nargs in ("+", "*") else [value]
    conv = action.type or str
    try:
        vals = [conv(x) for x in items]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{action.dest}: {exc}") from exc
    if action.choices is not None and any(v not in action.choices for v in vals):
        raise ConfigError(f"{action.dest}: {value!r} not in {list(action.choices)}")
    return vals if action.nargs in ("+", "*") else vals[0]


def apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in values.items():
        if key not in actions:
            raise ConfigError(f"unknown config key {key!r}")
        defaults[key] = _convert(actions[key], value)
    sub.set_defaults(**defaults)
    # a value from the file satisfies a required flag
    for key in defaults:
        actions[key].required = False


def build_identifier() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_manifest(run_dir: Path, command: str, args: argparse.Namespace) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    settings = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    manifest = {
        "subcommand": command,
        "config": settings,
        "seed": settings.get("seed"),
        "build": build_identifier(),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n", encoding="utf-8")


def _run_dir(args) -> Path | None:
    return Path(args.run_dir) if args.run_dir else None


def _out_path(args, explicit, name: str, sub: str = "") -> Path:
    if explicit:
        return Path(explicit)
    run_dir = _run_dir(args)
    if run_dir is None:
        raise ConfigError(f"no output path given for {name} and no --run-dir")
    return run_dir / sub / name if sub else run_dir / name


# -- subcommands --------------------------------------------------------------

def cmd_bpe_learn(args) -> int:
    sentences = []
    for path in args.inputs:
        sentences.extend(preprocess(line) for line in read_lines(path))
    table = learn_bpe(sentences, args.merges)
    vocab = build_vocab([apply_bpe(table, s) for s in sentences], args.vocab_cap)
    codes_path = _out_path(args, args.codes, "codes.bpe")
    vocab_path = _out_path(args, args.vocab, "vocab.txt")
    codes_path.parent.mkdir(parents=True, exist_ok=True)
    vocab_path.parent.mkdir(parents=True, exist_ok=True)
    table.save(codes_path)
    vocab.save(vocab_path)
    print(f"merges={len(table)} vocab={len(vocab)} hash={vocab.hash}")
    return 0


def cmd_bpe_apply(args) -> int:
    table = MergeTable.load(args.codes)
    cache: dict = {}
    lines = [" ".join(apply_bpe(table, preprocess(line), cache)) for line in read_lines(args.input)]
    out = _out_path(args, args.output, "segmented.txt", "outputs")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
    return 0


def _load_corpora(args, table, vocab, max_len):
    tr_feats = load_features(args.train_features) if args.train_features else None
    train_data = encode_corpus(read_lines(args.train_src), read_lines(args.train_tgt), table, vocab, tr_feats,
                               max_len=max_len)
    valid_data = None
    if args.valid_src:
        if not args.valid_tgt:
            raise ConfigError("--valid-src needs --valid-tgt")
        va_feats = load_features(args.valid_features) if args.valid_features else None
        valid_data = encode_corpus(read_lines(args.valid_src), read_lines(args.valid_tgt), table, vocab, va_feats)
    return train_data, valid_data


def _start_model(args, vocab, feature_dim: int) -> Seq2Seq:
    if args.init_checkpoint:
        return load_checkpoint(args.init_checkpoint, expected_vocab_hash=vocab.hash)
    cfg = ModelConfig(vocab_size=len(vocab), embed_dim=args.embed_dim, hidden_dim=args.hidden_dim,
                      encoder_layers=args.encoder_layers, image_feature_dim=feature_dim,
                      dropout_rate=args.dropout, seed=args.seed if args.model_seed is None else args.model_seed,
                      max_src_len=args.max_len, max_tgt_len=args.max_len, init_scale=args.init_scale)
    return Seq2Seq(cfg, vocab_hash=vocab.hash)


def _train_config(args, regime: str, epochs: int, seed: int, lr: float) -> TrainConfig:
    return TrainConfig(regime=regime, epochs=epochs, batch_size=args.batch_size, learning_rate=lr,
                       lr_decay=args.lr_decay, decay_start=args.decay_start,
                       dropout=args.dropout, grad_clip_norm=args.grad_clip, seed=seed, ss_step=args.ss_step,
                       ss_period=args.ss_period, ss_cap=args.ss_cap, sort_batches=not args.no_sort,
                       max_decode_len=args.max_decode_len)


def _prepare_training(args):
    table = MergeTable.load(args.codes)
    vocab = Vocabulary.load(args.vocab)
    train_data, valid_data = _load_corpora(args, table, vocab, args.max_len)
    dim = 0 if train_data.features is None else train_data.features.shape[1]
    return vocab, train_data, valid_data, _start_model(args, vocab, dim)


def cmd_train(args) -> int:
    vocab, train_data, valid_data, model = _prepare_training(args)
    cfg = _train_config(args, args.regime, args.epochs, args.seed, args.learning_rate)
    res = train(model, train_data, valid_data, cfg, surface_words(vocab), _run_dir(args))
    print(f"regime={cfg.regime} best_epoch={res.best_epoch} best_bleu={res.best_bleu:.6f}")
    return 0


def parse_stages(text: str) -> list[tuple[str, int]]:
    """``"ce:30,ss:30,rl:15"`` -> ``[("CE", 30), ("SS", 30), ("RL", 15)]``."""
    stages = []
    for part in text.split(","):
        name, sep, epochs = part.strip().partition(":")
        if not sep:
            raise ConfigError(f"stage {part!r}: expected REGIME:EPOCHS")
        try:
            stages.append((name.strip().upper(), int(epochs)))
        except ValueError as exc:
            raise ConfigError(f"stage {part!r}: epochs must be an integer") from exc
    return stages


def cmd_pipeline(args) -> int:
    stages = parse_stages(args.stages)
    vocab, train_data, valid_data, model = _prepare_training(args)
    cfgs = []
    for i, (regime, epochs) in enumerate(stages):
        lr = args.rl_learning_rate if regime == "RL" and args.rl_learning_rate is not None else args.learning_rate
        cfgs.append(_train_config(args, regime, epochs, args.seed + i, lr))
    results = run_pipeline(model, cfgs, train_data, valid_data, surface_words(vocab), _run_dir(args))
    for r in results:
        init = "-" if r.initial_bleu is None else f"{r.initial_bleu:.6f}"
        print(f"stage={r.regime} initial_bleu={init} best_bleu={r.best_bleu:.6f}")
    return 0


def cmd_translate(args) -> int:
    spec = EnsembleSpec.from_checkpoints(args.checkpoints, beam=args.beam, length_reward=args.length_reward,
                                         max_len=args.max_decode_len)
    table = MergeTable.load(args.codes)
    vocab = Vocabulary.load(args.vocab)
    out = _out_path(args, args.output, "translation.txt", "outputs")
    out.parent.mkdir(parents=True, exist_ok=True)
    report = translate_corpus(spec, args.input, out, table, vocab, args.features, args.reference)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_score(args) -> int:
    hyps = [preprocess(x) for x in read_lines(args.hyp)]
    refs = [preprocess(x) for x in read_lines(args.ref)]
    result = {"corpus_bleu": corpus_bleu(hyps, refs)}
    if args.sentence:
        result["sentence_bleu"] = [sentence_bleu(h, r) for h, r in zip(hyps, refs)]
    print(json.dumps(result))
    return 0


GRADCHECK_DIMS = {
    # vocab, embed, hidden, layers, source length, target length
    "toy": (12, 6, 8, 2, 4, 5),
    "tiny": (7, 3, 4, 1, 2, 3),
}


def gradcheck_model(dims: str = "toy", seed: int = 0, tol: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Finite-difference check of the full cross-entropy loss over every parameter."""
    V, E, H, L, S, T = GRADCHECK_DIMS[dims]
    cfg = ModelConfig(vocab_size=V, embed_dim=E, hidden_dim=H, encoder_layers=L, dropout_rate=0.0, seed=seed,
                      init_scale=0.5)
    model = Seq2Seq(cfg)
    rng = np.random.default_rng(seed)
    # two sentences of different length so padding masks are exercised
    src = [list(rng.integers(4, V, size=S)), list(rng.integers(4, V, size=S - 1))]
    tgt = [list(rng.integers(4, V, size=T - 2)), list(rng.integers(4, V, size=T - 3))]
    batch = collate(ParallelCorpus(src, tgt), [0, 1])
    return finite_diff_check(lambda g: ce_loss(model, batch, graph=g), model.params, step=step, tol=tol)


def cmd_gradcheck(args) -> int:
    report = gradcheck_model(args.dims, args.seed, args.tol, args.step)
    for line in report.lines():
        print(line)
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


# -- parser -------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; explicit flags win")
    p.add_argument("--run-dir", help="directory for manifest, logs, checkpoints/ and outputs/")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-src", required=True)
    p.add_argument("--train-tgt", required=True)
    p.add_argument("--valid-src")
    p.add_argument("--valid-tgt")
    p.add_argument("--train-features", help="image-feature file aligned with the training source")
    p.add_argument("--valid-features")
    p.add_argument("--codes", required=True, help="BPE merge table")
    p.add_argument("--vocab", required=True)
    p.add_argument("--init-checkpoint", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--learning-rate", type=float, default=1.0)
    p.add_argument("--lr-decay", type=float, default=1.0, help="per-epoch rate multiplier once decay starts")
    p.add_argument("--decay-start", type=int, default=0, help="first epoch (zero-based) with a decayed rate")
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--grad-clip", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-seed", type=int, help="parameter init seed (default: --seed)")
    p.add_argument("--ss-step", type=float, default=0.05)
    p.add_argument("--ss-period", type=int, default=5)
    p.add_argument("--ss-cap", type=float, default=0.25)
    p.add_argument("--no-sort", action="store_true", help="disable length bucketing (bit-exact reruns)")
    p.add_argument("--embed-dim", type=int, default=500)
    p.add_argument("--hidden-dim", type=int, default=500)
    p.add_argument("--encoder-layers", type=int, default=2)
    p.add_argument("--init-scale", type=float, default=0.1)
    p.add_argument("--max-len", type=int, default=100, help="drop training pairs longer than this (subwords)")
    p.add_argument("--max-decode-len", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ensmt", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = subs.add_parser("bpe-learn", help="learn joint BPE merges and the vocabulary")
    _common(p)
    p.add_argument("--inputs", nargs="+", required=True, help="raw text files (all languages)")
    p.add_argument("--merges", type=int, default=10000)
    p.add_argument("--vocab-cap", type=int, default=10000)
    p.add_argument("--codes", help="output merge table (default RUN_DIR/codes.bpe)")
    p.add_argument("--vocab", help="output vocabulary (default RUN_DIR/vocab.txt)")
    p.set_defaults(func=cmd_bpe_learn)

    p = subs.add_parser("bpe-apply", help="preprocess and segment a text file")
    _common(p)
    p.add_argument("--codes", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_bpe_apply)

    p = subs.add_parser("train", help="train one regime (ce, ss or rl)")
    _common(p)
    _training_flags(p)
    p.add_argument("--regime", type=str.upper, choices=("CE", "SS", "RL"), default="CE")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("pipeline", help="staged training, e.g. ce:30,ss:30,rl:15")
    _common(p)
    _training_flags(p)
    p.add_argument("--stages", default="ce:10,ss:10,rl:5")
    p.add_argument("--rl-learning-rate", type=float, help="learning rate for RL stages (default: --learning-rate)")
    p.set_defaults(func=cmd_pipeline)

    p = subs.add_parser("translate", help="decode with one checkpoint or an ensemble")
    _common(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--codes", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--length-reward", type=float, default=0.0)
    p.add_argument("--max-decode-len", type=int, default=100)
    p.add_argument("--features", help="image-feature file aligned with --input")
    p.add_argument("--reference", help="reference translations for a BLEU report")
    p.set_defaults(func=cmd_translate)

    p = subs.add_parser("score", help="corpus BLEU of a hypothesis file")
    _common(p)
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--sentence", action="store_true", help="also list sentence BLEU")
    p.set_defaults(func=cmd_score)

    p = subs.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    _common(p)
    p.add_argument("--dims", choices=sorted(GRADCHECK_DIMS), default="toy")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    argv = list(argv)
    command = next((a for a in argv if a in SUBCOMMANDS), None)
    if command is not None:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv[argv.index(command) + 1:])
        if known.config:
            sub = parser._subparsers._group_actions[0].choices[command]
            apply_config(sub, read_config(known.config))
    return parser.parse_args(argv)


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        run_dir = _run_dir(args)
        if run_dir is not None:
            write_manifest(run_dir, args.command, args)
        return args.func(args)
    except EnsmtError as exc:
        print(f"error: {exc.category}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())
