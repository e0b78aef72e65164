import json

import pytest

from ensmt.cli import parse_stages, read_config, run
from ensmt.errors import ConfigError
from ensmt.toy import noisy_copy_task

TINY = ["--embed-dim", "8", "--hidden-dim", "8", "--encoder-layers", "1", "--batch-size", "10",
        "--max-decode-len", "12", "--init-scale", "0.3"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    task = noisy_copy_task(n_train=30, n_valid=6, seed=2)
    for name, lines in [("train.src", task.train_src), ("train.tgt", task.train_tgt),
                        ("valid.src", task.valid_src), ("valid.tgt", task.valid_tgt)]:
        (d / name).write_text("\n".join(lines) + "\n")
    assert run(["bpe-learn", "--run-dir", str(d / "bpe"), "--inputs", str(d / "train.src"), str(d / "train.tgt"),
                "--merges", "20", "--vocab-cap", "100"]) == 0
    return d


def data_flags(d):
    return ["--train-src", str(d / "train.src"), "--train-tgt", str(d / "train.tgt"),
            "--valid-src", str(d / "valid.src"), "--valid-tgt", str(d / "valid.tgt"),
            "--codes", str(d / "bpe" / "codes.bpe"), "--vocab", str(d / "bpe" / "vocab.txt")]


def test_bpe_learn_writes_manifest_and_tables(corpus):
    manifest = json.loads((corpus / "bpe" / "manifest.json").read_text())
    assert manifest["subcommand"] == "bpe-learn"
    assert manifest["config"]["merges"] == 20
    assert "build" in manifest
    assert (corpus / "bpe" / "vocab.txt").read_text().startswith("<pad>\n<unk>\n<s>\n</s>\n")


def test_bpe_apply_round_trips(corpus, tmp_path):
    out = tmp_path / "seg.txt"
    assert run(["bpe-apply", "--codes", str(corpus / "bpe" / "codes.bpe"), "--input", str(corpus / "train.src"),
                "--output", str(out)]) == 0
    src = (corpus / "train.src").read_text().splitlines()
    seg = out.read_text().splitlines()
    assert ["".join(s.split()).replace("</w>", " ").strip() for s in seg] == src


def test_train_config_file_and_override(corpus, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# toy run\nregime = ss\nepochs = 5\nseed = 7\nno_sort = true\n")
    run_dir = tmp_path / "run"
    assert run(["train", "--config", str(cfg), "--epochs", "2", "--run-dir", str(run_dir)]
               + data_flags(corpus) + TINY) == 0
    manifest = json.loads((run_dir / "manifest.json").read_text())["config"]
    assert manifest["regime"] == "SS" and manifest["epochs"] == 2 and manifest["seed"] == 7 and manifest["no_sort"]
    assert (run_dir / "checkpoints" / "ss_best.ckpt").exists()
    assert len((run_dir / "train.log").read_text().splitlines()) == 3
    assert "regime=SS" in capsys.readouterr().out


def test_train_rerun_is_bit_identical(corpus, tmp_path):
    blobs = []
    for name in ("a", "b"):
        args = ["train", "--regime", "ss", "--epochs", "2", "--seed", "7", "--no-sort", "--run-dir",
                str(tmp_path / name)] + data_flags(corpus) + TINY
        assert run(args) == 0
        blobs.append((tmp_path / name / "checkpoints" / "ss_best.ckpt").read_bytes())
    assert blobs[0] == blobs[1]


def test_ce_only_pipeline_matches_train(corpus, tmp_path):
    common = ["--epochs", "2", "--seed", "3", "--no-sort"] + data_flags(corpus) + TINY
    assert run(["train", "--regime", "ce", "--run-dir", str(tmp_path / "t")] + common) == 0
    assert run(["pipeline", "--stages", "ce:2", "--run-dir", str(tmp_path / "p")] + common) == 0
    a = (tmp_path / "t" / "checkpoints" / "ce_best.ckpt").read_bytes()
    b = (tmp_path / "p" / "checkpoints" / "ce_best.ckpt").read_bytes()
    assert a == b


def test_translate_ensemble_and_score(corpus, tmp_path, capsys):
    ckpts = []
    for seed in ("1", "2"):
        run_dir = tmp_path / f"m{seed}"
        assert run(["train", "--epochs", "1", "--seed", seed, "--run-dir", str(run_dir)] + data_flags(corpus) + TINY) == 0
        ckpts.append(str(run_dir / "checkpoints" / "ce_best.ckpt"))
    capsys.readouterr()
    out_dir = tmp_path / "dec"
    assert run(["translate", "--checkpoints", *ckpts, "--beam", "5", "--length-reward", "0.0",
                "--max-decode-len", "12", "--codes", str(corpus / "bpe" / "codes.bpe"),
                "--vocab", str(corpus / "bpe" / "vocab.txt"), "--input", str(corpus / "valid.src"),
                "--reference", str(corpus / "valid.tgt"), "--run-dir", str(out_dir)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["sentences"] == 6 and 0.0 <= report["bleu"] <= 1.0
    hyp = out_dir / "outputs" / "translation.txt"
    assert len(hyp.read_text().splitlines()) == 6
    assert run(["score", "--hyp", str(hyp), "--ref", str(corpus / "valid.tgt")]) == 0
    assert json.loads(capsys.readouterr().out)["corpus_bleu"] == pytest.approx(report["bleu"], abs=1e-15)


def test_gradcheck_tiny_passes(capsys):
    assert run(["gradcheck", "--dims", "tiny", "--tol", "1e-4"]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")


def test_rl_first_stage_rejected(corpus, tmp_path, capsys):
    assert run(["pipeline", "--stages", "rl:1", "--run-dir", str(tmp_path)] + data_flags(corpus) + TINY) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: config:") and "\n" not in err


def test_error_categories(tmp_path, capsys):
    assert run(["score", "--hyp", str(tmp_path / "missing"), "--ref", str(tmp_path / "missing")]) == 1
    assert capsys.readouterr().err.startswith("error: io:")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert run(["translate", "--checkpoints", str(bad), "--codes", "x", "--vocab", "y", "--input", "z"]) == 1
    assert capsys.readouterr().err.startswith("error: checkpoint:")


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        run(["nonsense"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run(["score", "--hyp", "a", "--ref", "b", "--bogus"])
    assert exc.value.code == 2


def test_config_parsing(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("a-b = 1  # comment\n\nc=two words\n")
    assert read_config(cfg) == {"a_b": "1", "c": "two words"}
    cfg.write_text("nonsense\n")
    with pytest.raises(ConfigError):
        read_config(cfg)
    assert parse_stages("ce:30, ss:30,rl:15") == [("CE", 30), ("SS", 30), ("RL", 15)]
    with pytest.raises(ConfigError):
        parse_stages("ce")


def test_unknown_config_key_is_error(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("colour = blue\n")
    assert run(["score", "--config", str(cfg), "--hyp", "a", "--ref", "b"]) == 1
    assert "unknown config key" in capsys.readouterr().err
