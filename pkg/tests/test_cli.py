import csv
import io
import json

import numpy as np
import pytest

from awe.cli import main, read_embeddings
from awe.corpus import load_corpus

SPEC = {"seed": 7, "n_languages": 3, "words_per_language": 10, "tokens_per_word": 5,
        "unique_phone_fraction": 0.3}
MODEL = {"input_dim": 13, "hidden_size": 4, "acoustic_layers": 1, "symbol_dim": 4}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(json.dumps(SPEC))
    assert main(["synth", "--spec", str(d / "spec.json"), "--out", str(d / "corpus")]) == 0
    return d


@pytest.fixture(scope="module")
def trained(corpus):
    cfg = {"corpus": "corpus", "setting": "single", "output": "single", "batch_size": 16, "max_epochs": 2,
           "log_timing": False, "model": MODEL}
    (corpus / "single.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(corpus / "single.json")]) == 0
    return corpus / "single" / "best.ckpt"


def test_synth_is_reproducible(corpus, tmp_path):
    assert main(["synth", "--spec", str(corpus / "spec.json"), "--out", str(tmp_path / "again")]) == 0
    for f in sorted((corpus / "corpus").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "again" / f.relative_to(corpus / "corpus")).read_bytes()
    load_corpus(tmp_path / "again")


def test_synth_invalid_spec(tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"n_languages": 0}')
    assert main(["synth", "--spec", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 1
    assert "n_languages" in capsys.readouterr().err


def test_train_writes_metrics(trained):
    rows = list(csv.reader(open(trained.parent / "metrics.csv")))
    assert rows[0][0] == "epoch" and [r[0] for r in rows[1:]] == ["0", "1", "2"]


def test_unseen_access_log(corpus, capsys):
    cfg = {"corpus": "corpus", "setting": "unseen", "target": "L2", "output": "unseen", "batch_size": 16,
           "max_epochs": 1, "front_end": "feature", "model": MODEL}
    (corpus / "unseen.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(corpus / "unseen.json"), "--access-log", str(corpus / "acc.txt")]) == 0
    reads = (corpus / "acc.txt").read_text().split()
    assert not [r for r in reads if "/L2/" in r]
    assert any("/L0/" in r for r in reads)


def test_unknown_config_key(corpus, capsys):
    (corpus / "typo.json").write_text(json.dumps({"corpus": "corpus", "learning_rate": 0.1}))
    assert main(["--json", "train", "--config", str(corpus / "typo.json")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 1 and "learning_rate" in err["message"]
    (corpus / "typo2.json").write_text(json.dumps({"corpus": "corpus", "model": {"hidden": 3}}))
    assert main(["train", "--config", str(corpus / "typo2.json")]) == 1


def test_finetune_corrupt_checkpoint(corpus, capsys):
    (corpus / "bad.ckpt").write_bytes(b"AWEFxxxxxxxxxxxxxxxxxxxxx")
    cfg = {"corpus": "corpus", "target": "L1", "output": "ft", "model": MODEL}
    (corpus / "ft.json").write_text(json.dumps(cfg))
    assert main(["--json", "finetune", "--config", str(corpus / "ft.json"), "--from", str(corpus / "bad.ckpt")]) == 2
    line = capsys.readouterr().err
    assert line.count("\n") == 1 and json.loads(line)["error"] == "CheckpointError"


def test_finetune_runs(corpus, trained):
    cfg = {"corpus": "corpus", "target": "L1", "output": "ft_ok", "batch_size": 16, "max_epochs": 1,
           "model": MODEL}
    (corpus / "ft_ok.json").write_text(json.dumps(cfg))
    assert main(["finetune", "--config", str(corpus / "ft_ok.json"), "--from", str(trained)]) == 0
    assert (corpus / "ft_ok" / "best.ckpt").exists()


def test_eval_report(corpus, trained, tmp_path):
    out = tmp_path / "report.csv"
    assert main(["eval", "--ckpt", str(trained), "--corpus", str(corpus / "corpus"), "--languages", "L0",
                 "--split", "train", "--out", str(out), "--pr-dir", str(tmp_path / "pr")]) == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["metric"] for r in rows] == ["L0/acoustic_ap", "L0/crossview_ap"]
    assert all(r["exact"] == "true" and int(r["n_pos"]) > 0 for r in rows)
    assert (tmp_path / "pr" / "L0_acoustic.csv").exists()


def test_eval_missing_lexicon_word(corpus, trained, tmp_path, capsys):
    import shutil
    shutil.copytree(corpus / "corpus", tmp_path / "c")
    lex = (tmp_path / "c" / "L0.lex").read_text().splitlines()
    dropped = lex[0].split("\t")[0]
    (tmp_path / "c" / "L0.lex").write_text("\n".join(lex[1:]) + "\n")
    assert main(["eval", "--ckpt", str(trained), "--corpus", str(tmp_path / "c"), "--split", "train"]) == 2
    assert dropped in capsys.readouterr().err


def test_eval_perfect_toy(tmp_path, capsys):
    spec = {"seed": 1, "n_languages": 1, "words_per_language": 6, "tokens_per_word": 4, "noise_sigma": 0.0,
            "frames_per_phone_range": [2, 2]}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    assert main(["synth", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "c")]) == 0
    cfg = {"corpus": "c", "output": "o", "batch_size": 8, "max_epochs": 1, "model": MODEL}
    (tmp_path / "t.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "t.json")]) == 0
    capsys.readouterr()
    # noise-free tokens with fixed durations are identical per word, so any encoder separates them
    assert main(["eval", "--ckpt", str(tmp_path / "o" / "best.ckpt"), "--corpus", str(tmp_path / "c"),
                 "--split", "train", "--metrics", "acoustic"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert float(rows[0]["value"]) == 1.0


def test_embed_row_count(corpus, trained, tmp_path):
    out = tmp_path / "emb.bin"
    assert main(["embed", "--ckpt", str(trained), "--corpus", str(corpus / "corpus"), "--out", str(out)]) == 0
    rows, mat = read_embeddings(out)
    test = load_corpus(corpus / "corpus", splits=("test",)).splits["test"]
    n_seg = sum(len(v) for v in test.values())
    n_words = sum(len({s.word for s in v}) for v in test.values())
    assert mat.shape[0] == len(rows) == n_seg + n_words
    assert np.isfinite(mat).all()


def test_neighbors(corpus, trained, capsys):
    word = (corpus / "corpus" / "L0.lex").read_text().split("\t")[0]
    capsys.readouterr()
    assert main(["neighbors", "--ckpt", str(trained), "--corpus", str(corpus / "corpus"), "--languages", "L0",
                 "--split", "train", "--query", word, "--k", "100000"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert rows[0]["id"] == word and abs(float(rows[0]["distance"])) < 1e-6
    train = load_corpus(corpus / "corpus", splits=("train",)).splits["train"]["L0"]
    assert len(rows) == len(train) + len({s.word for s in train})


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["eval", "--ckpt", "x"]) == 1
    assert main(["--json", "frobnicate"]) == 1
    assert json.loads(capsys.readouterr().err.splitlines()[-1])["exit_code"] == 1
