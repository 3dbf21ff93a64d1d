import csv
import json

import pytest

from gmcloss.cli import main
from gmcloss.synthetic import shipped_path

TOY = str(shipped_path("toy.jsonl"))


def _small_config(tmp_path, **extra):
    cfg = {"feature_dim": 8, "codebook_dim": 8, "batch_size": 6, "warmup_steps": 2,
           "total_steps": 4, "log_every": 2, "eval_batches": 1, **extra}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_hist_writes_csv_and_manifest(tmp_path):
    out = tmp_path / "h.csv"
    assert main(["hist", "--level", "sentence", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["rank", "frequency"]
    assert [int(r[0]) for r in rows[1:]] == list(range(1, len(rows)))
    manifest = json.loads((tmp_path / "h.csv.manifest.json").read_text())
    assert manifest["subcommand"] == "hist" and len(manifest["inputs"]["dataset"]["sha256"]) == 64


def test_score_bias_rows(tmp_path):
    out = tmp_path / "s.jsonl"
    assert main(["score-bias", "--dataset", TOY, "--out", str(out)]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 60 and {"sentence_bucket", "video_bucket"} <= set(rows[0])


def test_eval_metrics(tmp_path):
    cands = tmp_path / "c.jsonl"
    cands.write_text(json.dumps({"video_id": "toy01", "caption": "a dog is running"}) + "\n")
    out = tmp_path / "m.json"
    assert main(["eval-metrics", "--dataset", TOY, "--candidates", str(cands), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["per_video"]["toy01"]["bleu_1"] == pytest.approx(1.0)
    assert report["mean"] == report["per_video"]["toy01"]


def test_train_outputs_are_deterministic(tmp_path):
    cfg = _small_config(tmp_path)
    for name in ("a", "b"):
        assert main(["train", "--config", cfg, "--dataset", TOY, "--out", str(tmp_path / name)]) == 0
    for f in ("checkpoint.json", "log.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["total_steps"] == 4


def test_train_flags_and_env_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("GMC_SEED", "5")
    cfg = _small_config(tmp_path)
    out = tmp_path / "r"
    assert main(["train", "--config", cfg, "--dataset", TOY, "--out", str(out), "--no-mcl",
                 "--margin-orientation", "complement"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 5
    assert manifest["config"]["use_mcl"] is False
    assert manifest["config"]["margin_orientation"] == "complement"
    last = json.loads((out / "log.jsonl").read_text().splitlines()[-1])
    assert last["step"] == 4


def test_gradcheck_exit_code(capsys):
    assert main(["gradcheck", "--loss", "gen", "--points", "1"]) == 0
    assert "gen" in capsys.readouterr().out


def test_ablate_rows(tmp_path):
    out = tmp_path / "a.jsonl"
    cfg = _small_config(tmp_path)
    assert main(["ablate", "--dataset", TOY, "--config", cfg, "--out", str(out)]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert [r["config"] for r in rows] == ["baseline", "+mcl+b", "+bfcl", "+gmc"]


@pytest.mark.parametrize("argv", [
    ["hist", "--level", "paragraph"],
    ["train", "--dataset", TOY],
    ["frobnicate"],
])
def test_usage_errors_exit_one(argv):
    assert main(argv) == 1


def test_bad_dataset_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{oops\n")
    assert main(["hist", "--dataset", str(bad)]) == 1
    assert "bad.jsonl:1" in capsys.readouterr().err


def test_unknown_config_key_exits_one(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rat": 1}))
    assert main(["train", "--config", str(cfg), "--dataset", TOY, "--out", str(tmp_path / "o")]) == 1
