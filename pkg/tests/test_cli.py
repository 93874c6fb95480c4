"""
Tests for CLI
"""

import csv
import json
import os
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
TINY = str(ROOT / "configs" / "tiny.json")


# run the CLI
def run_cli(args, tmp_path):
    """Helper to run the CLI as a subprocess."""
    env = dict(os.environ, LOG_FILE=str(tmp_path / "xattn.log"), LOG_LEVEL="1", XATTN_THREADS="2")
    result = subprocess.run(
        [sys.executable, "-m", "src.xattn.cli", *args],
        capture_output=True,
        text=True,
        cwd=ROOT,
        env=env,
    )
    return result


def summary(result):
    assert result.returncode == 0, result.stderr
    return json.loads(result.stdout.strip().splitlines()[-1])


def gen_data(tmp_path, seed=0):
    out = summary(run_cli(["gen-data", "--config", TINY, "--seed", str(seed), "--out", str(tmp_path / "runs")], tmp_path))
    return Path(out["run_dir"])


# test the help message
def test_help_message(tmp_path):
    result = run_cli(["--help"], tmp_path)
    assert result.returncode == 0
    for verb in ("gen-data", "pretrain-qcross", "transfer", "dump-attention"):
        assert verb in result.stdout


def test_unknown_verb(tmp_path):
    result = run_cli(["fly"], tmp_path)
    assert result.returncode == 2


def test_gen_data_is_deterministic(tmp_path):
    a = gen_data(tmp_path / "a", seed=7)
    b = gen_data(tmp_path / "b", seed=7)
    for rel in ("train.jsonl", "dev.jsonl", "eval/0-2.jsonl", "corpus/parallel-shared.jsonl"):
        assert (a / "data" / rel).read_bytes() == (b / "data" / rel).read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seed"] == 7
    assert "data/train.jsonl" in manifest["outputs"]
    assert json.loads((a / "config.json").read_text())["seed"] == 7
    assert a.name.startswith("gen-data-7-")


def test_unknown_config_key_exits_2(tmp_path):
    result = run_cli(["gen-data", "--set", "bogus=1", "--out", str(tmp_path)], tmp_path)
    assert result.returncode == 2
    assert result.stderr.startswith("error=ConfigError")
    assert result.stdout == ""


def test_missing_checkpoint_exits_3(tmp_path):
    missing = tmp_path / "nowhere" / "model.xatn"
    result = run_cli(["eval", "--set", f"checkpoint={missing}", "--out", str(tmp_path)], tmp_path)
    assert result.returncode == 3
    assert "error=DataError" in result.stderr
    assert str(missing) in result.stderr


def test_pretrain_qcross_needs_backbone(tmp_path):
    result = run_cli(["pretrain-qcross", "--config", TINY, "--out", str(tmp_path)], tmp_path)
    assert result.returncode == 2
    assert "backbone_checkpoint" in result.stderr


def test_logs_are_json_lines(tmp_path):
    gen_data(tmp_path)
    lines = (tmp_path / "xattn.log").read_text().splitlines()
    assert lines
    records = [json.loads(line) for line in lines]
    assert {r.get("command") for r in records} == {"gen-data"}
    assert len({r["run_id"] for r in records}) == 1


def test_pipeline(tmp_path):
    run_dir = gen_data(tmp_path)
    data = f"data_dir={run_dir / 'data'}"
    out = ["--config", TINY, "--out", str(tmp_path / "runs")]

    backbone = summary(run_cli(["pretrain-backbone", *out, "--set", data], tmp_path))
    assert backbone["perplexity"] > 1.0

    qcross = summary(
        run_cli(
            ["pretrain-qcross", *out, "--set", data, "--set", f"backbone_checkpoint={backbone['checkpoint']}",
             "--set", "qcross_key=0-1"],
            tmp_path,
        )
    )
    assert qcross["initial_perplexity"] > 1.0

    trained = summary(
        run_cli(
            ["train", *out, "--set", data, "--set", f"backbone_checkpoint={qcross['checkpoint']}",
             "--set", "scheme=pair-qcross", "--set", "qcross_key=0-1"],
            tmp_path,
        )
    )
    assert 0.0 <= trained["train_accuracy"] <= 1.0

    ckpt = f"checkpoint={trained['checkpoint']}"
    evaluated = summary(run_cli(["eval", *out, "--set", data, "--set", ckpt, "--set", "scheme=pair-qcross"], tmp_path))
    assert evaluated["cells"] == 8
    assert 0.0 <= evaluated["mean_accuracy"] <= 1.0

    cell = run_dir / "data" / "eval" / "0-2.jsonl"
    single = summary(
        run_cli(["eval", *out, "--set", ckpt, "--set", "scheme=pair-qcross", "--set", f"eval_path={cell}"], tmp_path)
    )
    assert single["total"] == sum(1 for _ in cell.open())
    preds = Path(single["run_dir"]) / "predictions.jsonl"
    assert len(preds.read_text().splitlines()) == single["total"]

    dumped = summary(
        run_cli(["dump-attention", *out, "--set", ckpt, "--set", "scheme=pair-qcross", "--set", "qcross_key=0-1",
                 "--set", f"eval_path={cell}"], tmp_path)
    )
    payload = json.loads((Path(dumped["run_dir"]) / "attention.json").read_text())
    assert len(payload["attention"]) == dumped["layers"] == 1
    assert len(payload["attention"][0][0]) == dumped["tokens"]
    assert (Path(dumped["run_dir"]) / "masks.json").is_file()


def test_transfer_smoke(tmp_path):
    result = run_cli(
        ["transfer", "--config", TINY, "--out", str(tmp_path / "runs"), "--set", "schemes=standard,pair-qcross",
         "--set", "n_theories=10"],
        tmp_path,
    )
    out = summary(result)
    run_dir = Path(out["run_dir"])
    with open(run_dir / "transfer.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    schemes = {r["scheme"] for r in rows}
    assert schemes == {"standard", "pair-qcross", "pair-qcross[0-1]"}
    assert all(0.0 <= float(r["accuracy"]) <= 1.0 for r in rows)
    assert {r["recipe"] for r in rows} == {"mix-full-ft"}
    assert json.loads((run_dir / "transfer.json").read_text())["seeds"] == [0]
    assert list((run_dir / "seed0").glob("stability-*.json"))
