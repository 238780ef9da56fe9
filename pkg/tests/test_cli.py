from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from wavesep.audio import SOURCES, read_wav
from wavesep.cli import FULL_SCALE_DEFAULTS, main, parse_args
from wavesep.model import load_model

SYNTH = ["synth", "--tracks", "2", "--duration", "8", "--sample-rate", "8000", "--mono", "--silences",
         "--silence-min", "5.5", "--silence-max", "6"]
TRAIN = ["--epochs", "1", "--batch-size", "8", "--segment", "1", "--stride", "1", "--sample-rate", "8000"]


def run(*argv) -> int:
    return main([str(a) for a in argv])


def snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def pipeline(root: Path) -> None:
    corpus, mixtures = root / "corpus", root / "mixtures"
    assert run(*SYNTH, "--out", corpus) == 0
    assert run("synth", "--tracks", "1", "--duration", "12", "--sample-rate", "8000", "--unlabeled",
               "--seed", "5", "--out", mixtures) == 0
    assert run("train", "--data", corpus, "--out", root / "train", "--checkpoint-every", "1", *TRAIN) == 0
    sep = root / "estimates" / "track000"
    assert run("separate", root / "train" / "model.ckpt", corpus / "track000" / "mixture.wav", sep) == 0
    assert run("separate", root / "train" / "model.ckpt", corpus / "track001" / "mixture.wav",
               root / "estimates" / "track001") == 0
    assert run("evaluate", root / "estimates", corpus, "--out", root / "report.json") == 0
    assert run("train-detector", "--data", corpus, "--out", root / "det", "--epochs", "1", "--width", "2",
               "--batch-size", "8") == 0
    ckpt = root / "det" / "detector.ckpt"
    assert run("detect", ckpt, corpus / "track000" / "mixture.wav", "--out", root / "probs.tsv") == 0
    assert run("calibrate", ckpt, "--data", corpus, "--out", root / "thr.json", "--min-selected", "1",
               "--precision", "0.0") == 0
    assert run("extract", ckpt, root / "thr.json", mixtures, root / "unlabeled", "--workers", "2") == 0
    assert run("remix-train", "--data", corpus, "--out", root / "remix", "--unlabeled", root / "unlabeled",
               "--remix-probability", "1", *TRAIN) == 0


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    pipeline(root)
    first = snapshot(root)
    pipeline(root)  # same paths, same seed
    return root, first, snapshot(root)


def test_rerun_is_byte_identical(runs):
    _, first, second = runs
    assert first.keys() == second.keys()
    differing = [name for name in first if first[name] != second[name]]
    assert differing == []


def test_expected_artifacts(runs):
    root, files, _ = runs
    for name in ["corpus/silences.tsv", "corpus/config.txt", "train/model.ckpt", "train/train.log",
                 "train/checkpoints/epoch_0001.ckpt", "estimates/track000/vocals.wav", "report.json",
                 "det/detector.ckpt", "probs.tsv", "thr.json", "unlabeled/D_bass/manifest.tsv",
                 "remix/model.ckpt"]:
        assert name in files, name
    assert "mixtures/track000/mixture.wav" in files
    assert "mixtures/track000/drums.wav" not in files


def test_train_log_header_and_lines(runs):
    root, _, _ = runs
    lines = (root / "train" / "train.log").read_text().splitlines()
    header = [l for l in lines if l.startswith("# ")]
    assert "# seed=0" in header and "# epochs=1" in header
    body = [l for l in lines if not l.startswith("#")]
    assert len(body) == 1 and body[0].startswith("epoch=0 ")


def test_remix_log_counts_steps(runs):
    root, _, _ = runs
    body = [l for l in (root / "remix" / "train.log").read_text().splitlines() if not l.startswith("#")]
    fields = dict(item.split("=") for item in body[0].split())
    assert int(fields["remix_steps"]) + int(fields["remix_skipped"]) == int(fields["batches"])


def test_separate_matches_input_length(runs):
    root, _, _ = runs
    mix = read_wav(root / "corpus" / "track000" / "mixture.wav")
    for name in SOURCES:
        wave = read_wav(root / "estimates" / "track000" / f"{name}.wav")
        assert wave.samples.shape == mix.samples.shape and wave.sample_rate == mix.sample_rate


def test_report_is_json_with_config(runs):
    root, _, _ = runs
    doc = json.loads((root / "report.json").read_text())
    assert doc["config"]["frame"] == 1.0
    assert {"aggregate", "tracks"} <= set(doc)


def test_detect_table_shape(runs):
    root, _, _ = runs
    lines = [l for l in (root / "probs.tsv").read_text().splitlines() if not l.startswith("#")]
    assert lines[0].split("\t") == ["window", "start_s", *SOURCES]
    assert len(lines) - 1 == (8000 * 8 - 5120) // 512 + 1
    assert all(0.0 <= float(x) <= 1.0 for l in lines[1:] for x in l.split("\t")[2:])


def test_thresholds_record_config(runs):
    root, _, _ = runs
    doc = json.loads((root / "thr.json").read_text())
    assert doc["settings"]["config"]["min_selected"] == 1
    assert set(doc["thresholds"]) == set(SOURCES)


def test_checkpoint_config_follows_flags(runs):
    root, _, _ = runs
    cfg = load_model(root / "train" / "model.ckpt").config
    assert (cfg.depth, cfg.initial_channels, cfg.input_channels, cfg.sample_rate) == (2, 4, 1, 8000)


# ---- option precedence and exit codes -------------------------------------------

def test_precedence(tmp_path):
    base = ["train", "--data", "d", "--out", "o"]
    assert parse_args(base).depth == 2
    assert parse_args(base + ["--full-scale"]).depth == FULL_SCALE_DEFAULTS["depth"]
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\ndepth = 3\nbatch-size=5\nno_such=1\n")
    assert main(base + ["--config", str(cfg)]) == 1
    cfg.write_text("depth=3\nbatch-size=5\nmono=false\n")
    args = parse_args(base + ["--full-scale", "--config", str(cfg)])
    assert (args.depth, args.batch_size, args.mono, args.channels) == (3, 5, False, 48)
    args = parse_args(base + ["--full-scale", "--config", str(cfg), "--depth", "4", "--mono"])
    assert (args.depth, args.mono) == (4, True)


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run("train", "--out", tmp_path) == 1
    assert run("no-such-command") == 1
    cfg = tmp_path / "c.txt"
    cfg.write_text("depth\n")
    assert run("train", "--data", tmp_path, "--out", tmp_path, "--config", cfg) == 1
    cfg.write_text("depth=many\n")
    assert run("train", "--data", tmp_path, "--out", tmp_path, "--config", cfg) == 1


def test_data_errors_exit_2(tmp_path):
    assert run("separate", tmp_path / "missing.ckpt", tmp_path / "x.wav", tmp_path / "o") == 2
    (tmp_path / "bad.wav").write_bytes(b"RIFF")
    assert run("detect", tmp_path / "bad.wav", tmp_path / "bad.wav") == 2
    (tmp_path / "empty").mkdir()
    assert run("train", "--data", tmp_path / "empty", "--out", tmp_path / "o", *TRAIN) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "wavesep", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for command in ["synth", "train", "remix-train", "separate", "evaluate", "train-detector", "detect",
                    "calibrate", "extract"]:
        assert command in out.stdout
