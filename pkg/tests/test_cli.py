import json
import subprocess
import sys

import numpy as np
import pytest

from wavedenoise.cli import run
from wavedenoise.data import Manifest, write_surrogate_corpus
from wavedenoise.dsp import AudioBuffer, read_wav, write_wav
from wavedenoise.metrics import EvalReport

TOY_JSON = {
    "model": {"stacks": 1, "dilations_per_stack": [1, 2, 4], "residual_channels": 8,
              "skip_channels": 8, "final_channels": [16, 8], "target_field": 32},
    "train": {"batch_size": 2},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    sd, nd = write_surrogate_corpus(root, 4, num_noise=1, duration=0.5, noise_duration=1.0, seed=2)
    (root / "toy.json").write_text(json.dumps(TOY_JSON))
    return root, sd, nd


def test_mix_deterministic(workspace, tmp_path):
    root, sd, nd = workspace
    args = ["mix", "--speech-dir", str(sd), "--noise-dir", str(nd), "--snrs", "0,5", "--seed", "3"]
    assert run(args + ["--out", str(tmp_path / "a.jsonl")]) == 0
    assert run(args + ["--out", str(tmp_path / "b.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert len(Manifest.load(tmp_path / "a.jsonl")) == 4


def test_mix_speaker_map(workspace, tmp_path):
    root, sd, nd = workspace
    (tmp_path / "map.json").write_text("{}")
    assert run(["mix", "--speech-dir", str(sd), "--noise-dir", str(nd), "--snrs", "0",
                "--speaker-map", str(tmp_path / "map.json"), "--out", str(tmp_path / "m.jsonl")]) == 0
    assert {r.speaker_id for r in Manifest.load(tmp_path / "m.jsonl").rows} == {0}


@pytest.fixture(scope="module")
def trained(workspace):
    root, sd, nd = workspace
    manifest = root / "train.jsonl"
    assert run(["mix", "--speech-dir", str(sd), "--noise-dir", str(nd), "--snrs", "5",
                "--out", str(manifest)]) == 0
    ckpt = root / "m.wdnz"
    assert run(["train", "--manifest", str(manifest), "--config", str(root / "toy.json"),
                "--steps", "3", "--seed", "1", "--out", str(ckpt), "--trace", str(root / "t.csv")]) == 0
    return manifest, ckpt


def test_train_reproducible(workspace, trained, tmp_path):
    root, _, _ = workspace
    manifest, ckpt = trained
    again = tmp_path / "again.wdnz"
    assert run(["--threads", "2", "train", "--manifest", str(manifest), "--config", str(root / "toy.json"),
                "--steps", "3", "--seed", "1", "--out", str(again), "--trace", str(tmp_path / "t.csv")]) == 0
    assert again.read_bytes() == ckpt.read_bytes()
    assert (tmp_path / "t.csv").read_text() == (root / "t.csv").read_text()


@pytest.mark.parametrize("mode", ["batched", "one-shot"])
def test_denoise_preserves_length(trained, tmp_path, mode):
    _, ckpt = trained
    x = AudioBuffer(np.random.default_rng(0).uniform(-0.3, 0.3, 1234))
    write_wav(x, tmp_path / "in.wav")
    assert run(["denoise", "--model", str(ckpt), "--in", str(tmp_path / "in.wav"),
                "--out", str(tmp_path / "out.wav"), "--mode", mode, "--speaker", "3"]) == 0
    assert len(read_wav(tmp_path / "out.wav")) == 1234


def test_wiener_command(tmp_path):
    write_wav(AudioBuffer(np.random.default_rng(1).normal(0, 0.1, 8000)), tmp_path / "in.wav")
    assert run(["wiener", "--in", str(tmp_path / "in.wav"), "--out", str(tmp_path / "out.wav"),
                "--gain-floor-db", "-20"]) == 0
    assert len(read_wav(tmp_path / "out.wav")) == 8000


def test_eval_command(workspace, trained, tmp_path, capsys):
    manifest, ckpt = trained
    out = tmp_path / "report.csv"
    assert run(["eval", "--manifest", str(manifest), "--out", str(out), "--model", str(ckpt),
                "--systems", "noisy,wiener,wavenet"]) == 0
    report = EvalReport.read(out)
    assert {r.system_id for r in report.rows} == {"noisy", "wiener", "wavenet"}
    assert "wiener" in capsys.readouterr().out


def test_inspect(capsys):
    assert run(["inspect"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["receptive_field 6139", "target_field 1601", "input_length 7739", "param_count 6348289"]


def test_inspect_config(workspace, capsys):
    root, _, _ = workspace
    assert run(["inspect", "--config", str(root / "toy.json"), "--target-field", "1"]) == 0
    assert "receptive_field 15" in capsys.readouterr().out


class TestExitCodes:
    def test_help(self, capsys):
        assert run(["--help"]) == 0
        assert "denoise" in capsys.readouterr().out

    def test_unknown_flag(self):
        assert run(["inspect", "--bogus"]) == 1

    def test_missing_command(self):
        assert run([]) == 1

    def test_unknown_system(self, trained, tmp_path):
        manifest, _ = trained
        assert run(["eval", "--manifest", str(manifest), "--out", str(tmp_path / "r.csv"),
                    "--systems", "magic"]) == 1

    def test_bad_threads_env(self, monkeypatch):
        monkeypatch.setenv("WAVEDENOISE_THREADS", "zero")
        assert run(["inspect"]) == 1

    def test_runtime_error(self, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"not audio")
        assert run(["wiener", "--in", str(tmp_path / "bad.wav"), "--out", str(tmp_path / "o.wav")]) == 2

    def test_corrupt_checkpoint(self, tmp_path):
        (tmp_path / "m.wdnz").write_bytes(b"WDNZ")
        write_wav(AudioBuffer(np.zeros(100)), tmp_path / "in.wav")
        assert run(["denoise", "--model", str(tmp_path / "m.wdnz"), "--in", str(tmp_path / "in.wav"),
                    "--out", str(tmp_path / "o.wav")]) == 2

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "wavedenoise", "inspect", "--target-field", "1"],
                              capture_output=True, text=True, check=False)
        assert proc.returncode == 0
        assert "input_length 6139" in proc.stdout
