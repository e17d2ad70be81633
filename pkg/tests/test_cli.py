import json
import subprocess
import sys

import numpy as np
import pytest

from xmaf import dataset as D
from xmaf.cli import main
from xmaf.features import write_wav

SMALL = ["--seq-len", "10", "--audio-dim", "6", "--video-dim", "6", "--n-sequences", "4"]
MODEL = ["--d-model", "8", "--heads", "2", "--layers", "1", "--dropout", "0", "--batch-size", "2",
         "--lr", "1e-3"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--seed", "1", *SMALL]) == 0
    assert main(["synth", "--out", str(data), "--seed", "2", "--split", "validation", *SMALL]) == 0
    assert main(["train", "--out", str(root / "model"), "--seed", "0", "--train", str(data / "train.manifest.json"),
                 "--val", str(data / "validation.manifest.json"), *MODEL, "--epochs", "2"]) == 0
    return root


def test_synth_writes_container_and_manifest(run):
    manifest = json.loads((run / "data" / "train.manifest.json").read_text())
    assert manifest["n_samples"] == 4 and manifest["generator_config"]["seed"] == 1
    assert (run / "data" / "train.xmaf").read_bytes()[:9] == b"XMAF-DATA"


def test_synth_config_file_and_flag_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seq_len": 12, "n_sequences": 3, "audio_dim": 4,
                                                  "video_dim": 4, "channels": "both_full"}))
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--n-sequences", "2", "--out", str(tmp_path)]) == 0
    ds = D.load(tmp_path / "train.manifest.json")
    assert len(ds) == 2 and ds.seq_len == 12 and ds.generator_config["channels"] == "both_full"


def test_synth_deterministic_given_seed(tmp_path):
    for d in ("a", "b"):
        main(["synth", "--out", str(tmp_path / d), "--seed", "9", *SMALL])
    assert (tmp_path / "a" / "train.xmaf").read_bytes() == (tmp_path / "b" / "train.xmaf").read_bytes()


def test_train_outputs(run):
    out = run / "model"
    for f in ("best.ckpt", "last.ckpt", "train_log.csv", "train_config.json"):
        assert (out / f).exists(), f
    cfg = json.loads((out / "train_config.json").read_text())
    assert cfg["model"]["audio_dim"] == 6 and cfg["model"]["seq_len"] == 10 and cfg["lr"] == 1e-3
    assert (out / "train_log.csv").read_text().splitlines()[0].startswith("epoch,step,train_loss")


def test_train_resume(run, tmp_path):
    data = run / "data"
    args = ["train", "--seed", "0", "--train", str(data / "train.manifest.json"),
            "--val", str(data / "validation.manifest.json"), *MODEL]
    assert main([*args, "--out", str(tmp_path), "--epochs", "3", "--resume",
                 str(run / "model" / "last.ckpt")]) == 0
    rows = (tmp_path / "train_log.csv").read_text().splitlines()
    assert len(rows) == 4 and rows[-1].split(",")[1] == "6"


def test_train_deterministic(run, tmp_path):
    data = run / "data"
    assert main(["train", "--out", str(tmp_path), "--seed", "0", "--train", str(data / "train.manifest.json"),
                 "--val", str(data / "validation.manifest.json"), *MODEL, "--epochs", "2"]) == 0
    assert (tmp_path / "train_log.csv").read_text() == (run / "model" / "train_log.csv").read_text()
    assert (tmp_path / "best.ckpt").read_bytes() == (run / "model" / "best.ckpt").read_bytes()


def test_eval(run, tmp_path):
    args = ["eval", "--checkpoint", str(run / "model" / "best.ckpt"),
            "--data", str(run / "data" / "validation.manifest.json"), "--model-id", "m"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    text = (tmp_path / "a" / "metrics.csv").read_text()
    assert text == (tmp_path / "b" / "metrics.csv").read_text()
    lines = text.splitlines()
    assert lines[0] == "model_id,split,ccc_valence,ccc_arousal,n_frames"
    assert lines[1].startswith("m,validation,") and lines[1].endswith(",40")


def test_ablate(run, tmp_path):
    assert main(["ablate", "--checkpoint", str(run / "model" / "best.ckpt"), "--seed", "3",
                 "--data", str(run / "data" / "validation.manifest.json"), "--modality", "video",
                 "--step", "0.5", "--trials", "2", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "ablation.csv").read_text().splitlines()
    assert rows[0] == "modality,proportion,trial,seed,ccc_valence,ccc_arousal" and len(rows) == 7
    assert rows[1].startswith("video,0.0,0,3-0-0,")
    assert len((tmp_path / "ablation_summary.csv").read_text().splitlines()) == 4


def test_params(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"tiny": {"d_model": 8, "heads": 2, "layers": 1,
                                                          "audio_dim": 4, "video_dim": 4, "seq_len": 5}}))
    assert main(["params", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "params.csv").read_text().splitlines()
    assert lines[0] == "model,trainable_parameters" and lines[1].startswith("tiny,")


def test_extract(tmp_path):
    rng = np.random.default_rng(0)
    sr = 8000
    t = np.arange(int(3.6 * sr)) / sr
    write_wav(tmp_path / "a.wav", 0.4 * np.sin(2 * np.pi * 150 * t), sr)
    crops = tmp_path / "crops"
    crops.mkdir()
    for i in range(105):
        np.save(crops / f"{i:05d}.npy", rng.uniform(-1, 1, (96, 96, 3)))
    rows = "\n".join(f"{v:.4f},{a:.4f}" for v, a in rng.uniform(-1, 1, (105, 2)))
    (tmp_path / "clip.csv").write_text("valence,arousal\n" + rows + "\n")
    assert main(["extract", "--audio", str(tmp_path / "a.wav"), "--video", str(crops),
                 "--annotations", str(tmp_path / "clip.csv"), "--out", str(tmp_path / "out")]) == 0
    ds = D.load(tmp_path / "out" / "train.manifest.json")
    assert len(ds) == 1 and ds[0].id == "clip-0000"
    assert ds.audio_dim == 4096 and ds.video_dim == 4096


@pytest.mark.parametrize("argv", [
    ["eval", "--checkpoint", "/nonexistent.ckpt", "--data", "/nonexistent.json", "--out", "/tmp/x"],
    ["synth", "--channels", "redundant", "--seq-len", "1", "--out", "/tmp/xmaf-bad"],
    ["params", "--config", "/nonexistent.json"],
])
def test_errors_exit_nonzero(argv, capsys):
    assert main(argv) == 2
    assert "error:" in capsys.readouterr().err


def test_bad_json_config(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2
    assert "not valid JSON" in capsys.readouterr().err


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "xmaf.cli", "gradcheck", "--list"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "matmul" in out.stdout.split()
